#include "mmcl/model.hpp"
#include "support.hpp"

using namespace mmcl;

namespace {

std::vector<const ImageTensor*> some_images(ImageStore& store, std::size_t n) {
  std::vector<const ImageTensor*> out;
  const auto& c = test::tiny_corpus().corpus;
  for (std::size_t i = 0; i < n && i < c.size(); ++i) out.push_back(&store.get(c.at(i)));
  return out;
}

const std::vector<std::string>& some_texts() {
  static const std::vector<std::string> texts{
      "The image includes a malignant skin lesion, specifically a melanoma",
      "The image includes a benign skin lesion, specifically a benign nevus (specifically a melanocytic nevus)",
      "border: irregular.",
      "The image includes a malignant skin lesion, specifically a basal cell carcinoma. color: pink, white."};
  return texts;
}

std::vector<TokenSequence> tokens_of(const std::vector<std::string>& texts) {
  std::vector<TokenSequence> out;
  for (const auto& t : texts) out.push_back(Tokenizer::builtin().encode(t));
  return out;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("embedding shapes, unit norm and determinism") {
    MultimodalModel model({}, 1);
    ImageStore store(test::tiny_corpus().dir);
    const auto imgs = some_images(store, 3);
    const Matrix z = model.embed_images(imgs);
    CHECK(z.rows() == 3);
    CHECK(z.cols() == 128);
    for (Eigen::Index i = 0; i < z.rows(); ++i) CHECK(z.row(i).norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(z == model.embed_images(imgs));
    const Matrix t = model.embed_texts(tokens_of(some_texts()));
    CHECK(t.rows() == 4);
    CHECK(t.cols() == 128);
    CHECK(t == model.embed_texts(tokens_of(some_texts())));
  }

  TEST_CASE("batch encoding equals per-sample encoding") {
    MultimodalModel model({}, 2);
    ImageStore store(test::tiny_corpus().dir);
    const auto imgs = some_images(store, 4);
    const Matrix batch = model.embed_images(imgs);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const Matrix single = model.embed_images({imgs[i]});
      CHECK(test::max_relative_error(single, batch.row(static_cast<Eigen::Index>(i))) < 1e-12);
    }
  }

  TEST_CASE("padding is masked out") {
    // In a mixed-length batch the shorter sequences are padded; each row must
    // match the sequence encoded alone.
    MultimodalModel model({}, 3);
    const auto tokens = tokens_of(some_texts());
    const Matrix batch = model.embed_texts(tokens);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const Matrix single = model.embed_texts({tokens[i]});
      CHECK(test::max_relative_error(single, batch.row(static_cast<Eigen::Index>(i))) < 1e-10);
    }
  }

  TEST_CASE("classifier") {
    MultimodalModel model({}, 4);
    const auto& clf = model.classifier();
    const auto zero = clf.classify(std::vector<double>(128, 0.0));
    REQUIRE(zero.size() == 5);
    for (int c = 0; c < 5; ++c) CHECK(zero[static_cast<std::size_t>(c)] == clf.bias().value()[static_cast<std::size_t>(c)]);
    CHECK_THROWS_AS(clf.classify(std::vector<double>(64, 0.0)), Error);

    int weights = 0;
    for (const auto& p : model.parameters()) weights += p.name.rfind("classifier.", 0) == 0;
    CHECK(weights == 2);

    // Both modalities score through the same parameter node.
    ImageStore store(test::tiny_corpus().dir);
    const Matrix zi = model.embed_images(some_images(store, 1));
    const Matrix zt = model.embed_texts(tokens_of({some_texts()[0]}));
    const Matrix si = model.scores(zi), st = model.scores(zt);
    const auto& w = clf.weight().value();
    for (int c = 0; c < 5; ++c) {
      double ei = clf.bias().value()[static_cast<std::size_t>(c)], et = ei;
      for (int k = 0; k < 128; ++k) {
        ei += zi(0, k) * w[static_cast<std::size_t>(k * 5 + c)];
        et += zt(0, k) * w[static_cast<std::size_t>(k * 5 + c)];
      }
      CHECK(si(0, c) == doctest::Approx(ei).epsilon(1e-12));
      CHECK(st(0, c) == doctest::Approx(et).epsilon(1e-12));
    }
  }

  TEST_CASE("every trainable parameter receives gradient from the composite loss") {
    MultimodalModel model({}, 5);
    ImageStore store(test::tiny_corpus().dir);
    const auto imgs = some_images(store, 4);
    const auto tokens = tokens_of(some_texts());
    const std::vector<int> labels{0, 1, 2, 3};
    const nn::Var zi = model.encode_images(imgs, true);
    const nn::Var zt = model.encode_texts(tokens, true);
    const LossWeights w;
    const nn::Var loss = weighted_sum(
        {cross_entropy_loss(model.classify(zi), labels), cross_entropy_loss(model.classify(zt), labels),
         l1_align_loss(zi, zt), cosine_align_loss(zi, zt), nt_xent_loss(zi, zt, {w.temperature, true})},
        {w.ce_img, w.ce_txt, w.l1, w.cos, w.ntxent});
    nn::backward(loss);
    std::size_t trainable = 0;
    for (const auto& p : model.parameters()) {
      if (!p.var.requires_grad()) {
        CHECK(p.name.find("running_") != std::string::npos);
        continue;
      }
      ++trainable;
      double mag = 0.0;
      for (double g : p.var.grad().data) mag += std::abs(g);
      INFO(p.name);
      CHECK(mag > 0.0);
    }
    CHECK(trainable > 30);
  }

  TEST_CASE("checkpoint round trip") {
    Checkpoint ckpt;
    ckpt.model = std::make_shared<MultimodalModel>(ModelConfig{}, 6);
    ckpt.meta = {{"strategy", "M"}};
    ckpt.vocab_hash = Tokenizer::builtin().vocab_hash();
    const std::string bytes = serialize_checkpoint(ckpt);
    const Checkpoint back = parse_checkpoint(bytes);
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(back.meta["strategy"] == "M");
    const auto tokens = tokens_of(some_texts());
    CHECK(back.model->embed_texts(tokens) == ckpt.model->embed_texts(tokens));

    Checkpoint wrong = ckpt;
    wrong.vocab_hash = "0000";
    CHECK_THROWS_AS(parse_checkpoint(serialize_checkpoint(wrong)), Error);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 8)), Error);
    CHECK_THROWS_AS(parse_checkpoint("not a checkpoint"), Error);
  }

  TEST_CASE("image-only models carry no text parameters") {
    ModelConfig cfg;
    cfg.with_text = false;
    Checkpoint ckpt;
    ckpt.model = std::make_shared<MultimodalModel>(cfg, 7);
    for (const auto& p : parse_checkpoint(serialize_checkpoint(ckpt)).model->parameters()) {
      CHECK(p.name.rfind("text", 0) != 0);
    }
    CHECK_THROWS_AS(ckpt.model->embed_texts(tokens_of({"melanoma"})), Error);
  }

  TEST_CASE("images must be preprocessed") {
    MultimodalModel model({}, 8);
    ImageTensor raw(100, 80);
    CHECK_THROWS_AS(model.embed_images({&raw}), Error);
  }

  TEST_CASE("initialization depends on the seed only") {
    MultimodalModel a({}, 9), b({}, 9), c({}, 10);
    CHECK(a.classifier().weight().value().data == b.classifier().weight().value().data);
    CHECK(a.classifier().weight().value().data != c.classifier().weight().value().data);
  }
}
