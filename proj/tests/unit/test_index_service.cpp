#include <thread>

#include "mmcl/index.hpp"
#include "mmcl/service.hpp"
#include "support.hpp"

// After Eigen: httplib pulls in headers that clash with its templates.
#include <httplib.h>

using namespace mmcl;

namespace {

struct Fixture {
  Corpus corpus;
  std::vector<ClinicalNote> notes;
  Checkpoint ckpt;
  std::string hash = "feedface";
};

/// First ten records of the tiny corpus with their template notes and an
/// untrained multimodal checkpoint.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture fx;
    const auto& all = test::tiny_corpus().corpus.records();
    fx.corpus = Corpus(std::vector<SampleRecord>(all.begin(), all.begin() + 10));
    TemplateBackend backend;
    fx.notes = synthesize(fx.corpus, Strategy::M, backend, 0).notes;
    fx.ckpt.model = std::make_shared<MultimodalModel>(ModelConfig{}, 31);
    fx.ckpt.meta = {{"strategy", "M"}};
    fx.ckpt.vocab_hash = Tokenizer::builtin().vocab_hash();
    return fx;
  }();
  return f;
}

EmbeddingIndex fixture_index() {
  const auto& f = fixture();
  ImageStore store(test::tiny_corpus().dir);
  return build_index(f.ckpt, f.hash, f.corpus, store, f.notes);
}

/// Random unit vectors with synthetic metadata.
EmbeddingIndex random_index(std::size_t n, int dim, Rng& rng) {
  std::vector<IndexItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    IndexItem it;
    it.sample_id = "s" + std::to_string(i);
    it.modality = i % 2 ? Modality::text : Modality::image;
    if (it.modality == Modality::image) {
      it.id = image_item_id(it.sample_id);
    } else {
      it.strategy = Strategy::M;
      it.id = note_item_id(Strategy::M, it.sample_id);
      it.text = "note " + it.sample_id;
    }
    it.dataset = "ds";
    items.push_back(std::move(it));
  }
  return EmbeddingIndex(std::move(items), test::random_unit_rows(static_cast<int>(n), dim, rng), "h");
}

nlohmann::json body_of(const ServiceResponse& r) { return nlohmann::json::parse(r.body); }

const nlohmann::json& api_schemas() {
  static const nlohmann::json s =
      nlohmann::json::parse(read_file(std::filesystem::path(MMCL_SOURCE_DIR) / "api" / "index_service.schema.json"));
  return s.at("components").at("schemas");
}

/// Required keys present and no keys outside the declared properties.
void check_conforms(const nlohmann::json& obj, const std::string& schema) {
  INFO(schema << ": " << obj.dump());
  const auto& s = api_schemas().at(schema);
  for (const auto& key : s.value("required", nlohmann::json::array())) CHECK(obj.contains(key.get<std::string>()));
  for (const auto& [key, _] : obj.items()) CHECK(s.at("properties").contains(key));
}

}  // namespace

TEST_SUITE("index") {
  TEST_CASE("one image and one note entry per record") {
    const auto index = fixture_index();
    CHECK(index.size() == 20);
    CHECK(index.dim() == 128);
    std::set<std::string> ids;
    for (const auto& it : index.items()) ids.insert(it.id);
    CHECK(ids.size() == 20);
    for (const auto& r : fixture().corpus.records()) {
      CHECK(index.find(image_item_id(r.id)));
      CHECK(index.find(note_item_id(Strategy::M, r.id)));
    }
    CHECK_FALSE(index.find("img:nope"));
  }

  TEST_CASE("rebuilding is byte-identical and survives a round trip") {
    const std::string a = serialize_index(fixture_index());
    CHECK(a == serialize_index(fixture_index()));
    const EmbeddingIndex back = parse_index(a);
    CHECK(serialize_index(back) == a);
    CHECK(back.checkpoint_hash() == "feedface");
    CHECK_THROWS_AS(parse_index(a.substr(0, a.size() - 3)), Error);
    CHECK_THROWS_AS(parse_index("MMCLINDXjunk"), Error);

    test::TempDir dir("index");
    save_index(back, dir / "x.idx");
    CHECK(serialize_index(load_index(dir / "x.idx")) == a);
  }

  TEST_CASE("stored vectors equal direct encodings") {
    const auto& f = fixture();
    const auto index = fixture_index();
    ImageStore store(test::tiny_corpus().dir);
    for (const auto& r : f.corpus.records()) {
      const Matrix zi = f.ckpt.model->embed_images({&store.get(r)});
      const auto pi = *index.find(image_item_id(r.id));
      CHECK(test::max_relative_error(zi, index.vectors().row(static_cast<Eigen::Index>(pi))) < 1e-12);
    }
    for (const auto& n : f.notes) {
      const Matrix zt = f.ckpt.model->embed_texts({Tokenizer::builtin().encode(n.text)});
      const auto pt = *index.find(note_item_id(Strategy::M, n.sample_id));
      CHECK(test::max_relative_error(zt, index.vectors().row(static_cast<Eigen::Index>(pt))) < 1e-12);
      CHECK(index.item(pt).text == n.text);
    }
    QueryEncoder enc(f.ckpt);
    const auto& n0 = f.notes.front();
    const auto p0 = *index.find(note_item_id(Strategy::M, n0.sample_id));
    CHECK(test::max_relative_error(enc.encode_text(n0.text), index.vectors().row(static_cast<Eigen::Index>(p0))) < 1e-12);
  }

  TEST_CASE("build errors") {
    const auto& f = fixture();
    ImageStore store(test::tiny_corpus().dir);
    Checkpoint img_only;
    ModelConfig cfg;
    cfg.with_text = false;
    img_only.model = std::make_shared<MultimodalModel>(cfg, 1);
    CHECK_THROWS_AS(build_index(img_only, "h", f.corpus, store, f.notes), Error);
    CHECK(build_index(img_only, "h", f.corpus, store, {}).size() == 10);
    auto stray = f.notes;
    stray.front().sample_id = "not-in-corpus";
    CHECK_THROWS_AS(build_index(f.ckpt, "h", f.corpus, store, stray), Error);
  }

  TEST_CASE("query matches a brute-force ranking") {
    Rng rng(41);
    const EmbeddingIndex index = random_index(300, 16, rng);
    for (int trial = 0; trial < 30; ++trial) {
      const Eigen::RowVectorXd q = test::random_matrix(1, 16, rng).row(0);
      const std::optional<Modality> filter =
          trial % 3 == 0 ? std::nullopt : std::optional<Modality>(trial % 3 == 1 ? Modality::image : Modality::text);
      std::vector<std::pair<double, std::size_t>> all;
      for (std::size_t i = 0; i < index.size(); ++i) {
        if (filter && index.item(i).modality != *filter) continue;
        all.push_back({-index.vectors().row(static_cast<Eigen::Index>(i)).dot(q) / q.norm(), i});
      }
      std::sort(all.begin(), all.end());
      const QueryResult r = query(index, q, 10, filter);
      REQUIRE(r.hits.size() == 10);
      CHECK(r.warning.empty());
      for (std::size_t j = 0; j < 10; ++j) {
        CHECK(r.hits[j].item == all[j].second);
        CHECK(r.hits[j].score == doctest::Approx(-all[j].first).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("k beyond the candidate count returns everything with a warning") {
    Rng rng(42);
    const EmbeddingIndex index = random_index(7, 4, rng);
    const QueryResult r = query(index, index.vectors().row(0), 50);
    CHECK(r.hits.size() == 7);
    CHECK_FALSE(r.warning.empty());
    const QueryResult images = query(index, index.vectors().row(0), 50, Modality::image);
    CHECK(images.hits.size() == 4);
  }

  TEST_CASE("every stored vector retrieves itself first") {
    const auto index = fixture_index();
    for (std::size_t i = 0; i < index.size(); ++i) {
      const QueryResult r = query(index, index.vectors().row(static_cast<Eigen::Index>(i)), 1);
      REQUIRE(r.hits.size() == 1);
      CHECK(r.hits[0].score == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(index.vectors().row(static_cast<Eigen::Index>(r.hits[0].item)).dot(index.vectors().row(static_cast<Eigen::Index>(i))) ==
            doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("index rejects inconsistent input") {
    Rng rng(43);
    std::vector<IndexItem> items(2);
    items[0].id = items[1].id = "img:a";
    CHECK_THROWS_AS(EmbeddingIndex(items, test::random_unit_rows(2, 3, rng), "h"), Error);
    items[1].id = "img:b";
    CHECK_THROWS_AS(EmbeddingIndex(items, test::random_matrix(2, 3, rng, 5.0), "h"), Error);
    CHECK_THROWS_AS(EmbeddingIndex(items, test::random_unit_rows(3, 3, rng), "h"), Error);
  }
}

TEST_SUITE("service") {
  TEST_CASE("handlers") {
    const auto& f = fixture();
    test::TempDir dir("svc");
    IndexService svc(fixture_index(), f.ckpt, f.hash, {test::tiny_corpus().dir, "*"});

    const auto health = body_of(svc.health());
    CHECK(health["status"] == "ok");
    CHECK(health["index_size"] == 20);

    const auto ok = svc.query_text(R"({"text": "melanoma with irregular border", "k": 3})");
    CHECK(ok.status == 200);
    CHECK(body_of(ok)["results"].size() == 3);

    const auto filtered = body_of(svc.query_text(R"({"text": "nevus", "k": 5, "filter": "image"})"));
    for (const auto& r : filtered["results"]) CHECK(r["modality"] == "image");

    const std::string first_id = f.corpus.at(0).id;
    const auto seeded = body_of(svc.query_text(R"({"seed_id": "img:)" + first_id + R"(", "k": 1})"));
    CHECK(seeded["results"][0]["id"] == "img:" + first_id);
    CHECK(seeded["results"][0]["score"].get<double>() == doctest::Approx(1.0).epsilon(1e-6));

    CHECK(svc.query_text("{not json").status == 400);
    CHECK(svc.query_text(R"({"k": 3})").status == 400);
    CHECK(svc.query_text(R"({"text": "x", "k": 0})").status == 400);
    CHECK(svc.query_text(R"({"text": "x", "filter": "audio"})").status == 400);
    CHECK(svc.query_text(R"({"text": "   "})").status == 422);
    CHECK(svc.query_text(R"({"seed_id": "img:missing"})").status == 404);

    const auto big = body_of(svc.query_text(R"({"text": "lesion", "k": 100})"));
    CHECK(big["results"].size() == 20);
    CHECK(big.contains("warning"));

    const std::string png = read_file(test::tiny_corpus().dir / f.corpus.at(0).image_ref);
    const auto img = svc.query_image(png, "4", "text");
    CHECK(img.status == 200);
    for (const auto& r : body_of(img)["results"]) CHECK(r["modality"] == "text");
    CHECK(svc.query_image("garbage bytes", "4", "").status == 422);
    CHECK(svc.query_image("", "4", "").status == 400);
    CHECK(svc.query_image(png, "four", "").status == 400);

    const auto item = svc.item("img:" + first_id);
    CHECK(item.status == 200);
    CHECK_FALSE(body_of(item)["image_base64"].is_null());
    const auto note = body_of(svc.item(note_item_id(Strategy::M, first_id)));
    CHECK(note["strategy"] == "M");
    CHECK(svc.item("note:M:missing").status == 404);
  }

  TEST_CASE("responses follow the shared API schema") {
    const auto& f = fixture();
    IndexService svc(fixture_index(), f.ckpt, f.hash, {test::tiny_corpus().dir, "*"});
    check_conforms(body_of(svc.health()), "Health");
    const auto q = body_of(svc.query_text(R"({"text": "lesion", "k": 50})"));
    check_conforms(q, "QueryResponse");
    for (const auto& hit : q["results"]) check_conforms(hit, "Hit");
    const std::string id = f.corpus.at(0).id;
    check_conforms(body_of(svc.item("img:" + id)), "Item");
    check_conforms(body_of(svc.item(note_item_id(Strategy::M, id))), "Item");
    check_conforms(body_of(svc.item("img:none")), "Error");
    const auto& labels = api_schemas().at("Label").at("enum");
    for (const auto& hit : q["results"]) CHECK(std::find(labels.begin(), labels.end(), hit["label"]) != labels.end());
  }

  TEST_CASE("checkpoint mismatch is refused") {
    const auto& f = fixture();
    CHECK_THROWS_AS(IndexService(fixture_index(), f.ckpt, "other"), Error);
  }

  TEST_CASE("HTTP round trip") {
    const auto& f = fixture();
    IndexService svc(fixture_index(), f.ckpt, f.hash, {test::tiny_corpus().dir, "http://localhost:5173"});
    httplib::Server server;
    svc.mount(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    const auto health = client.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(health->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");

    const auto q = client.Post("/query/text", R"({"text": "basal cell carcinoma", "k": 2})", "application/json");
    REQUIRE(q);
    CHECK(q->status == 200);
    CHECK(nlohmann::json::parse(q->body)["results"].size() == 2);

    const std::string png = read_file(test::tiny_corpus().dir / f.corpus.at(1).image_ref);
    const httplib::MultipartFormDataItems form{{"image", png, "x.png", "image/png"}, {"k", "3", "", ""}};
    const auto qi = client.Post("/query/image", form);
    REQUIRE(qi);
    CHECK(qi->status == 200);
    CHECK(nlohmann::json::parse(qi->body)["results"].size() == 3);

    const auto missing = client.Get("/item/img%3Anope");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    const auto found = client.Get("/item/img:" + f.corpus.at(1).id);
    REQUIRE(found);
    CHECK(found->status == 200);

    const auto pre = client.Options("/query/text");
    REQUIRE(pre);
    CHECK(pre->status == 204);

    server.stop();
    worker.join();
  }
}
