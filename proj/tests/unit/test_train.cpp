#include "mmcl/train.hpp"
#include "support.hpp"

using namespace mmcl;

namespace {

std::vector<ClinicalNote> template_notes(const Corpus& c) {
  TemplateBackend backend;
  return synthesize(c, Strategy::M, backend, 0).notes;
}

TrainConfig quick_config(int epochs = 2) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.learning_rate = 1e-3;
  return cfg;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.weights.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
  }

  TEST_CASE("config defaults") {
    const TrainConfig cfg;
    CHECK(cfg.epochs == 15);
    CHECK(cfg.learning_rate == 1e-4);
    CHECK(cfg.weights.ce_img == 1.0);
    CHECK(cfg.weights.ce_txt == 1.0);
    CHECK(cfg.weights.l1 == 1.0);
    CHECK(cfg.weights.cos == 1.0);
    CHECK(cfg.weights.ntxent == 0.5);
    CHECK(cfg.weights.temperature == 0.5);
  }

  TEST_CASE("config json round trip and unknown keys") {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.weights.l1 = 0.25;
    cfg.seed = 42;
    const TrainConfig back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"epoch", 3}}), Error);
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"weights", {{"l2", 1}}}}), Error);
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"epochs", 0}}), Error);
  }

  TEST_CASE("grid expansion") {
    const auto grid = nlohmann::json::parse(R"({"learning_rate": [1e-4, 1e-3], "weights.l1": [0.5, 1.0, 2.0]})");
    const auto configs = expand_grid(TrainConfig{}, grid);
    CHECK(configs.size() == 6);
    std::set<std::pair<double, double>> seen;
    for (const auto& c : configs) seen.insert({c.learning_rate, c.weights.l1});
    CHECK(seen.size() == 6);
    CHECK_THROWS_AS(expand_grid(TrainConfig{}, nlohmann::json::parse(R"({"nope": [1]})")), Error);
  }

  TEST_CASE("training is deterministic and selection respects history") {
    const auto& tiny = test::tiny_corpus();
    const auto notes = template_notes(tiny.corpus);
    ImageStore store(tiny.dir);
    const TrainResult a = train(tiny.corpus, notes, quick_config(), store);
    const TrainResult b = train(tiny.corpus, notes, quick_config(), store);
    CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));

    REQUIRE(a.history.size() == 3);
    CHECK(a.history[0].epoch == 0);
    CHECK(a.history[0].loss == 0.0);
    for (const auto& r : a.history) CHECK(r.val_alignment.has_value());
    for (int e = 0; e <= a.best_epoch; ++e) {
      CHECK(a.history[static_cast<std::size_t>(a.best_epoch)].val_kappa >= a.history[static_cast<std::size_t>(e)].val_kappa);
    }
    CHECK(a.checkpoint.meta["strategy"] == "M");
    CHECK(a.checkpoint.meta["epoch"] == a.best_epoch);
  }

  TEST_CASE("test records never influence the parameters") {
    // Rewire every test record to another image and label; training must be
    // byte-identical.
    const auto& tiny = test::tiny_corpus();
    std::vector<SampleRecord> recs = tiny.corpus.records();
    std::vector<std::size_t> test_rows;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      if (recs[i].split == Split::test) test_rows.push_back(i);
    }
    REQUIRE(test_rows.size() > 2);
    const std::string first_ref = recs[test_rows[0]].image_ref;
    for (std::size_t k = 0; k + 1 < test_rows.size(); ++k) {
      recs[test_rows[k]].image_ref = recs[test_rows[k + 1]].image_ref;
      recs[test_rows[k]].label = kAllLabels[(label_index(recs[test_rows[k]].label) + 1) % kNumClasses];
    }
    recs[test_rows.back()].image_ref = first_ref;
    const Corpus altered(std::move(recs));

    const auto notes = template_notes(tiny.corpus);
    ImageStore s1(tiny.dir), s2(tiny.dir);
    const auto a = train(tiny.corpus, notes, quick_config(1), s1);
    const auto b = train(altered, notes, quick_config(1), s2);
    CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));
  }

  TEST_CASE("image-only baseline") {
    const auto& tiny = test::tiny_corpus();
    ImageStore store(tiny.dir);
    const TrainResult r = train_image_only(tiny.corpus, quick_config(1), store);
    CHECK_FALSE(r.checkpoint.model->has_text());
    CHECK(r.checkpoint.meta["strategy"] == "Img");
    for (const auto& p : r.checkpoint.model->parameters()) CHECK(p.name.rfind("text", 0) != 0);
    for (const auto& h : r.history) CHECK_FALSE(h.val_alignment.has_value());
    const TrainResult again = train_image_only(tiny.corpus, quick_config(1), store);
    CHECK(serialize_checkpoint(r.checkpoint) == serialize_checkpoint(again.checkpoint));
  }

  TEST_CASE("bad training inputs") {
    const auto& tiny = test::tiny_corpus();
    ImageStore store(tiny.dir);
    auto notes = template_notes(tiny.corpus);
    const std::string dropped = notes.front().sample_id;
    auto missing = notes;
    missing.erase(missing.begin());
    try {
      train(tiny.corpus, missing, quick_config(1), store);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find(dropped) != std::string::npos);
    }
    auto mixed = notes;
    mixed.back().strategy = Strategy::P3;
    CHECK_THROWS_AS(train(tiny.corpus, mixed, quick_config(1), store), Error);
    CHECK_THROWS_AS(train(tiny.corpus, notes, quick_config(0), store), Error);

    std::vector<SampleRecord> no_val;
    for (const auto& r : tiny.corpus.records()) {
      if (r.split != Split::val) no_val.push_back(r);
    }
    CHECK_THROWS_AS(train(Corpus(no_val), notes, quick_config(1), store), Error);
  }

  TEST_CASE("history serialization") {
    EpochRecord r;
    r.epoch = 1;
    r.loss = 2.5;
    r.val_kappa = 0.4;
    r.val_alignment = 0.3;
    const auto j = history_to_json({r});
    REQUIRE(j.size() == 1);
    CHECK(j[0]["epoch"] == 1);
    CHECK(j[0]["val_alignment"] == 0.3);
  }
}
