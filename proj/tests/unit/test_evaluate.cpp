#include <cmath>
#include <set>

#include "mmcl/evaluate.hpp"
#include "support.hpp"

using namespace mmcl;

namespace {

Checkpoint untrained(const std::string& strategy, bool with_text = true) {
  ModelConfig cfg;
  cfg.with_text = with_text;
  Checkpoint ckpt;
  ckpt.model = std::make_shared<MultimodalModel>(cfg, 17);
  if (with_text) ckpt.meta = {{"strategy", strategy}};
  ckpt.vocab_hash = Tokenizer::builtin().vocab_hash();
  return ckpt;
}

std::vector<ClinicalNote> template_notes() {
  TemplateBackend backend;
  return synthesize(test::tiny_corpus().corpus, Strategy::M, backend, 0).notes;
}

}  // namespace

TEST_SUITE("evaluate") {
  TEST_CASE("kappa worked examples") {
    CHECK(cohen_kappa({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(0.0));
    // po = 0.75, pe = 0.5.
    CHECK(cohen_kappa({0, 0, 1, 1}, {0, 0, 0, 1}) == doctest::Approx(0.5));
    CHECK(cohen_kappa({2, 2, 2}, {2, 2, 2}) == 1.0);
    CHECK_THROWS_AS(cohen_kappa({0}, {0, 1}), Error);
    CHECK_THROWS_AS(cohen_kappa({}, {}), Error);
  }

  TEST_CASE("kappa agrees with the confusion-matrix form") {
    Rng rng(21);
    for (int trial = 0; trial < 1000; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(40));
      std::vector<int> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        a[static_cast<std::size_t>(i)] = static_cast<int>(rng.index(5));
        b[static_cast<std::size_t>(i)] = rng.bernoulli(0.6) ? a[static_cast<std::size_t>(i)] : static_cast<int>(rng.index(5));
      }
      const double expected = oracle::kappa(a, b, 5);
      if (!std::isfinite(expected)) continue;
      CHECK(cohen_kappa(a, b) == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  TEST_CASE("kappa ignores label names") {
    Rng rng(22);
    std::vector<int> a(50), b(50);
    for (std::size_t i = 0; i < 50; ++i) {
      a[i] = static_cast<int>(rng.index(4));
      b[i] = static_cast<int>(rng.index(4));
    }
    const std::vector<int> perm{3, 0, 2, 1};
    std::vector<int> pa, pb;
    for (std::size_t i = 0; i < 50; ++i) {
      pa.push_back(perm[static_cast<std::size_t>(a[i])] + 10);
      pb.push_back(perm[static_cast<std::size_t>(b[i])] + 10);
    }
    CHECK(cohen_kappa(pa, pb) == doctest::Approx(cohen_kappa(a, b)).epsilon(1e-12));
    CHECK(cohen_kappa(b, a) == doctest::Approx(cohen_kappa(a, b)).epsilon(1e-12));
  }

  TEST_CASE("average precision examples") {
    CHECK(average_precision({true, false, true}) == doctest::Approx(5.0 / 6.0));
    CHECK(average_precision({true, true, true}) == 1.0);
    CHECK(average_precision({false, false, true}) == doctest::Approx(1.0 / 3.0));
    CHECK(std::isnan(average_precision({false, false})));
  }

  TEST_CASE("mean average precision against explicit ranks") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix q = test::random_matrix(8, 6, rng), pool = test::random_matrix(20, 6, rng);
      std::vector<std::vector<bool>> rel(8, std::vector<bool>(20));
      for (auto& row : rel) {
        for (std::size_t j = 0; j < 20; ++j) row[j] = rng.bernoulli(0.3);
        row[rng.index(20)] = true;
      }
      double expected = 0.0;
      for (Eigen::Index i = 0; i < 8; ++i) {
        std::vector<double> scores(20);
        for (Eigen::Index j = 0; j < 20; ++j) {
          scores[static_cast<std::size_t>(j)] = q.row(i).dot(pool.row(j)) / (q.row(i).norm() * pool.row(j).norm());
        }
        expected += oracle::average_precision(scores, rel[static_cast<std::size_t>(i)]);
      }
      const MapResult m = mean_average_precision(q, pool, rel);
      CHECK(m.evaluated == 8);
      CHECK(m.excluded == 0);
      CHECK(m.map == doctest::Approx(expected / 8.0).epsilon(1e-12));
    }
  }

  TEST_CASE("queries without relevant items are excluded") {
    Rng rng(24);
    const Matrix q = test::random_matrix(4, 3, rng), pool = test::random_matrix(5, 3, rng);
    std::vector<std::vector<bool>> rel(4, std::vector<bool>(5, false));
    rel[0][1] = true;
    rel[2][4] = true;
    const MapResult m = mean_average_precision(q, pool, rel);
    CHECK(m.evaluated == 2);
    CHECK(m.excluded == 2);
  }

  TEST_CASE("retrieval is invariant to rescaling") {
    Rng rng(25);
    const Matrix q = test::random_matrix(6, 4, rng), pool = test::random_matrix(12, 4, rng);
    std::vector<std::vector<bool>> rel(6, std::vector<bool>(12));
    for (auto& row : rel) {
      for (std::size_t j = 0; j < 12; ++j) row[j] = rng.bernoulli(0.4);
      row[0] = true;
    }
    Matrix scaled = pool;
    for (Eigen::Index j = 0; j < scaled.rows(); ++j) scaled.row(j) *= 0.1 + 5.0 * rng.uniform();
    CHECK(mean_average_precision(q, scaled, rel).map == doctest::Approx(mean_average_precision(q, pool, rel).map).epsilon(1e-12));
    CHECK(mean_average_precision(3.0 * q, pool, rel).map == doctest::Approx(mean_average_precision(q, pool, rel).map).epsilon(1e-12));
  }

  TEST_CASE("random embeddings score at chance") {
    // Chance level estimated by shuffling the relevance labels directly.
    Rng rng(26);
    const int n = 30, relevant = 6, queries = 400;
    std::vector<bool> base(static_cast<std::size_t>(n), false);
    for (int j = 0; j < relevant; ++j) base[static_cast<std::size_t>(j)] = true;
    double chance = 0.0;
    for (int t = 0; t < 20000; ++t) {
      std::vector<bool> perm = base;
      for (std::size_t i = perm.size() - 1; i > 0; --i) {
        const std::size_t k = rng.index(i + 1);
        const bool tmp = perm[i];
        perm[i] = perm[k];
        perm[k] = tmp;
      }
      chance += average_precision(perm);
    }
    chance /= 20000.0;
    const Matrix q = test::random_unit_rows(queries, 16, rng), pool = test::random_unit_rows(n, 16, rng);
    std::vector<std::vector<bool>> rel(static_cast<std::size_t>(queries), base);
    CHECK(mean_average_precision(q, pool, rel).map == doctest::Approx(chance).epsilon(0.15));
  }

  TEST_CASE("paired cosine") {
    Rng rng(27);
    const Matrix a = test::random_matrix(5, 7, rng);
    CHECK(mean_paired_cosine(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mean_paired_cosine(a, -2.0 * a) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK_THROWS_AS(mean_paired_cosine(a, test::random_matrix(4, 7, rng)), Error);
  }

  TEST_CASE("report aggregates with the unbiased deviation") {
    const std::vector<std::vector<TaskResult>> runs{
        {{"classify", "kappa_image", "ds", "internal", 0.5, 10, 0}},
        {{"classify", "kappa_image", "ds", "internal", 0.7, 10, 0}},
        {{"classify", "kappa_image", "ds", "internal", 0.9, 10, 0}}};
    const auto report = build_report(runs, {{"strategy", "M"}});
    CHECK(report["strategy"] == "M");
    REQUIRE(report["results"].size() == 1);
    const auto& row = report["results"][0];
    CHECK(row["mean"].get<double>() == doctest::Approx(0.7));
    CHECK(row["std"].get<double>() == doctest::Approx(0.2));
    CHECK(row["n"] == 3);
    CHECK(build_report({runs[0]}, {})["results"][0]["std"] == 0.0);

    auto ragged = runs;
    ragged[1].push_back({"alignment", "cosine", "ds", "internal", 0.1, 10, 0});
    CHECK_THROWS_AS(build_report(ragged, {}), Error);
    CHECK_THROWS_AS(build_report({}, {}), Error);
  }

  TEST_CASE("evaluator reports every dataset once per metric") {
    const auto& tiny = test::tiny_corpus();
    ImageStore store(tiny.dir);
    const Checkpoint ckpt = untrained("M");
    const auto notes = template_notes();
    Evaluator ev(tiny.corpus, store, ckpt, notes);
    std::set<std::string> datasets;
    for (std::size_t i : tiny.corpus.indices(Split::test)) datasets.insert(tiny.corpus.at(i).dataset);
    for (Task t : kAllTasks) {
      const auto results = ev.run(t);
      std::set<std::string> keys;
      for (const auto& r : results) {
        CHECK(r.task == task_name(t));
        CHECK(datasets.count(r.dataset) == 1);
        CHECK(keys.insert(r.metric + "/" + r.dataset).second);
        CHECK((r.partition == "internal" || r.partition == "external"));
        CHECK(std::isfinite(r.value));
      }
      const std::size_t metrics = t == Task::classify ? 2 : 1;
      CHECK(results.size() == metrics * datasets.size());
    }
  }

  TEST_CASE("pair relevance keeps every query") {
    const auto& tiny = test::tiny_corpus();
    ImageStore store(tiny.dir);
    const Checkpoint ckpt = untrained("M");
    const auto notes = template_notes();
    Evaluator ev(tiny.corpus, store, ckpt, notes, Relevance::exact_pair);
    for (const auto& r : ev.run(Task::retrieve_images)) {
      CHECK(r.excluded == 0);
      CHECK(r.value > 0.0);
      CHECK(r.value <= 1.0);
    }
    CHECK(parse_relevance("pair") == Relevance::exact_pair);
    CHECK(parse_relevance("class") == Relevance::class_level);
    CHECK_FALSE(parse_relevance("exact"));
  }

  TEST_CASE("evaluator input errors") {
    const auto& tiny = test::tiny_corpus();
    ImageStore store(tiny.dir);
    auto notes = template_notes();

    const Checkpoint p3 = untrained("P3");
    Evaluator mismatch(tiny.corpus, store, p3, notes);
    CHECK_THROWS_AS(mismatch.run(Task::retrieve_images), Error);
    CHECK_THROWS_AS(mismatch.run(Task::alignment), Error);

    const std::string test_id = tiny.corpus.at(tiny.corpus.indices(Split::test).front()).id;
    std::vector<ClinicalNote> partial;
    for (const auto& n : notes) {
      if (n.sample_id != test_id) partial.push_back(n);
    }
    const Checkpoint m = untrained("M");
    Evaluator missing(tiny.corpus, store, m, partial);
    try {
      missing.run(Task::alignment);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find(test_id) != std::string::npos);
    }

    auto dup = notes;
    dup.push_back(notes.front());
    CHECK_THROWS_AS(Evaluator(tiny.corpus, store, m, dup), Error);

    const Checkpoint img = untrained("Img", false);
    Evaluator image_only(tiny.corpus, store, img, {});
    CHECK(image_only.run(Task::classify).size() >= 1);
    CHECK_THROWS_AS(image_only.run(Task::retrieve_notes), Error);
  }
}
