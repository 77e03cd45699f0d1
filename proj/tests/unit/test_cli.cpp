#include <json.hpp>
#include <set>
#include <sstream>

#include "mmcl/cli.hpp"
#include "support.hpp"

using namespace mmcl;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2") {
    CHECK(run({}).code == 2);
    CHECK(run({"bogus"}).code == 2);
    CHECK(run({"train", "--nope"}).code == 2);
    CHECK(run({"synthesize"}).code == 2);
    CHECK(run({"evaluate", "--ckpt", "/definitely/missing", "--manifest", "/also/missing"}).code == 2);
  }

  TEST_CASE("help exits with 0") {
    const Run r = run({"--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("synthesize") != std::string::npos);
    CHECK(run({"train", "--help"}).code == 0);
  }

  TEST_CASE("synthesize demo and notes") {
    test::TempDir dir("cli-demo");
    const Run demo = run({"synthesize", "--demo", "--out", (dir / "corpus").string()});
    REQUIRE(demo.code == 0);
    CHECK(fs::exists(dir / "corpus" / "manifest.jsonl"));
    const std::string manifest = (dir / "corpus" / "manifest.jsonl").string();
    CHECK(run({"synthesize", "--strategy", "M", "--manifest", manifest, "--out", (dir / "m.jsonl").string()}).code == 0);
    CHECK(fs::file_size(dir / "m.jsonl") > 0);
    CHECK(run({"synthesize", "--strategy", "Q", "--manifest", manifest, "--out", (dir / "q.jsonl").string()}).code == 2);
    CHECK(run({"synthesize", "--strategy", "P3", "--manifest", manifest, "--out", (dir / "p.jsonl").string(),
               "--corruption", "1.5"})
              .code == 2);
  }

  TEST_CASE("end-to-end pipeline") {
    const auto& tiny = test::tiny_corpus();
    test::TempDir dir("cli-e2e");
    const std::string manifest = tiny.manifest.string();
    const std::string notes = (dir / "m.jsonl").string();
    const std::string cache = (dir / "cache").string();
    REQUIRE(run({"synthesize", "--strategy", "M", "--manifest", manifest, "--out", notes}).code == 0);
    REQUIRE(run({"preprocess", "--manifest", manifest, "--out", cache, "--notes", notes}).code == 0);
    write_file(dir / "cfg.json", R"({"epochs": 1, "learning_rate": 0.001})");

    const Run tr = run({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "m").string(),
                        "--manifest", manifest, "--notes", notes, "--cache", cache, "--seeds", "2"});
    REQUIRE(tr.code == 0);
    CHECK(fs::exists(dir / "m" / "model-seed0.ckpt"));
    CHECK(fs::exists(dir / "m" / "model-seed1.ckpt"));

    const std::string report = (dir / "m.json").string();
    const Run ev = run({"evaluate", "--ckpt", (dir / "m").string(), "--manifest", manifest, "--notes", notes,
                        "--cache", cache, "--report", report});
    REQUIRE(ev.code == 0);
    CHECK(ev.err.find("fewer than 3") != std::string::npos);
    const auto rep = nlohmann::json::parse(read_file(report));
    CHECK(rep["format"] == "mmcl-eval-report");
    CHECK(rep["strategy"] == "M");
    CHECK(rep["checkpoints"].size() == 2);
    std::set<std::string> tasks;
    for (const auto& r : rep["results"]) {
      tasks.insert(r["task"].get<std::string>());
      CHECK(r["n"] == 2);
    }
    CHECK(tasks == std::set<std::string>{"classify", "retrieve-notes", "retrieve-images", "alignment"});

    const Run img = run({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "img").string(),
                         "--manifest", manifest, "--image-only", "--cache", cache});
    REQUIRE(img.code == 0);
    const std::string img_report = (dir / "img.json").string();
    REQUIRE(run({"evaluate", "--ckpt", (dir / "img" / "model-seed0.ckpt").string(), "--manifest", manifest,
                 "--cache", cache, "--report", img_report})
                .code == 0);

    const Run cmp = run({"report", img_report, report, "--json", (dir / "cmp.json").string()});
    REQUIRE(cmp.code == 0);
    CHECK(cmp.out.find("Img") < cmp.out.find(" M"));
    CHECK(fs::exists(dir / "cmp.json"));

    const std::string index = (dir / "m.idx").string();
    REQUIRE(run({"index", "--ckpt", (dir / "m" / "model-seed0.ckpt").string(), "--manifest", manifest, "--notes",
                 notes, "--cache", cache, "--out", index})
                .code == 0);
    CHECK(fs::file_size(index) > 0);

    CHECK(run({"train", "--out", (dir / "x").string(), "--manifest", manifest}).code == 2);
    CHECK(run({"evaluate", "--ckpt", (dir / "m").string(), "--manifest", manifest, "--notes", notes, "--tasks",
               "dance"})
              .code == 2);
    CHECK(run({"evaluate", "--ckpt", (dir / "m").string(), "--manifest", manifest, "--notes", notes, "--seeds",
               "5"})
              .code == 1);
  }
}
