#include "support.hpp"

#include <atomic>
#include <unistd.h>

namespace mmcl::test {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("mmcl-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Matrix random_matrix(int rows, int cols, Rng& rng, double scale) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

Matrix random_unit_rows(int rows, int cols, Rng& rng) {
  Matrix m = random_matrix(rows, cols, rng);
  for (int i = 0; i < rows; ++i) m.row(i).normalize();
  return m;
}

const TinyCorpus& tiny_corpus() {
  static const TinyCorpus tc = [] {
    TinyCorpus t;
    t.dir = fs::temp_directory_path() / ("mmcl-tiny-" + std::to_string(::getpid()));
    fs::remove_all(t.dir);
    DemoCounts counts;
    counts.train = {4, 4, 3, 4, 4};
    counts.val_per_class = 2;
    counts.test_internal_per_class = 2;
    counts.test_external_per_class = 1;
    t.corpus = write_demo_corpus(t.dir, 3, counts);
    t.manifest = t.dir / "manifest.jsonl";
    std::atexit([] {
      std::error_code ec;
      fs::remove_all(fs::temp_directory_path() / ("mmcl-tiny-" + std::to_string(::getpid())), ec);
    });
    return t;
  }();
  return tc;
}

}  // namespace mmcl::test
