#pragma once

#include <doctest.h>

#include <filesystem>
#include <functional>
#include <string>

#include "mmcl/demo.hpp"
#include "mmcl/losses.hpp"
#include "mmcl/util.hpp"
#include "oracles.hpp"

namespace mmcl::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0);
/// Rows normalized to unit length.
Matrix random_unit_rows(int rows, int cols, Rng& rng);

using oracle::max_relative_error;
using oracle::numeric_gradient;

/// Small demo corpus shared by the model/train/evaluate/index tests; written
/// once per process.
struct TinyCorpus {
  std::filesystem::path dir;
  std::filesystem::path manifest;
  Corpus corpus;
};
const TinyCorpus& tiny_corpus();

}  // namespace mmcl::test
