#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmcl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed command-line input; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

std::string sha256_hex(std::string_view bytes);

/// First 8 bytes of SHA-256, big-endian. Stable across platforms and runs.
std::uint64_t stable_hash64(std::string_view bytes);

/// Per-item seed derived from a global seed and a key (e.g. a sample id), so
/// results never depend on iteration order or worker count.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view key);

std::string base64_encode(std::string_view bytes);

/// Thin wrapper over mt19937_64 with platform-independent conversions.
/// std:: distributions are implementation-defined, so they are avoided.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::string read_file(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames, so an interrupted run never
/// leaves a half-written artifact behind.
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
bool contains(std::string_view haystack, std::string_view needle);

/// Joins items with a separator.
template <typename Range>
std::string join(const Range& items, std::string_view sep) {
  std::string out;
  bool first = true;
  for (const auto& item : items) {
    if (!first) out += sep;
    out += item;
    first = false;
  }
  return out;
}

}  // namespace mmcl
