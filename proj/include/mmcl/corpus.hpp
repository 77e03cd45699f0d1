#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mmcl/util.hpp"

namespace mmcl {

/// The five-class diagnostic taxonomy, in table order.
enum class Label : std::uint8_t { BEK = 0, NEV = 1, ACK = 2, BCC = 3, MEL = 4 };

inline constexpr int kNumClasses = 5;
inline constexpr std::array<Label, kNumClasses> kAllLabels = {Label::BEK, Label::NEV, Label::ACK,
                                                              Label::BCC, Label::MEL};

enum class Malignancy : std::uint8_t { benign, malignant };

/// Benign/malignant assignment. ACK has no stated value; it defaults to
/// malignant (grouped with BCC and MEL) and can be overridden.
struct Taxonomy {
  bool ack_malignant = true;

  Malignancy malignancy_of(Label label) const;
};

std::string_view label_code(Label label);
/// Lowercase display name used in notes, e.g. "benign nevus".
std::string_view label_name(Label label);
std::string_view malignancy_name(Malignancy m);
std::optional<Label> parse_label(std::string_view code);
inline int label_index(Label label) { return static_cast<int>(label); }

enum class Split : std::uint8_t { train, val, test };
enum class ImageType : std::uint8_t { dermoscopic, clinical };

std::string_view split_name(Split s);
std::string_view image_type_name(ImageType t);

/// Pixel rectangle, origin at the top-left corner.
struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const Rect&) const = default;
};

struct SampleRecord {
  std::string id;
  std::string image_ref;
  Label label = Label::BEK;
  std::optional<std::string> subclass;
  std::string dataset;
  Split split = Split::train;
  ImageType image_type = ImageType::dermoscopic;
  std::optional<Rect> bbox;
};

class ManifestError : public Error {
 public:
  ManifestError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

using ClassCounts = std::array<std::size_t, kNumClasses>;

/// Immutable collection of records. Sources that contribute to the train
/// split are internal; every other source is external and never trains.
class Corpus {
 public:
  Corpus() = default;
  /// Validates id uniqueness and derives the internal/external partition.
  explicit Corpus(std::vector<SampleRecord> records);

  const std::vector<SampleRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const SampleRecord& at(std::size_t i) const { return records_.at(i); }
  /// Lookup by id; nullptr when absent.
  const SampleRecord* find(std::string_view id) const;

  const std::set<std::string>& datasets() const { return datasets_; }
  const std::set<std::string>& internal_sources() const { return internal_; }
  const std::set<std::string>& external_sources() const { return external_; }
  bool is_external(std::string_view dataset) const;

  std::vector<std::size_t> indices(Split split) const;

 private:
  std::vector<SampleRecord> records_;
  std::set<std::string> datasets_;
  std::set<std::string> internal_;
  std::set<std::string> external_;
};

/// Parses a JSON-lines manifest. Errors carry the 1-based line number.
Corpus parse_manifest(std::string_view text);
Corpus load_manifest(const std::filesystem::path& path);

/// Canonical serialization; parse_manifest(serialize_manifest(c)) == c and
/// serializing a canonical file reproduces it byte for byte.
std::string serialize_record(const SampleRecord& r);
std::string serialize_manifest(const Corpus& corpus);
void save_manifest(const Corpus& corpus, const std::filesystem::path& path);

ClassCounts class_histogram(const Corpus& corpus, Split split);

struct StreamItem {
  std::size_t record_index = 0;
  /// True for oversampled repeats; these are always augmented.
  bool duplicate = false;
};

struct StreamOptions {
  /// Throw instead of skipping a taxonomy class with no train samples.
  bool strict = false;
  /// Epoch length; 0 means (#classes present) x (largest class count).
  std::size_t window = 0;
};

struct BalancedStream {
  std::vector<StreamItem> items;
  std::vector<Label> skipped_classes;
};

/// Class-balanced epoch over the train split. Each present class receives an
/// equal share of the window (remainder spread one by one in label order);
/// a class's share walks seeded permutations of its records, flagging every
/// pass after the first as duplicates. The merged schedule is then shuffled.
BalancedStream balanced_stream(const Corpus& corpus, std::uint64_t seed,
                               const StreamOptions& options = {});

}  // namespace mmcl
