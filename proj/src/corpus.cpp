#include "mmcl/corpus.hpp"

#include <algorithm>
#include <map>
#include <json.hpp>
#include <unordered_set>

namespace mmcl {

using ordered_json = nlohmann::ordered_json;

Malignancy Taxonomy::malignancy_of(Label label) const {
  switch (label) {
    case Label::BEK:
    case Label::NEV:
      return Malignancy::benign;
    case Label::ACK:
      return ack_malignant ? Malignancy::malignant : Malignancy::benign;
    case Label::BCC:
    case Label::MEL:
      return Malignancy::malignant;
  }
  return Malignancy::malignant;
}

std::string_view label_code(Label label) {
  static constexpr std::array<std::string_view, kNumClasses> kCodes = {"BEK", "NEV", "ACK", "BCC",
                                                                       "MEL"};
  return kCodes[label_index(label)];
}

std::string_view label_name(Label label) {
  static constexpr std::array<std::string_view, kNumClasses> kNames = {
      "benign keratosis", "benign nevus", "actinic keratosis", "basal-cell cancer", "melanoma"};
  return kNames[label_index(label)];
}

std::string_view malignancy_name(Malignancy m) {
  return m == Malignancy::benign ? "benign" : "malignant";
}

std::optional<Label> parse_label(std::string_view code) {
  for (Label l : kAllLabels) {
    if (label_code(l) == code) return l;
  }
  return std::nullopt;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "train";
}

std::string_view image_type_name(ImageType t) {
  return t == ImageType::dermoscopic ? "dermoscopic" : "clinical";
}

ManifestError::ManifestError(std::size_t line, const std::string& what)
    : Error("manifest line " + std::to_string(line) + ": " + what), line_(line) {}

Corpus::Corpus(std::vector<SampleRecord> records) : records_(std::move(records)) {
  std::unordered_set<std::string> seen;
  for (const auto& r : records_) {
    if (r.id.empty()) throw Error("record with empty id");
    if (!seen.insert(r.id).second) throw Error("duplicate id \"" + r.id + "\"");
    datasets_.insert(r.dataset);
    if (r.split == Split::train) internal_.insert(r.dataset);
  }
  for (const auto& d : datasets_) {
    if (!internal_.contains(d)) external_.insert(d);
  }
}

const SampleRecord* Corpus::find(std::string_view id) const {
  for (const auto& r : records_) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

bool Corpus::is_external(std::string_view dataset) const {
  return external_.contains(std::string(dataset));
}

std::vector<std::size_t> Corpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].split == split) out.push_back(i);
  }
  return out;
}

namespace {

std::string require_string(const ordered_json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw ManifestError(line, std::string("missing or non-string field \"") + key + "\"");
  }
  return it->get<std::string>();
}

SampleRecord parse_record(const ordered_json& j, std::size_t line) {
  if (!j.is_object()) throw ManifestError(line, "record is not an object");
  SampleRecord r;
  r.id = require_string(j, "id", line);
  if (r.id.empty()) throw ManifestError(line, "empty id");
  r.image_ref = require_string(j, "image_ref", line);

  const auto code = require_string(j, "label", line);
  auto label = parse_label(code);
  if (!label) throw ManifestError(line, "unknown label \"" + code + "\"");
  r.label = *label;

  if (auto it = j.find("subclass"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ManifestError(line, "subclass must be a string");
    auto s = it->get<std::string>();
    if (!s.empty()) r.subclass = std::move(s);
  }
  r.dataset = require_string(j, "dataset", line);
  if (r.dataset.empty()) throw ManifestError(line, "empty dataset");

  const auto split = require_string(j, "split", line);
  if (split == "train") {
    r.split = Split::train;
  } else if (split == "val") {
    r.split = Split::val;
  } else if (split == "test") {
    r.split = Split::test;
  } else {
    throw ManifestError(line, "unknown split \"" + split + "\"");
  }

  const auto type = require_string(j, "image_type", line);
  if (type == "dermoscopic") {
    r.image_type = ImageType::dermoscopic;
  } else if (type == "clinical") {
    r.image_type = ImageType::clinical;
  } else {
    throw ManifestError(line, "unknown image_type \"" + type + "\"");
  }

  if (auto it = j.find("bbox"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw ManifestError(line, "bbox must be an array");
    if (!it->empty()) {
      if (it->size() != 4) throw ManifestError(line, "bbox needs 4 integers [x, y, w, h]");
      for (const auto& v : *it) {
        if (!v.is_number_integer()) throw ManifestError(line, "bbox entries must be integers");
      }
      Rect b{(*it)[0].get<int>(), (*it)[1].get<int>(), (*it)[2].get<int>(), (*it)[3].get<int>()};
      if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0) {
        throw ManifestError(line, "bbox must have non-negative origin and positive size");
      }
      r.bbox = b;
    }
  }
  return r;
}

}  // namespace

Corpus parse_manifest(std::string_view text) {
  std::vector<SampleRecord> records;
  std::map<std::string, std::size_t> first_line;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestError(line_no, std::string("parse error: ") + e.what());
    }
    auto rec = parse_record(j, line_no);
    auto [it, inserted] = first_line.emplace(rec.id, line_no);
    if (!inserted) {
      throw ManifestError(line_no, "duplicate id \"" + rec.id + "\" (first seen on line " +
                                       std::to_string(it->second) + ")");
    }
    records.push_back(std::move(rec));
  }
  return Corpus(std::move(records));
}

Corpus load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file(path));
}

std::string serialize_record(const SampleRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["image_ref"] = r.image_ref;
  j["label"] = label_code(r.label);
  j["subclass"] = r.subclass.value_or("");
  j["dataset"] = r.dataset;
  j["split"] = split_name(r.split);
  j["image_type"] = image_type_name(r.image_type);
  j["bbox"] = r.bbox ? ordered_json::array({r.bbox->x, r.bbox->y, r.bbox->w, r.bbox->h})
                     : ordered_json::array();
  return j.dump();
}

std::string serialize_manifest(const Corpus& corpus) {
  std::string out;
  for (const auto& r : corpus.records()) {
    out += serialize_record(r);
    out += '\n';
  }
  return out;
}

void save_manifest(const Corpus& corpus, const std::filesystem::path& path) {
  write_file(path, serialize_manifest(corpus));
}

ClassCounts class_histogram(const Corpus& corpus, Split split) {
  ClassCounts counts{};
  for (const auto& r : corpus.records()) {
    if (r.split == split) ++counts[label_index(r.label)];
  }
  return counts;
}

BalancedStream balanced_stream(const Corpus& corpus, std::uint64_t seed,
                               const StreamOptions& options) {
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i : corpus.indices(Split::train)) {
    by_class[label_index(corpus.at(i).label)].push_back(i);
  }

  BalancedStream out;
  std::vector<Label> present;
  std::size_t largest = 0;
  for (Label l : kAllLabels) {
    const auto n = by_class[label_index(l)].size();
    if (n == 0) {
      if (options.strict) {
        throw Error("class " + std::string(label_code(l)) + " has no train samples");
      }
      out.skipped_classes.push_back(l);
      continue;
    }
    present.push_back(l);
    largest = std::max(largest, n);
  }
  if (present.empty()) throw Error("balanced_stream: train split is empty");

  const std::size_t window = options.window ? options.window : present.size() * largest;
  const std::size_t base = window / present.size();
  const std::size_t extra = window % present.size();

  Rng rng(derive_seed(seed, "balanced_stream"));
  for (std::size_t c = 0; c < present.size(); ++c) {
    const auto& pool = by_class[label_index(present[c])];
    const std::size_t quota = base + (c < extra ? 1 : 0);
    std::size_t emitted = 0;
    bool first_pass = true;
    while (emitted < quota) {
      auto order = pool;
      rng.shuffle(order);
      for (std::size_t k = 0; k < order.size() && emitted < quota; ++k, ++emitted) {
        out.items.push_back({order[k], !first_pass});
      }
      first_pass = false;
    }
  }
  rng.shuffle(out.items);
  return out;
}

}  // namespace mmcl
