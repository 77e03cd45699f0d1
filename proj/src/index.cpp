#include "mmcl/index.hpp"

#include <algorithm>
#include <cstring>
#include <iostream>
#include <numeric>

namespace mmcl {

namespace {

constexpr char kIndexMagic[8] = {'M', 'M', 'C', 'L', 'I', 'N', 'D', 'X'};
constexpr std::uint32_t kIndexVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw Error("index file is truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

Eigen::RowVectorXd unit(Eigen::RowVectorXd v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw Error("cannot normalize a zero or non-finite embedding");
  return v / n;
}

}  // namespace

std::string image_item_id(std::string_view sample_id) { return "img:" + std::string(sample_id); }

std::string note_item_id(Strategy strategy, std::string_view sample_id) {
  return "note:" + std::string(strategy_code(strategy)) + ":" + std::string(sample_id);
}

EmbeddingIndex::EmbeddingIndex(std::vector<IndexItem> items, Matrix vectors, std::string checkpoint_hash)
    : items_(std::move(items)), vectors_(std::move(vectors)), checkpoint_hash_(std::move(checkpoint_hash)) {
  if (static_cast<Eigen::Index>(items_.size()) != vectors_.rows()) {
    throw Error("index holds " + std::to_string(items_.size()) + " items but " +
                std::to_string(vectors_.rows()) + " vectors");
  }
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!by_id_.emplace(items_[i].id, i).second) throw Error("duplicate index item '" + items_[i].id + "'");
    const double n = vectors_.row(static_cast<Eigen::Index>(i)).norm();
    if (std::abs(n - 1.0) > 1e-9) throw Error("index vector for '" + items_[i].id + "' is not unit length");
  }
}

std::optional<std::size_t> EmbeddingIndex::find(std::string_view id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

std::string serialize_index(const EmbeddingIndex& index) {
  nlohmann::ordered_json header;
  header["format"] = "mmcl-index";
  header["checkpoint_hash"] = index.checkpoint_hash();
  header["dim"] = index.dim();
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  for (const auto& it : index.items()) {
    nlohmann::ordered_json j;
    j["id"] = it.id;
    j["modality"] = modality_name(it.modality);
    j["sample_id"] = it.sample_id;
    j["label"] = label_code(it.label);
    j["dataset"] = it.dataset;
    j["image_ref"] = it.image_ref;
    if (it.strategy) {
      j["strategy"] = strategy_code(*it.strategy);
      j["text"] = it.text;
    }
    items.push_back(std::move(j));
  }
  header["items"] = std::move(items);
  const std::string text = header.dump();
  std::string out(kIndexMagic, sizeof(kIndexMagic));
  put<std::uint32_t>(out, kIndexVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  const Matrix& v = index.vectors();
  out.append(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(double));
  return out;
}

EmbeddingIndex parse_index(std::string_view bytes) {
  if (bytes.size() < sizeof(kIndexMagic) || std::memcmp(bytes.data(), kIndexMagic, sizeof(kIndexMagic)) != 0) {
    throw Error("not an index file");
  }
  std::size_t pos = sizeof(kIndexMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kIndexVersion) throw Error("unsupported index version " + std::to_string(version));
  const auto header_size = take<std::uint64_t>(bytes, pos);
  if (pos + header_size > bytes.size()) throw Error("index file is truncated");
  const auto header = nlohmann::json::parse(bytes.substr(pos, header_size));
  pos += header_size;

  std::vector<IndexItem> items;
  for (const auto& j : header.at("items")) {
    IndexItem it;
    it.id = j.at("id").get<std::string>();
    const auto modality = j.at("modality").get<std::string>();
    if (modality != "image" && modality != "text") throw Error("unknown modality '" + modality + "' in index");
    it.modality = modality == "image" ? Modality::image : Modality::text;
    it.sample_id = j.at("sample_id").get<std::string>();
    const auto label = parse_label(j.at("label").get<std::string>());
    if (!label) throw Error("unknown label in index item '" + it.id + "'");
    it.label = *label;
    it.dataset = j.at("dataset").get<std::string>();
    it.image_ref = j.at("image_ref").get<std::string>();
    if (j.contains("strategy")) {
      it.strategy = parse_strategy(j.at("strategy").get<std::string>());
      if (!it.strategy) throw Error("unknown strategy in index item '" + it.id + "'");
      it.text = j.at("text").get<std::string>();
    }
    items.push_back(std::move(it));
  }
  const int dim = header.at("dim").get<int>();
  const std::size_t count = items.size() * static_cast<std::size_t>(dim);
  if (bytes.size() - pos != count * sizeof(double)) throw Error("index vector block has the wrong size");
  Matrix vectors(static_cast<Eigen::Index>(items.size()), dim);
  std::memcpy(vectors.data(), bytes.data() + pos, count * sizeof(double));
  return EmbeddingIndex(std::move(items), std::move(vectors), header.at("checkpoint_hash").get<std::string>());
}

void save_index(const EmbeddingIndex& index, const std::filesystem::path& path) {
  write_file(path, serialize_index(index));
}

EmbeddingIndex load_index(const std::filesystem::path& path) { return parse_index(read_file(path)); }

EmbeddingIndex build_index(const Checkpoint& ckpt, const std::string& checkpoint_hash, const Corpus& corpus,
                           ImageStore& store, const std::vector<ClinicalNote>& notes) {
  if (!ckpt.model) throw Error("checkpoint has no model");
  if (!notes.empty() && !ckpt.model->has_text()) throw Error("notes need a checkpoint with a text branch");
  if (ckpt.model->has_text() && ckpt.vocab_hash != Tokenizer::builtin().vocab_hash()) {
    throw Error("checkpoint vocabulary does not match the tokenizer");
  }
  std::vector<IndexItem> items;
  std::vector<const ImageTensor*> images;
  for (const auto& r : corpus.records()) {
    IndexItem it;
    it.id = image_item_id(r.id);
    it.modality = Modality::image;
    it.sample_id = r.id;
    it.label = r.label;
    it.dataset = r.dataset;
    it.image_ref = r.image_ref;
    items.push_back(std::move(it));
    images.push_back(&store.get(r));
  }

  std::vector<const ClinicalNote*> sorted;
  for (const auto& n : notes) sorted.push_back(&n);
  std::stable_sort(sorted.begin(), sorted.end(), [](const ClinicalNote* a, const ClinicalNote* b) {
    if (a->strategy != b->strategy) return a->strategy < b->strategy;
    return a->sample_id < b->sample_id;
  });
  std::vector<TokenSequence> tokens;
  for (const ClinicalNote* n : sorted) {
    const SampleRecord* r = corpus.find(n->sample_id);
    if (!r) throw Error("note refers to unknown record '" + n->sample_id + "'");
    IndexItem it;
    it.id = note_item_id(n->strategy, n->sample_id);
    it.modality = Modality::text;
    it.sample_id = r->id;
    it.label = r->label;
    it.dataset = r->dataset;
    it.image_ref = r->image_ref;
    it.strategy = n->strategy;
    it.text = n->text;
    items.push_back(std::move(it));
    tokens.push_back(Tokenizer::builtin().encode(n->text));
  }

  const int dim = ckpt.model->config().shared_dim;
  Matrix vectors(static_cast<Eigen::Index>(items.size()), dim);
  if (!images.empty()) vectors.topRows(static_cast<Eigen::Index>(images.size())) = ckpt.model->embed_images(images);
  if (!tokens.empty()) vectors.bottomRows(static_cast<Eigen::Index>(tokens.size())) = ckpt.model->embed_texts(tokens);
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) vectors.row(i) = unit(vectors.row(i));
  return EmbeddingIndex(std::move(items), std::move(vectors), checkpoint_hash);
}

QueryResult query(const EmbeddingIndex& index, const Eigen::Ref<const Eigen::RowVectorXd>& vector, std::size_t k,
                  std::optional<Modality> filter) {
  if (k < 1) throw Error("k must be at least 1");
  if (vector.size() != index.dim()) {
    throw Error("query has dimension " + std::to_string(vector.size()) + ", index has " +
                std::to_string(index.dim()));
  }
  const Eigen::RowVectorXd q = unit(vector);
  std::vector<QueryHit> hits;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (filter && index.item(i).modality != *filter) continue;
    hits.push_back({i, index.vectors().row(static_cast<Eigen::Index>(i)).dot(q)});
  }
  QueryResult out;
  if (k > hits.size()) {
    out.warning = "k=" + std::to_string(k) + " exceeds the " + std::to_string(hits.size()) +
                  " candidates; returning the full ranking";
    k = hits.size();
  }
  auto by_score = [](const QueryHit& a, const QueryHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  };
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), by_score);
  hits.resize(k);
  out.hits = std::move(hits);
  return out;
}

Eigen::RowVectorXd QueryEncoder::encode_text(std::string_view text) const {
  if (!ckpt_.model->has_text()) throw Error("checkpoint has no text branch");
  if (trim(text).empty()) throw Error("query text is empty");
  const Matrix z = ckpt_.model->embed_texts({Tokenizer::builtin().encode(text)});
  return z.row(0);
}

Eigen::RowVectorXd QueryEncoder::encode_image(std::string_view bytes) const {
  const ImageTensor decoded = decode_image(bytes, "query");
  const CropResult crop = otsu_crop(decoded);
  const Matrix z = ckpt_.model->embed_images({&crop.image});
  return z.row(0);
}

}  // namespace mmcl
