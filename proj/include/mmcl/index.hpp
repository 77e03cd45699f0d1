#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmcl/model.hpp"
#include "mmcl/notegen.hpp"

namespace mmcl {

struct IndexItem {
  /// "img:<sample id>" or "note:<strategy>:<sample id>".
  std::string id;
  Modality modality = Modality::image;
  std::string sample_id;
  Label label = Label::BEK;
  std::string dataset;
  std::string image_ref;
  /// Note items only.
  std::optional<Strategy> strategy;
  std::string text;
};

std::string image_item_id(std::string_view sample_id);
std::string note_item_id(Strategy strategy, std::string_view sample_id);

/// Unit-normalized shared-space vectors with their item metadata. Built once
/// and then only read.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  EmbeddingIndex(std::vector<IndexItem> items, Matrix vectors, std::string checkpoint_hash);

  std::size_t size() const { return items_.size(); }
  int dim() const { return static_cast<int>(vectors_.cols()); }
  const std::vector<IndexItem>& items() const { return items_; }
  const IndexItem& item(std::size_t i) const { return items_.at(i); }
  const Matrix& vectors() const { return vectors_; }
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }
  /// Position of an item id, or nullopt.
  std::optional<std::size_t> find(std::string_view id) const;

 private:
  std::vector<IndexItem> items_;
  Matrix vectors_;
  std::string checkpoint_hash_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
};

std::string serialize_index(const EmbeddingIndex& index);
EmbeddingIndex parse_index(std::string_view bytes);
void save_index(const EmbeddingIndex& index, const std::filesystem::path& path);
EmbeddingIndex load_index(const std::filesystem::path& path);

/// One image entry per corpus record and one entry per note. Notes must refer
/// to records of the corpus; text notes need a model with a text branch.
EmbeddingIndex build_index(const Checkpoint& ckpt, const std::string& checkpoint_hash, const Corpus& corpus,
                           ImageStore& store, const std::vector<ClinicalNote>& notes);

struct QueryHit {
  std::size_t item = 0;
  double score = 0.0;
};

struct QueryResult {
  std::vector<QueryHit> hits;
  /// Set when k exceeded the number of candidates.
  std::string warning;
};

/// Exhaustive cosine search. Scores descend; equal scores keep index order.
QueryResult query(const EmbeddingIndex& index, const Eigen::Ref<const Eigen::RowVectorXd>& vector, std::size_t k,
                  std::optional<Modality> filter = std::nullopt);

/// Encodes free text or an uploaded image with a loaded checkpoint, using the
/// same preprocessing as the training pipeline.
class QueryEncoder {
 public:
  explicit QueryEncoder(const Checkpoint& ckpt) : ckpt_(ckpt) {}
  Eigen::RowVectorXd encode_text(std::string_view text) const;
  /// Decodes PNG/JPEG bytes and applies the Otsu crop (whole-image fallback
  /// on a degenerate mask).
  Eigen::RowVectorXd encode_image(std::string_view bytes) const;

 private:
  const Checkpoint& ckpt_;
};

}  // namespace mmcl
