#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmcl/losses.hpp"
#include "mmcl/model.hpp"
#include "mmcl/notegen.hpp"

namespace mmcl {

struct TrainConfig {
  int epochs = 15;
  double learning_rate = 1e-4;
  int batch_size = 8;
  std::uint64_t seed = 0;
  LossWeights weights;
  bool intra_modal_negatives = true;
  /// Chance of augmenting a first-pass sample; oversampled repeats are
  /// always augmented.
  double augment_probability = 0.5;
  ModelConfig model;

  /// Throws on any out-of-range value.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
};

struct EpochRecord {
  int epoch = 0;
  /// Mean training loss and its components over the epoch (zero at epoch 0).
  double loss = 0.0;
  LossComponents components;
  double val_kappa = 0.0;
  /// Mean paired cosine on the validation split; absent for image-only runs.
  std::optional<double> val_alignment;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Multimodal training with the composite objective. Epoch 0 records the
/// untrained model; the returned checkpoint is the epoch with the highest
/// validation image kappa (later epochs win ties).
TrainResult train(const Corpus& corpus, const std::vector<ClinicalNote>& notes, const TrainConfig& config,
                  ImageStore& store, const EpochCallback& on_epoch = {});

/// Image branch and classifier only, trained with image cross-entropy.
TrainResult train_image_only(const Corpus& corpus, const TrainConfig& config, ImageStore& store,
                             const EpochCallback& on_epoch = {});

/// Cartesian product of `grid` (key -> list of values) applied over `base`.
/// Keys name top-level config fields or "weights.<name>".
std::vector<TrainConfig> expand_grid(const TrainConfig& base, const nlohmann::json& grid);

nlohmann::ordered_json history_to_json(const std::vector<EpochRecord>& history);

}  // namespace mmcl
