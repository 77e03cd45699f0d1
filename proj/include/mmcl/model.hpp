#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmcl/corpus.hpp"
#include "mmcl/nn.hpp"
#include "mmcl/preprocess.hpp"
#include "mmcl/tokenizer.hpp"

namespace mmcl {

using Matrix = nn::RowMatrix;

enum class Modality : std::uint8_t { image, text };
std::string_view modality_name(Modality m);

/// Maps a modality's input to a fixed-length feature vector per sample.
class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual std::string kind() const = 0;
  virtual int output_dim() const = 0;
  /// [N, 3, 224, 224] -> [N, output_dim]. Training mode normalizes with
  /// batch statistics and updates the running buffers.
  virtual nn::Var forward(const nn::Var& images, bool training) const = 0;
  virtual nn::ParameterList parameters() const = 0;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::string kind() const = 0;
  virtual int output_dim() const = 0;
  /// One row per sequence, read at each sequence's summary position.
  virtual nn::Var forward(const std::vector<TokenSequence>& batch, bool training) const = 0;
  virtual nn::ParameterList parameters() const = 0;
};

struct ConvNetConfig {
  std::vector<int> channels{8, 16, 32, 64};
};

/// Four conv blocks (3x3 conv + ReLU, 2x2 max-pool after the first three;
/// the first conv has stride 2), global average pooling, then batch norm.
class SmallConvNet final : public ImageEncoder {
 public:
  SmallConvNet(ConvNetConfig config, Rng& rng);
  std::string kind() const override { return "small_cnn"; }
  int output_dim() const override { return config_.channels.back(); }
  nn::Var forward(const nn::Var& images, bool training) const override;
  nn::ParameterList parameters() const override;

 private:
  ConvNetConfig config_;
  std::vector<nn::Var> weights_, biases_;
  nn::Var norm_g_, norm_b_, norm_mean_, norm_var_;
};

struct TransformerConfig {
  int vocab_size = 0;
  int max_length = static_cast<int>(kMaxSequenceLength);
  int width = 64;
  int heads = 4;
  int ffn = 128;
  int layers = 2;
};

/// Pre-norm transformer encoder; the output is the final hidden state at the
/// summary position, batch normalized. Padding positions are masked out of
/// attention.
class SmallTransformer final : public TextEncoder {
 public:
  SmallTransformer(TransformerConfig config, Rng& rng, std::int32_t pad_id);
  std::string kind() const override { return "small_transformer"; }
  int output_dim() const override { return config_.width; }
  nn::Var forward(const std::vector<TokenSequence>& batch, bool training) const override;
  nn::ParameterList parameters() const override;

 private:
  struct Layer {
    nn::Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  TransformerConfig config_;
  std::int32_t pad_id_;
  nn::Var token_embedding_, position_embedding_, final_g_, final_b_;
  nn::Var norm_g_, norm_b_, norm_mean_, norm_var_;
  std::vector<Layer> layers_;
};

/// Affine map, tanh, then projection onto the unit sphere.
class ProjectionHead {
 public:
  ProjectionHead(int input_dim, int shared_dim, Rng& rng, const std::string& prefix);
  nn::Var forward(const nn::Var& features) const;
  nn::ParameterList parameters() const;
  int input_dim() const { return input_dim_; }
  int shared_dim() const { return shared_dim_; }

 private:
  int input_dim_, shared_dim_;
  std::string prefix_;
  nn::Var w_, b_;
};

/// Single linear map shared by both modalities.
class SharedClassifier {
 public:
  SharedClassifier(int shared_dim, std::uint64_t seed);
  nn::Var forward(const nn::Var& z) const;
  /// Scores for one embedding; throws on a dimension mismatch.
  std::vector<double> classify(const std::vector<double>& z) const;
  nn::ParameterList parameters() const;
  const nn::Var& weight() const { return w_; }
  const nn::Var& bias() const { return b_; }

 private:
  int shared_dim_;
  nn::Var w_, b_;
};

struct ModelConfig {
  int shared_dim = 128;
  std::string image_encoder = "small_cnn";
  std::string text_encoder = "small_transformer";
  /// Image-only models have no text encoder or text head.
  bool with_text = true;
};

/// Checks the [N, 224, 224, 3] uint8 layout and converts to a normalized
/// [N, 3, 224, 224] tensor.
nn::Tensor images_to_tensor(const std::vector<const ImageTensor*>& images);

class MultimodalModel {
 public:
  MultimodalModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  bool has_text() const { return static_cast<bool>(text_encoder_); }

  /// `training` selects batch statistics in the normalization layers.
  nn::Var encode_images(const std::vector<const ImageTensor*>& images, bool training = false) const;
  nn::Var encode_texts(const std::vector<TokenSequence>& tokens, bool training = false) const;
  nn::Var classify(const nn::Var& z) const { return classifier_.forward(z); }

  /// Inference helpers; no graph is recorded.
  Matrix embed_images(const std::vector<const ImageTensor*>& images, std::size_t batch = 32) const;
  Matrix embed_texts(const std::vector<TokenSequence>& tokens, std::size_t batch = 32) const;
  Matrix scores(const Matrix& z) const;

  /// Every parameter and normalization buffer, in a stable order with
  /// unique names. Buffers never require gradients.
  nn::ParameterList parameters() const;
  const SharedClassifier& classifier() const { return classifier_; }
  const ImageEncoder& image_encoder() const { return *image_encoder_; }
  const TextEncoder* text_encoder() const { return text_encoder_.get(); }

 private:
  ModelConfig config_;
  std::unique_ptr<ImageEncoder> image_encoder_;
  std::unique_ptr<TextEncoder> text_encoder_;
  std::unique_ptr<ProjectionHead> image_head_, text_head_;
  SharedClassifier classifier_;
};

/// Versioned binary container: magic, version, JSON header, raw parameters.
struct Checkpoint {
  std::shared_ptr<MultimodalModel> model;
  /// Free-form metadata stored with the parameters (config echo, epoch,
  /// validation history, strategy).
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::string vocab_hash;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// SHA-256 of the checkpoint file.
std::string checkpoint_hash(const std::filesystem::path& path);

}  // namespace mmcl
