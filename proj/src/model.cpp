#include "mmcl/model.hpp"

#include <cmath>
#include <cstring>

namespace mmcl {

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'M', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

nn::Var zeros(std::vector<int> shape) { return nn::parameter(nn::Tensor(std::move(shape), 0.0)); }
nn::Var ones(std::vector<int> shape) { return nn::parameter(nn::Tensor(std::move(shape), 1.0)); }
nn::Var buffer(int n, double fill) { return nn::constant(nn::Tensor({n}, fill)); }

nn::Var linear_weight(int in, int out, Rng& rng) {
  return nn::parameter(nn::uniform_init({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

void append(nn::ParameterList& out, const nn::ParameterList& more) {
  out.insert(out.end(), more.begin(), more.end());
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw Error("checkpoint is truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string_view modality_name(Modality m) { return m == Modality::image ? "image" : "text"; }

SmallConvNet::SmallConvNet(ConvNetConfig config, Rng& rng) : config_(std::move(config)) {
  if (config_.channels.size() != 4) throw Error("small_cnn expects four channel widths");
  int in = 3;
  for (int out : config_.channels) {
    weights_.push_back(nn::parameter(nn::kaiming_uniform({out, in, 3, 3}, in * 9, rng)));
    biases_.push_back(zeros({out}));
    in = out;
  }
  norm_g_ = ones({in});
  norm_b_ = zeros({in});
  norm_mean_ = buffer(in, 0.0);
  norm_var_ = buffer(in, 1.0);
}

nn::Var SmallConvNet::forward(const nn::Var& images, bool training) const {
  nn::Var x = images;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    x = nn::relu(nn::conv2d(x, weights_[i], biases_[i], i == 0 ? 2 : 1, 1));
    if (i + 1 < weights_.size()) x = nn::max_pool2d(x, 2);
  }
  return nn::batch_norm(nn::global_avg_pool(x), norm_g_, norm_b_, norm_mean_, norm_var_, training);
}

nn::ParameterList SmallConvNet::parameters() const {
  nn::ParameterList out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back({"image.conv" + std::to_string(i) + ".weight", weights_[i]});
    out.push_back({"image.conv" + std::to_string(i) + ".bias", biases_[i]});
  }
  out.push_back({"image.norm.gamma", norm_g_});
  out.push_back({"image.norm.beta", norm_b_});
  out.push_back({"image.norm.running_mean", norm_mean_});
  out.push_back({"image.norm.running_var", norm_var_});
  return out;
}

SmallTransformer::SmallTransformer(TransformerConfig config, Rng& rng, std::int32_t pad_id)
    : config_(config), pad_id_(pad_id) {
  if (config_.vocab_size <= 0) throw Error("transformer needs a vocabulary");
  if (config_.width % config_.heads != 0) throw Error("transformer width must divide into heads");
  const int d = config_.width;
  token_embedding_ = nn::parameter(nn::normal_init({config_.vocab_size, d}, 1.0, rng));
  position_embedding_ = nn::parameter(nn::normal_init({config_.max_length, d}, 0.1, rng));
  for (int l = 0; l < config_.layers; ++l) {
    Layer layer;
    layer.ln1_g = ones({d});
    layer.ln1_b = zeros({d});
    layer.wq = linear_weight(d, d, rng);
    layer.bq = zeros({d});
    layer.wk = linear_weight(d, d, rng);
    layer.bk = zeros({d});
    layer.wv = linear_weight(d, d, rng);
    layer.bv = zeros({d});
    layer.wo = linear_weight(d, d, rng);
    layer.bo = zeros({d});
    layer.ln2_g = ones({d});
    layer.ln2_b = zeros({d});
    layer.w1 = linear_weight(d, config_.ffn, rng);
    layer.b1 = zeros({config_.ffn});
    layer.w2 = linear_weight(config_.ffn, d, rng);
    layer.b2 = zeros({d});
    layers_.push_back(std::move(layer));
  }
  final_g_ = ones({d});
  final_b_ = zeros({d});
  norm_g_ = ones({d});
  norm_b_ = zeros({d});
  norm_mean_ = buffer(d, 0.0);
  norm_var_ = buffer(d, 1.0);
}

nn::Var SmallTransformer::forward(const std::vector<TokenSequence>& batch, bool training) const {
  if (batch.empty()) throw Error("empty text batch");
  std::size_t length = 0;
  const std::size_t summary = batch.front().summary_position;
  for (const auto& seq : batch) {
    if (seq.ids.empty()) throw Error("empty token sequence");
    if (seq.summary_position != summary) throw Error("summary positions differ within a batch");
    length = std::max(length, seq.ids.size());
  }
  if (length > static_cast<std::size_t>(config_.max_length)) throw Error("token sequence too long");
  const int n = static_cast<int>(batch.size()), l = static_cast<int>(length);
  std::vector<std::int32_t> ids(static_cast<std::size_t>(n) * l, pad_id_);
  std::vector<std::uint8_t> mask(ids.size(), 0);
  for (int i = 0; i < n; ++i) {
    const auto& seq = batch[static_cast<std::size_t>(i)].ids;
    std::copy(seq.begin(), seq.end(), ids.begin() + static_cast<std::ptrdiff_t>(i) * l);
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(i) * l, seq.size(), 1);
  }

  nn::Var x = nn::add_positional(nn::embedding(ids, n, l, token_embedding_), position_embedding_);
  for (const auto& layer : layers_) {
    nn::Var h = nn::layer_norm(x, layer.ln1_g, layer.ln1_b);
    nn::Var a = nn::attention(nn::linear(h, layer.wq, layer.bq), nn::linear(h, layer.wk, layer.bk),
                              nn::linear(h, layer.wv, layer.bv), mask, config_.heads);
    x = nn::add(x, nn::linear(a, layer.wo, layer.bo));
    h = nn::layer_norm(x, layer.ln2_g, layer.ln2_b);
    h = nn::linear(nn::gelu(nn::linear(h, layer.w1, layer.b1)), layer.w2, layer.b2);
    x = nn::add(x, h);
  }
  x = nn::layer_norm(x, final_g_, final_b_);
  return nn::batch_norm(nn::select_position(x, static_cast<int>(summary)), norm_g_, norm_b_, norm_mean_, norm_var_,
                        training);
}

nn::ParameterList SmallTransformer::parameters() const {
  nn::ParameterList out{{"text.token_embedding", token_embedding_},
                        {"text.position_embedding", position_embedding_}};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& L = layers_[i];
    const std::string p = "text.layer" + std::to_string(i) + ".";
    out.insert(out.end(), {{p + "ln1.gamma", L.ln1_g}, {p + "ln1.beta", L.ln1_b},
                           {p + "q.weight", L.wq},     {p + "q.bias", L.bq},
                           {p + "k.weight", L.wk},     {p + "k.bias", L.bk},
                           {p + "v.weight", L.wv},     {p + "v.bias", L.bv},
                           {p + "o.weight", L.wo},     {p + "o.bias", L.bo},
                           {p + "ln2.gamma", L.ln2_g}, {p + "ln2.beta", L.ln2_b},
                           {p + "ffn1.weight", L.w1},  {p + "ffn1.bias", L.b1},
                           {p + "ffn2.weight", L.w2},  {p + "ffn2.bias", L.b2}});
  }
  out.push_back({"text.final_ln.gamma", final_g_});
  out.push_back({"text.final_ln.beta", final_b_});
  out.push_back({"text.norm.gamma", norm_g_});
  out.push_back({"text.norm.beta", norm_b_});
  out.push_back({"text.norm.running_mean", norm_mean_});
  out.push_back({"text.norm.running_var", norm_var_});
  return out;
}

ProjectionHead::ProjectionHead(int input_dim, int shared_dim, Rng& rng, const std::string& prefix)
    : input_dim_(input_dim), shared_dim_(shared_dim), prefix_(prefix) {
  if (input_dim <= 0 || shared_dim <= 0) throw Error("projection dimensions must be positive");
  w_ = linear_weight(input_dim, shared_dim, rng);
  b_ = zeros({shared_dim});
}

nn::Var ProjectionHead::forward(const nn::Var& features) const {
  return nn::l2_normalize_rows(nn::tanh(nn::linear(features, w_, b_)));
}

nn::ParameterList ProjectionHead::parameters() const {
  return {{prefix_ + ".weight", w_}, {prefix_ + ".bias", b_}};
}

SharedClassifier::SharedClassifier(int shared_dim, std::uint64_t seed) : shared_dim_(shared_dim) {
  Rng rng(seed);
  w_ = linear_weight(shared_dim, kNumClasses, rng);
  b_ = zeros({kNumClasses});
}

nn::Var SharedClassifier::forward(const nn::Var& z) const { return nn::linear(z, w_, b_); }

std::vector<double> SharedClassifier::classify(const std::vector<double>& z) const {
  if (z.size() != static_cast<std::size_t>(shared_dim_)) {
    throw Error("classify: embedding has " + std::to_string(z.size()) + " dims, expected " +
                std::to_string(shared_dim_));
  }
  nn::NoGradGuard guard;
  nn::Var out = forward(nn::constant(nn::Tensor({1, shared_dim_}, z)));
  const auto& d = out.value().data;
  return {d.begin(), d.end()};
}

nn::ParameterList SharedClassifier::parameters() const {
  return {{"classifier.weight", w_}, {"classifier.bias", b_}};
}

nn::Tensor images_to_tensor(const std::vector<const ImageTensor*>& images) {
  if (images.empty()) throw Error("empty image batch");
  const int n = static_cast<int>(images.size());
  constexpr int s = kImageSize;
  nn::Tensor t({n, 3, s, s});
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (int i = 0; i < n; ++i) {
    const ImageTensor& img = *images[static_cast<std::size_t>(i)];
    if (img.height != s || img.width != s || img.pixels.size() != plane * 3) {
      throw Error("image '" + img.sample_id + "' is " + std::to_string(img.height) + "x" +
                  std::to_string(img.width) + ", expected " + std::to_string(s) + "x" +
                  std::to_string(s) + "x3");
    }
    double* dst = t.data.data() + static_cast<std::size_t>(i) * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) {
        dst[c * plane + p] = (img.pixels[p * 3 + static_cast<std::size_t>(c)] / 255.0 - 0.5) / 0.25;
      }
    }
  }
  return t;
}

MultimodalModel::MultimodalModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), classifier_(config_.shared_dim, derive_seed(seed, "init:classifier")) {
  if (config_.image_encoder != "small_cnn") {
    throw Error("unknown image encoder '" + config_.image_encoder + "'");
  }
  Rng image_rng(derive_seed(seed, "init:image"));
  image_encoder_ = std::make_unique<SmallConvNet>(ConvNetConfig{}, image_rng);
  Rng image_head_rng(derive_seed(seed, "init:image_head"));
  image_head_ = std::make_unique<ProjectionHead>(image_encoder_->output_dim(), config_.shared_dim,
                                                 image_head_rng, "image_head");
  if (config_.with_text) {
    if (config_.text_encoder != "small_transformer") {
      throw Error("unknown text encoder '" + config_.text_encoder + "'");
    }
    const Tokenizer& tok = Tokenizer::builtin();
    TransformerConfig tc;
    tc.vocab_size = static_cast<int>(tok.vocab_size());
    Rng text_rng(derive_seed(seed, "init:text"));
    text_encoder_ = std::make_unique<SmallTransformer>(tc, text_rng, tok.pad_id());
    Rng text_head_rng(derive_seed(seed, "init:text_head"));
    text_head_ = std::make_unique<ProjectionHead>(text_encoder_->output_dim(), config_.shared_dim,
                                                  text_head_rng, "text_head");
  }
}

nn::Var MultimodalModel::encode_images(const std::vector<const ImageTensor*>& images, bool training) const {
  return image_head_->forward(image_encoder_->forward(nn::constant(images_to_tensor(images)), training));
}

nn::Var MultimodalModel::encode_texts(const std::vector<TokenSequence>& tokens, bool training) const {
  if (!text_encoder_) throw Error("model has no text branch");
  return text_head_->forward(text_encoder_->forward(tokens, training));
}

Matrix MultimodalModel::embed_images(const std::vector<const ImageTensor*>& images,
                                     std::size_t batch) const {
  nn::NoGradGuard guard;
  Matrix out(static_cast<Eigen::Index>(images.size()), config_.shared_dim);
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    std::vector<const ImageTensor*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                          images.begin() + static_cast<std::ptrdiff_t>(end));
    nn::Var z = encode_images(chunk);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
        z.value().mat(static_cast<int>(end - start), config_.shared_dim);
  }
  return out;
}

Matrix MultimodalModel::embed_texts(const std::vector<TokenSequence>& tokens, std::size_t batch) const {
  nn::NoGradGuard guard;
  Matrix out(static_cast<Eigen::Index>(tokens.size()), config_.shared_dim);
  for (std::size_t start = 0; start < tokens.size(); start += batch) {
    const std::size_t end = std::min(tokens.size(), start + batch);
    std::vector<TokenSequence> chunk(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                     tokens.begin() + static_cast<std::ptrdiff_t>(end));
    nn::Var z = encode_texts(chunk);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
        z.value().mat(static_cast<int>(end - start), config_.shared_dim);
  }
  return out;
}

Matrix MultimodalModel::scores(const Matrix& z) const {
  if (z.cols() != config_.shared_dim) throw Error("classify: embedding dimension mismatch");
  nn::NoGradGuard guard;
  const int n = static_cast<int>(z.rows());
  std::vector<double> data(z.data(), z.data() + z.size());
  nn::Var s = classifier_.forward(nn::constant(nn::Tensor({n, config_.shared_dim}, std::move(data))));
  return s.value().mat(n, kNumClasses);
}

nn::ParameterList MultimodalModel::parameters() const {
  nn::ParameterList out = image_encoder_->parameters();
  append(out, image_head_->parameters());
  if (text_encoder_) {
    append(out, text_encoder_->parameters());
    append(out, text_head_->parameters());
  }
  append(out, classifier_.parameters());
  return out;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.model) throw Error("checkpoint has no model");
  const auto& cfg = ckpt.model->config();
  nlohmann::ordered_json header;
  header["format"] = "mmcl-checkpoint";
  header["model"] = {{"shared_dim", cfg.shared_dim},
                     {"image_encoder", cfg.image_encoder},
                     {"text_encoder", cfg.with_text ? cfg.text_encoder : ""},
                     {"with_text", cfg.with_text}};
  header["vocab_hash"] = ckpt.vocab_hash;
  header["meta"] = ckpt.meta;
  auto params = ckpt.model->parameters();
  nlohmann::ordered_json plist = nlohmann::ordered_json::array();
  for (const auto& p : params) plist.push_back({{"name", p.name}, {"shape", p.var.shape()}});
  header["parameters"] = plist;

  const std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& p : params) {
    const auto& d = p.var.value().data;
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw Error("not a checkpoint file");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto header_size = take<std::uint64_t>(bytes, pos);
  if (pos + header_size > bytes.size()) throw Error("checkpoint is truncated");
  const auto header = nlohmann::ordered_json::parse(bytes.substr(pos, header_size));
  pos += header_size;

  ModelConfig cfg;
  cfg.shared_dim = header.at("model").at("shared_dim").get<int>();
  cfg.image_encoder = header.at("model").at("image_encoder").get<std::string>();
  cfg.with_text = header.at("model").at("with_text").get<bool>();
  if (cfg.with_text) cfg.text_encoder = header.at("model").at("text_encoder").get<std::string>();

  Checkpoint ckpt;
  ckpt.vocab_hash = header.at("vocab_hash").get<std::string>();
  ckpt.meta = header.at("meta");
  if (cfg.with_text && ckpt.vocab_hash != Tokenizer::builtin().vocab_hash()) {
    throw Error("checkpoint was trained with a different vocabulary (hash " + ckpt.vocab_hash + ")");
  }
  ckpt.model = std::make_shared<MultimodalModel>(cfg, 0);
  auto params = ckpt.model->parameters();
  const auto& plist = header.at("parameters");
  if (plist.size() != params.size()) {
    throw Error("checkpoint holds " + std::to_string(plist.size()) + " parameters, model expects " +
                std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (plist[i].at("name").get<std::string>() != p.name ||
        plist[i].at("shape").get<std::vector<int>>() != p.var.shape()) {
      throw Error("checkpoint parameter '" + plist[i].at("name").get<std::string>() +
                  "' does not match the encoder layout");
    }
    auto& d = p.var.mutable_value().data;
    const std::size_t n = d.size() * sizeof(double);
    if (pos + n > bytes.size()) throw Error("checkpoint is truncated");
    std::memcpy(d.data(), bytes.data() + pos, n);
    pos += n;
  }
  if (pos != bytes.size()) throw Error("checkpoint has trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

std::string checkpoint_hash(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace mmcl
