#include "mmcl/train.hpp"

#include <cmath>
#include <map>
#include <set>

#include "mmcl/evaluate.hpp"

namespace mmcl {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::vector<std::vector<StreamItem>> make_batches(const std::vector<StreamItem>& items, std::size_t size) {
  std::vector<std::vector<StreamItem>> batches;
  for (std::size_t start = 0; start < items.size(); start += size) {
    const std::size_t end = std::min(items.size(), start + size);
    batches.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(start),
                         items.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // The contrastive term needs two pairs; a lone trailing sample joins the
  // previous batch instead.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

std::vector<nn::Buffer> snapshot(const nn::ParameterList& params) {
  std::vector<nn::Buffer> out;
  for (const auto& p : params) out.push_back(p.var.value().data);
  return out;
}

void restore(const nn::ParameterList& params, const std::vector<nn::Buffer>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].var.mutable_value().data = values[i];
}

class Trainer {
 public:
  Trainer(const Corpus& corpus, const std::vector<ClinicalNote>* notes, const TrainConfig& config,
          ImageStore& store)
      : corpus_(corpus), notes_(notes), config_(config), store_(store) {
    config_.validate();
    train_ = corpus.indices(Split::train);
    val_ = corpus.indices(Split::val);
    if (train_.empty()) throw Error("corpus has no train split");
    if (val_.empty()) throw Error("corpus has no validation split; model selection needs one");
    if (notes_) index_notes_();
    ModelConfig mc = config_.model;
    mc.with_text = notes_ != nullptr;
    model_ = std::make_shared<MultimodalModel>(mc, config_.seed);
  }

  TrainResult run(const EpochCallback& on_epoch) {
    const auto params = model_->parameters();
    nn::Adam adam(params, nn::AdamOptions{config_.learning_rate});
    NtXentOptions ntx{config_.weights.temperature, config_.intra_modal_negatives};

    TrainResult result;
    EpochRecord initial = validate_epoch(EpochRecord{});
    result.history.push_back(initial);
    if (on_epoch) on_epoch(initial);
    double best_kappa = initial.val_kappa;
    auto best = snapshot(params);

    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      const auto stream = balanced_stream(corpus_, derive_seed(config_.seed, "epoch:" + std::to_string(epoch)));
      const auto batches = make_batches(stream.items, static_cast<std::size_t>(config_.batch_size));
      EpochRecord rec;
      rec.epoch = epoch;
      std::size_t position = 0;
      for (std::size_t b = 0; b < batches.size(); ++b) {
        std::vector<ImageTensor> augmented;
        augmented.reserve(batches[b].size());
        std::vector<const ImageTensor*> images;
        std::vector<TokenSequence> tokens;
        std::vector<int> labels;
        for (const auto& item : batches[b]) {
          const SampleRecord& r = corpus_.at(item.record_index);
          const ImageTensor& base = store_.get(r);
          Rng rng(derive_seed(config_.seed, "augment:" + std::to_string(epoch) + ":" +
                                                std::to_string(position++) + ":" + r.id));
          if (item.duplicate || rng.bernoulli(config_.augment_probability)) {
            augmented.push_back(augment(base, rng.next()));
            images.push_back(&augmented.back());
          } else {
            images.push_back(&base);
          }
          labels.push_back(label_index(r.label));
          if (notes_) tokens.push_back(tokens_.at(r.id));
        }
        step(adam, images, tokens, labels, ntx, rec, epoch, b);
      }
      const double nb = static_cast<double>(batches.size());
      rec.loss /= nb;
      rec.components.ce_img /= nb;
      rec.components.ce_txt /= nb;
      rec.components.l1 /= nb;
      rec.components.cos /= nb;
      rec.components.ntxent /= nb;
      rec = validate_epoch(rec);
      result.history.push_back(rec);
      if (on_epoch) on_epoch(rec);
      if (rec.val_kappa >= best_kappa) {
        best_kappa = rec.val_kappa;
        result.best_epoch = epoch;
        best = snapshot(params);
      }
    }
    restore(params, best);

    result.checkpoint.model = model_;
    result.checkpoint.vocab_hash = Tokenizer::builtin().vocab_hash();
    ordered_json meta;
    meta["kind"] = notes_ ? "multimodal" : "image_only";
    meta["strategy"] = notes_ ? std::string(strategy_code(strategy_)) : std::string("Img");
    meta["seed"] = config_.seed;
    meta["epoch"] = result.best_epoch;
    meta["config"] = config_.to_json();
    meta["history"] = history_to_json(result.history);
    result.checkpoint.meta = meta;
    return result;
  }

 private:
  void index_notes_() {
    std::set<Strategy> strategies;
    std::map<std::string, const ClinicalNote*> by_id;
    for (const auto& n : *notes_) {
      strategies.insert(n.strategy);
      if (!by_id.emplace(n.sample_id, &n).second) {
        throw Error("more than one note for sample '" + n.sample_id + "'");
      }
    }
    if (strategies.size() != 1) throw Error("training notes must come from exactly one strategy");
    strategy_ = *strategies.begin();
    std::vector<std::string> missing;
    for (std::size_t i : train_) {
      const auto& id = corpus_.at(i).id;
      auto it = by_id.find(id);
      if (it == by_id.end()) {
        missing.push_back(id);
        continue;
      }
      tokens_.emplace(id, Tokenizer::builtin().encode(it->second->text));
    }
    if (!missing.empty()) throw Error("train records without a note: " + join(missing, ", "));
    for (std::size_t i : val_) {
      auto it = by_id.find(corpus_.at(i).id);
      if (it != by_id.end()) val_tokens_.emplace(it->first, Tokenizer::builtin().encode(it->second->text));
    }
  }

  void step(nn::Adam& adam, const std::vector<const ImageTensor*>& images, const std::vector<TokenSequence>& tokens,
            const std::vector<int>& labels, const NtXentOptions& ntx, EpochRecord& rec, int epoch, std::size_t batch) {
    const LossWeights& w = config_.weights;
    nn::Var z_img = model_->encode_images(images, true);
    nn::Var ce_img = cross_entropy_loss(model_->classify(z_img), labels);
    LossComponents c;
    c.ce_img = ce_img.value()[0];
    nn::Var total;
    if (notes_) {
      nn::Var z_txt = model_->encode_texts(tokens, true);
      nn::Var ce_txt = cross_entropy_loss(model_->classify(z_txt), labels);
      nn::Var l1 = l1_align_loss(z_img, z_txt);
      nn::Var cos = cosine_align_loss(z_img, z_txt);
      nn::Var ntxent = nt_xent_loss(z_img, z_txt, ntx);
      c.ce_txt = ce_txt.value()[0];
      c.l1 = l1.value()[0];
      c.cos = cos.value()[0];
      c.ntxent = ntxent.value()[0];
      total = weighted_sum({ce_img, ce_txt, l1, cos, ntxent}, {w.ce_img, w.ce_txt, w.l1, w.cos, w.ntxent});
    } else {
      total = weighted_sum({ce_img}, {w.ce_img});
    }
    double value = 0.0;
    try {
      value = composite(c, w);
    } catch (const Error& e) {
      throw Error(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                  ", ce_img=" + std::to_string(c.ce_img) + ", ce_txt=" + std::to_string(c.ce_txt) +
                  ", l1=" + std::to_string(c.l1) + ", cos=" + std::to_string(c.cos) +
                  ", ntxent=" + std::to_string(c.ntxent) + ")");
    }
    adam.zero_grad();
    nn::backward(total);
    adam.step();
    rec.loss += value;
    rec.components.ce_img += c.ce_img;
    rec.components.ce_txt += c.ce_txt;
    rec.components.l1 += c.l1;
    rec.components.cos += c.cos;
    rec.components.ntxent += c.ntxent;
  }

  EpochRecord validate_epoch(EpochRecord rec) {
    std::vector<const ImageTensor*> images;
    std::vector<int> truth;
    for (std::size_t i : val_) {
      images.push_back(&store_.get(corpus_.at(i)));
      truth.push_back(label_index(corpus_.at(i).label));
    }
    const Matrix z = model_->embed_images(images);
    const Matrix s = model_->scores(z);
    std::vector<int> pred;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      Eigen::Index best = 0;
      s.row(r).maxCoeff(&best);
      pred.push_back(static_cast<int>(best));
    }
    rec.val_kappa = cohen_kappa(truth, pred);
    if (notes_ && val_tokens_.size() == val_.size()) {
      std::vector<TokenSequence> tokens;
      for (std::size_t i : val_) tokens.push_back(val_tokens_.at(corpus_.at(i).id));
      rec.val_alignment = mean_paired_cosine(z, model_->embed_texts(tokens));
    }
    return rec;
  }

  const Corpus& corpus_;
  const std::vector<ClinicalNote>* notes_;
  TrainConfig config_;
  ImageStore& store_;
  std::vector<std::size_t> train_, val_;
  Strategy strategy_ = Strategy::M;
  std::map<std::string, TokenSequence> tokens_, val_tokens_;
  std::shared_ptr<MultimodalModel> model_;
};

const std::set<std::string> kConfigKeys = {
    "epochs", "learning_rate", "batch_size", "seed", "weights", "temperature", "intra_modal_negatives",
    "augment_probability", "shared_dim", "image_encoder", "text_encoder"};
const std::set<std::string> kWeightKeys = {"ce_img", "ce_txt", "l1", "cos", "ntxent"};

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("epochs must be at least 1 (got " + std::to_string(epochs) + ")");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be positive");
  if (batch_size < 2) throw Error("batch_size must be at least 2 for the contrastive term");
  if (augment_probability < 0.0 || augment_probability > 1.0) throw Error("augment_probability must lie in [0, 1]");
  if (model.shared_dim < 1) throw Error("shared_dim must be positive");
  weights.validate();
}

ordered_json TrainConfig::to_json() const {
  ordered_json j;
  j["epochs"] = epochs;
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["weights"] = {{"ce_img", weights.ce_img},
                  {"ce_txt", weights.ce_txt},
                  {"l1", weights.l1},
                  {"cos", weights.cos},
                  {"ntxent", weights.ntxent}};
  j["temperature"] = weights.temperature;
  j["intra_modal_negatives"] = intra_modal_negatives;
  j["augment_probability"] = augment_probability;
  j["shared_dim"] = model.shared_dim;
  j["image_encoder"] = model.image_encoder;
  j["text_encoder"] = model.text_encoder;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error("train config must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!kConfigKeys.count(key)) throw Error("unknown train config key '" + key + "'");
  }
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      for (const auto& [key, _] : w.items()) {
        if (!kWeightKeys.count(key)) throw Error("unknown loss weight '" + key + "'");
      }
      c.weights.ce_img = w.value("ce_img", c.weights.ce_img);
      c.weights.ce_txt = w.value("ce_txt", c.weights.ce_txt);
      c.weights.l1 = w.value("l1", c.weights.l1);
      c.weights.cos = w.value("cos", c.weights.cos);
      c.weights.ntxent = w.value("ntxent", c.weights.ntxent);
    }
    c.weights.temperature = j.value("temperature", c.weights.temperature);
    c.intra_modal_negatives = j.value("intra_modal_negatives", c.intra_modal_negatives);
    c.augment_probability = j.value("augment_probability", c.augment_probability);
    c.model.shared_dim = j.value("shared_dim", c.model.shared_dim);
    c.model.image_encoder = j.value("image_encoder", c.model.image_encoder);
    c.model.text_encoder = j.value("text_encoder", c.model.text_encoder);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error("cannot parse " + path.string() + ": " + e.what());
  }
}

TrainResult train(const Corpus& corpus, const std::vector<ClinicalNote>& notes, const TrainConfig& config,
                  ImageStore& store, const EpochCallback& on_epoch) {
  return Trainer(corpus, &notes, config, store).run(on_epoch);
}

TrainResult train_image_only(const Corpus& corpus, const TrainConfig& config, ImageStore& store,
                             const EpochCallback& on_epoch) {
  return Trainer(corpus, nullptr, config, store).run(on_epoch);
}

std::vector<TrainConfig> expand_grid(const TrainConfig& base, const json& grid) {
  if (!grid.is_object() || grid.empty()) throw Error("grid must be a non-empty object of value lists");
  std::vector<json> configs{json(base.to_json())};
  for (const auto& [key, values] : grid.items()) {
    if (!values.is_array() || values.empty()) throw Error("grid entry '" + key + "' must be a non-empty list");
    std::vector<json> next;
    for (const auto& cfg : configs) {
      for (const auto& v : values) {
        json c = cfg;
        if (key.rfind("weights.", 0) == 0) {
          c["weights"][key.substr(8)] = v;
        } else {
          c[key] = v;
        }
        next.push_back(std::move(c));
      }
    }
    configs = std::move(next);
  }
  std::vector<TrainConfig> out;
  for (const auto& c : configs) out.push_back(TrainConfig::from_json(c));
  return out;
}

ordered_json history_to_json(const std::vector<EpochRecord>& history) {
  ordered_json arr = ordered_json::array();
  for (const auto& h : history) {
    ordered_json e;
    e["epoch"] = h.epoch;
    e["loss"] = h.loss;
    e["components"] = {{"ce_img", h.components.ce_img},
                       {"ce_txt", h.components.ce_txt},
                       {"l1", h.components.l1},
                       {"cos", h.components.cos},
                       {"ntxent", h.components.ntxent}};
    e["val_kappa"] = h.val_kappa;
    if (h.val_alignment) e["val_alignment"] = *h.val_alignment;
    arr.push_back(e);
  }
  return arr;
}

}  // namespace mmcl
