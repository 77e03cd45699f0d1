#include "mmcl/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mmcl {

double cohen_kappa(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
  if (y_true.size() != y_pred.size()) {
    throw Error("cohen_kappa: " + std::to_string(y_true.size()) + " true labels vs " +
                std::to_string(y_pred.size()) + " predictions");
  }
  if (y_true.empty()) throw Error("cohen_kappa: no samples");
  std::map<int, double> true_counts, pred_counts;
  double agree = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    true_counts[y_true[i]] += 1.0;
    pred_counts[y_pred[i]] += 1.0;
    if (y_true[i] == y_pred[i]) agree += 1.0;
  }
  const double n = static_cast<double>(y_true.size());
  const double po = agree / n;
  double pe = 0.0;
  for (const auto& [label, c] : true_counts) {
    auto it = pred_counts.find(label);
    if (it != pred_counts.end()) pe += (c / n) * (it->second / n);
  }
  if (pe == 1.0) return po == 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

std::vector<std::size_t> rank_by_cosine(const Eigen::Ref<const Eigen::RowVectorXd>& query,
                                        const Matrix& pool) {
  if (query.size() != pool.cols()) throw Error("query and pool dimensions differ");
  const double qn = query.norm();
  std::vector<double> sim(static_cast<std::size_t>(pool.rows()));
  for (Eigen::Index p = 0; p < pool.rows(); ++p) {
    const double denom = qn * pool.row(p).norm();
    sim[static_cast<std::size_t>(p)] = denom > 0.0 ? pool.row(p).dot(query) / denom : 0.0;
  }
  std::vector<std::size_t> order(sim.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  return order;
}

double average_precision(const std::vector<bool>& relevant_by_rank) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < relevant_by_rank.size(); ++r) {
    if (!relevant_by_rank[r]) continue;
    hits += 1.0;
    sum += hits / static_cast<double>(r + 1);
  }
  return hits > 0.0 ? sum / hits : std::numeric_limits<double>::quiet_NaN();
}

MapResult mean_average_precision(const Matrix& queries, const Matrix& pool,
                                 const std::vector<std::vector<bool>>& relevance) {
  if (pool.rows() == 0) throw Error("mean_average_precision: empty pool");
  if (relevance.size() != static_cast<std::size_t>(queries.rows())) {
    throw Error("mean_average_precision: relevance rows do not match queries");
  }
  MapResult out;
  double total = 0.0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const auto& rel = relevance[static_cast<std::size_t>(q)];
    if (rel.size() != static_cast<std::size_t>(pool.rows())) {
      throw Error("mean_average_precision: relevance columns do not match pool");
    }
    if (std::none_of(rel.begin(), rel.end(), [](bool b) { return b; })) {
      ++out.excluded;
      continue;
    }
    const auto order = rank_by_cosine(queries.row(q), pool);
    std::vector<bool> ranked(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) ranked[r] = rel[order[r]];
    total += average_precision(ranked);
    ++out.evaluated;
  }
  out.map = out.evaluated > 0 ? total / static_cast<double>(out.evaluated)
                              : std::numeric_limits<double>::quiet_NaN();
  return out;
}

double mean_paired_cosine(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("paired embeddings differ in shape");
  if (a.rows() == 0) throw Error("no pairs");
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    total += a.row(i).dot(b.row(i)) / (a.row(i).norm() * b.row(i).norm());
  }
  return total / static_cast<double>(a.rows());
}

std::string_view task_name(Task t) {
  switch (t) {
    case Task::classify: return "classify";
    case Task::retrieve_notes: return "retrieve-notes";
    case Task::retrieve_images: return "retrieve-images";
    case Task::alignment: return "alignment";
  }
  return "?";
}

std::optional<Task> parse_task(std::string_view name) {
  for (Task t : kAllTasks) {
    if (task_name(t) == name) return t;
  }
  return std::nullopt;
}

std::optional<Relevance> parse_relevance(std::string_view name) {
  if (name == "class") return Relevance::class_level;
  if (name == "pair") return Relevance::exact_pair;
  return std::nullopt;
}

Evaluator::Evaluator(const Corpus& corpus, ImageStore& store, const Checkpoint& ckpt,
                     const std::vector<ClinicalNote>& notes, Relevance relevance)
    : corpus_(corpus), store_(store), ckpt_(ckpt), relevance_(relevance), test_(corpus.indices(Split::test)) {
  if (test_.empty()) throw Error("corpus has no test split");
  const std::string strategy = ckpt.meta.value("strategy", std::string());
  if (ckpt.model->has_text()) {
    strategy_ = parse_strategy(strategy);
    if (!strategy_) throw Error("checkpoint does not record its training strategy");
  }
  std::set<std::string> seen;
  for (std::size_t i : test_) {
    if (seen.insert(corpus.at(i).dataset).second) datasets_.push_back(corpus.at(i).dataset);
  }
  std::sort(datasets_.begin(), datasets_.end());
  for (const auto& note : notes) {
    auto& by_id = notes_[note.strategy];
    if (!by_id.emplace(note.sample_id, &note).second) {
      throw Error("duplicate " + std::string(strategy_code(note.strategy)) + " note for '" +
                  note.sample_id + "'");
    }
  }
}

bool Evaluator::relevant(std::size_t query_row, std::size_t pool_row) const {
  if (relevance_ == Relevance::exact_pair) return query_row == pool_row;
  return corpus_.at(test_[query_row]).label == corpus_.at(test_[pool_row]).label;
}

std::string Evaluator::partition(const std::string& dataset) const {
  return corpus_.is_external(dataset) ? "external" : "internal";
}

Strategy Evaluator::require_strategy(const char* task) const {
  if (!strategy_) throw Error(std::string(task) + " needs a model with a text branch");
  return *strategy_;
}

const Matrix& Evaluator::image_embeddings() {
  if (!images_) {
    std::vector<const ImageTensor*> imgs;
    for (std::size_t i : test_) imgs.push_back(&store_.get(corpus_.at(i)));
    images_ = ckpt_.model->embed_images(imgs);
  }
  return *images_;
}

const Matrix& Evaluator::note_embeddings(Strategy s) {
  auto it = texts_.find(s);
  if (it != texts_.end()) return it->second;
  auto nit = notes_.find(s);
  if (nit == notes_.end()) {
    throw Error("no " + std::string(strategy_code(s)) + " notes supplied");
  }
  std::vector<TokenSequence> tokens;
  std::vector<std::string> missing;
  for (std::size_t i : test_) {
    auto found = nit->second.find(corpus_.at(i).id);
    if (found == nit->second.end()) {
      missing.push_back(corpus_.at(i).id);
      continue;
    }
    tokens.push_back(Tokenizer::builtin().encode(found->second->text));
  }
  if (!missing.empty()) {
    throw Error("missing " + std::string(strategy_code(s)) + " notes for test records: " +
                join(missing, ", "));
  }
  return texts_.emplace(s, ckpt_.model->embed_texts(tokens)).first->second;
}

std::vector<TaskResult> Evaluator::run(Task task) {
  switch (task) {
    case Task::classify: return classify();
    case Task::retrieve_notes: return retrieve_notes();
    case Task::retrieve_images: return retrieve_images();
    case Task::alignment: return alignment();
  }
  return {};
}

namespace {

int argmax_row(const Matrix& m, Eigen::Index r) {
  Eigen::Index best = 0;
  m.row(r).maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

std::vector<TaskResult> Evaluator::classify() {
  const Matrix& z = image_embeddings();
  const Matrix img_scores = ckpt_.model->scores(z);
  std::optional<Matrix> txt_scores;
  if (strategy_) txt_scores = ckpt_.model->scores(note_embeddings(*strategy_));
  std::vector<TaskResult> out;
  for (const auto& ds : datasets_) {
    std::vector<int> truth, pred_img, pred_txt;
    for (std::size_t r = 0; r < test_.size(); ++r) {
      const auto& rec = corpus_.at(test_[r]);
      if (rec.dataset != ds) continue;
      truth.push_back(label_index(rec.label));
      pred_img.push_back(argmax_row(img_scores, static_cast<Eigen::Index>(r)));
      if (txt_scores) pred_txt.push_back(argmax_row(*txt_scores, static_cast<Eigen::Index>(r)));
    }
    out.push_back({"classify", "kappa_image", ds, partition(ds), cohen_kappa(truth, pred_img), truth.size(), 0});
    if (txt_scores) {
      out.push_back({"classify", "kappa_text", ds, partition(ds), cohen_kappa(truth, pred_txt), truth.size(), 0});
    }
  }
  return out;
}

std::vector<TaskResult> Evaluator::retrieve_notes() {
  require_strategy("retrieve-notes");
  const Matrix& z = image_embeddings();
  std::vector<Strategy> pool_strategies;
  for (const auto& [s, _] : notes_) pool_strategies.push_back(s);
  if (pool_strategies.empty()) throw Error("retrieve-notes: empty note pool");
  std::vector<TaskResult> out;
  for (const auto& ds : datasets_) {
    std::vector<Eigen::Index> rows;
    for (std::size_t r = 0; r < test_.size(); ++r) {
      if (corpus_.at(test_[r]).dataset == ds) rows.push_back(static_cast<Eigen::Index>(r));
    }
    Matrix queries(static_cast<Eigen::Index>(rows.size()), z.cols());
    Matrix pool(static_cast<Eigen::Index>(rows.size() * pool_strategies.size()), z.cols());
    std::vector<std::size_t> pool_rows;
    for (std::size_t q = 0; q < rows.size(); ++q) queries.row(static_cast<Eigen::Index>(q)) = z.row(rows[q]);
    Eigen::Index p = 0;
    for (Strategy s : pool_strategies) {
      const Matrix& t = note_embeddings(s);
      for (auto r : rows) {
        pool.row(p++) = t.row(r);
        pool_rows.push_back(static_cast<std::size_t>(r));
      }
    }
    std::vector<std::vector<bool>> rel(rows.size(), std::vector<bool>(pool_rows.size()));
    for (std::size_t q = 0; q < rows.size(); ++q) {
      for (std::size_t j = 0; j < pool_rows.size(); ++j) {
        rel[q][j] = relevant(static_cast<std::size_t>(rows[q]), pool_rows[j]);
      }
    }
    const MapResult m = mean_average_precision(queries, pool, rel);
    out.push_back({"retrieve-notes", "map", ds, partition(ds), m.map, m.evaluated, m.excluded});
  }
  return out;
}

std::vector<TaskResult> Evaluator::retrieve_images() {
  const Strategy s = require_strategy("retrieve-images");
  if (!notes_.count(s)) {
    throw Error("retrieve-images: checkpoint was trained on " + std::string(strategy_code(s)) +
                " notes but none were supplied");
  }
  const Matrix& z = image_embeddings();
  const Matrix& t = note_embeddings(s);
  std::vector<TaskResult> out;
  for (const auto& ds : datasets_) {
    std::vector<Eigen::Index> rows;
    for (std::size_t r = 0; r < test_.size(); ++r) {
      if (corpus_.at(test_[r]).dataset == ds) rows.push_back(static_cast<Eigen::Index>(r));
    }
    Matrix queries(static_cast<Eigen::Index>(rows.size()), z.cols());
    Matrix pool(static_cast<Eigen::Index>(rows.size()), z.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      queries.row(static_cast<Eigen::Index>(i)) = t.row(rows[i]);
      pool.row(static_cast<Eigen::Index>(i)) = z.row(rows[i]);
    }
    std::vector<std::vector<bool>> rel(rows.size(), std::vector<bool>(rows.size()));
    for (std::size_t q = 0; q < rows.size(); ++q) {
      for (std::size_t j = 0; j < rows.size(); ++j) {
        rel[q][j] = relevant(static_cast<std::size_t>(rows[q]), static_cast<std::size_t>(rows[j]));
      }
    }
    const MapResult m = mean_average_precision(queries, pool, rel);
    out.push_back({"retrieve-images", "map", ds, partition(ds), m.map, m.evaluated, m.excluded});
  }
  return out;
}

std::vector<TaskResult> Evaluator::alignment() {
  const Strategy s = require_strategy("alignment");
  const Matrix& z = image_embeddings();
  const Matrix& t = note_embeddings(s);
  std::vector<TaskResult> out;
  for (const auto& ds : datasets_) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < test_.size(); ++r) {
      if (corpus_.at(test_[r]).dataset != ds) continue;
      const auto i = static_cast<Eigen::Index>(r);
      total += z.row(i).dot(t.row(i)) / (z.row(i).norm() * t.row(i).norm());
      ++n;
    }
    out.push_back({"alignment", "cosine", ds, partition(ds), total / static_cast<double>(n), n, 0});
  }
  return out;
}

nlohmann::ordered_json build_report(const std::vector<std::vector<TaskResult>>& runs,
                                    const nlohmann::ordered_json& metadata) {
  if (runs.empty()) throw Error("no evaluation runs to report");
  struct Acc {
    const TaskResult* first = nullptr;
    std::vector<double> values;
    std::size_t excluded = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> acc;
  for (const auto& run : runs) {
    for (const auto& r : run) {
      const std::string key = r.task + "\x1f" + r.metric + "\x1f" + r.dataset;
      auto [it, fresh] = acc.try_emplace(key);
      if (fresh) {
        it->second.first = &r;
        order.push_back(key);
      }
      it->second.values.push_back(r.value);
      it->second.excluded += r.excluded;
    }
  }
  nlohmann::ordered_json results = nlohmann::ordered_json::array();
  for (const auto& key : order) {
    const auto& a = acc.at(key);
    if (a.values.size() != runs.size()) throw Error("evaluation runs disagree on their task axes");
    const double n = static_cast<double>(a.values.size());
    const double mean = std::accumulate(a.values.begin(), a.values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : a.values) ss += (v - mean) * (v - mean);
    const double sd = a.values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    nlohmann::ordered_json row;
    row["task"] = a.first->task;
    row["metric"] = a.first->metric;
    row["dataset"] = a.first->dataset;
    row["partition"] = a.first->partition;
    row["mean"] = mean;
    row["std"] = sd;
    row["n"] = a.values.size();
    row["values"] = a.values;
    row["count"] = a.first->count;
    row["excluded"] = a.excluded;
    results.push_back(row);
  }
  nlohmann::ordered_json report = metadata;
  report["results"] = results;
  return report;
}

}  // namespace mmcl
