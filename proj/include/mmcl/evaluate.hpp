#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmcl/model.hpp"
#include "mmcl/notegen.hpp"

namespace mmcl {

/// Unweighted Cohen's kappa over arbitrary integer labels. Returns 1 when
/// chance agreement is 1 and observed agreement is 1.
double cohen_kappa(const std::vector<int>& y_true, const std::vector<int>& y_pred);

/// Pool indices ordered by descending cosine similarity to `query`; ties keep
/// pool order.
std::vector<std::size_t> rank_by_cosine(const Eigen::Ref<const Eigen::RowVectorXd>& query,
                                        const Matrix& pool);

/// Mean of precision@rank over the relevant positions of a ranked list.
/// NaN when nothing is relevant.
double average_precision(const std::vector<bool>& relevant_by_rank);

struct MapResult {
  double map = 0.0;
  std::size_t evaluated = 0;
  /// Queries without any relevant pool item; they do not enter the mean.
  std::size_t excluded = 0;
};

/// relevance[q][p] marks pool item p relevant to query q.
MapResult mean_average_precision(const Matrix& queries, const Matrix& pool,
                                 const std::vector<std::vector<bool>>& relevance);

/// Mean cosine similarity of paired rows.
double mean_paired_cosine(const Matrix& a, const Matrix& b);

enum class Task : std::uint8_t { classify, retrieve_notes, retrieve_images, alignment };
inline constexpr std::array<Task, 4> kAllTasks = {Task::classify, Task::retrieve_notes,
                                                  Task::retrieve_images, Task::alignment};
std::string_view task_name(Task t);
std::optional<Task> parse_task(std::string_view name);

struct TaskResult {
  std::string task;
  std::string metric;
  std::string dataset;
  /// "internal" or "external".
  std::string partition;
  double value = 0.0;
  std::size_t count = 0;
  std::size_t excluded = 0;
};

enum class Relevance : std::uint8_t {
  /// A pool item is relevant when it shares the query's diagnostic class.
  class_level,
  /// Only items derived from the query's own sample are relevant.
  exact_pair,
};
std::optional<Relevance> parse_relevance(std::string_view name);

/// Embeddings of the test split under one checkpoint.
class Evaluator {
 public:
  /// `notes` may hold any mix of strategies, one note per record each.
  Evaluator(const Corpus& corpus, ImageStore& store, const Checkpoint& ckpt,
            const std::vector<ClinicalNote>& notes, Relevance relevance = Relevance::class_level);

  std::vector<TaskResult> run(Task task);
  /// Strategy the checkpoint was trained on; nullopt for image-only models.
  std::optional<Strategy> trained_strategy() const { return strategy_; }

 private:
  const Matrix& image_embeddings();
  const Matrix& note_embeddings(Strategy s);
  std::vector<TaskResult> classify();
  std::vector<TaskResult> retrieve_notes();
  std::vector<TaskResult> retrieve_images();
  std::vector<TaskResult> alignment();
  std::string partition(const std::string& dataset) const;
  Strategy require_strategy(const char* task) const;
  bool relevant(std::size_t query_row, std::size_t pool_row) const;

  const Corpus& corpus_;
  ImageStore& store_;
  const Checkpoint& ckpt_;
  std::optional<Strategy> strategy_;
  Relevance relevance_;
  std::vector<std::size_t> test_;
  std::vector<std::string> datasets_;
  std::map<Strategy, std::map<std::string, const ClinicalNote*>> notes_;
  std::optional<Matrix> images_;
  std::map<Strategy, Matrix> texts_;
};

/// Aggregates per-checkpoint results into mean and unbiased std per
/// (task, metric, dataset).
nlohmann::ordered_json build_report(const std::vector<std::vector<TaskResult>>& runs,
                                    const nlohmann::ordered_json& metadata);

}  // namespace mmcl
