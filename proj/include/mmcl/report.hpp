#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace mmcl {

/// Strategy-by-dataset comparison of evaluation reports. Columns follow the
/// order Img, M, M + P1, M + P2, P3; one block per (task, metric).
struct ComparisonTable {
  std::vector<std::string> columns;
  nlohmann::ordered_json data;
  std::string text;
};

/// Reports must cover the same datasets with the same partitions, and each
/// task a report contains must cover all of them. A task missing from a
/// report leaves an empty cell. Duplicate strategies are rejected.
ComparisonTable compare_reports(const std::vector<nlohmann::ordered_json>& reports);

}  // namespace mmcl
