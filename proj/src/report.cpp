#include "mmcl/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "mmcl/notegen.hpp"

namespace mmcl {

namespace {

using json = nlohmann::ordered_json;

struct Cell {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

/// Position in the declared column order; image-only first.
int column_rank(const std::string& strategy) {
  if (strategy == "Img") return -1;
  const auto s = parse_strategy(strategy);
  if (!s) throw Error("report has unknown strategy '" + strategy + "'");
  return static_cast<int>(*s);
}

std::string column_title(const std::string& strategy) {
  if (strategy == "Img") return "Img";
  return std::string(strategy_title(*parse_strategy(strategy)));
}

std::string format_cell(const std::optional<Cell>& c) {
  if (!c) return "-";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", c->mean, c->std);
  return buf;
}

/// Display width; "±" is two bytes but one column.
std::size_t width(const std::string& s) {
  std::size_t w = 0;
  for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
  return w;
}

std::string pad(const std::string& s, std::size_t w) { return s + std::string(w > width(s) ? w - width(s) : 0, ' '); }

}  // namespace

ComparisonTable compare_reports(const std::vector<json>& reports) {
  if (reports.empty()) throw Error("no reports to compare");

  struct Source {
    std::string strategy;
    std::map<std::pair<std::string, std::string>, std::map<std::string, Cell>> blocks;
  };
  std::vector<Source> sources;
  std::map<std::string, std::string> partitions;
  std::vector<std::pair<std::string, std::string>> block_order;

  for (std::size_t i = 0; i < reports.size(); ++i) {
    const json& r = reports[i];
    if (!r.contains("strategy") || !r.contains("results")) {
      throw Error("report " + std::to_string(i + 1) + " lacks a strategy or results");
    }
    Source src;
    src.strategy = r.at("strategy").get<std::string>();
    column_rank(src.strategy);
    std::map<std::string, std::string> parts;
    for (const auto& row : r.at("results")) {
      const auto key = std::make_pair(row.at("task").get<std::string>(), row.at("metric").get<std::string>());
      const auto ds = row.at("dataset").get<std::string>();
      src.blocks[key][ds] = Cell{row.at("mean").get<double>(), row.at("std").get<double>(),
                                 row.at("n").get<std::size_t>()};
      parts[ds] = row.at("partition").get<std::string>();
      if (std::find(block_order.begin(), block_order.end(), key) == block_order.end()) block_order.push_back(key);
    }
    if (i == 0) {
      partitions = parts;
    } else if (parts != partitions) {
      throw Error("report for " + src.strategy + " covers different datasets or partitions");
    }
    for (const auto& [key, cells] : src.blocks) {
      if (cells.size() != partitions.size()) {
        throw Error("report for " + src.strategy + " has " + key.first + "/" + key.second +
                    " results for only some datasets");
      }
    }
    for (const auto& other : sources) {
      if (other.strategy == src.strategy) throw Error("two reports for strategy " + src.strategy);
    }
    sources.push_back(std::move(src));
  }
  std::stable_sort(sources.begin(), sources.end(), [](const Source& a, const Source& b) {
    return column_rank(a.strategy) < column_rank(b.strategy);
  });

  ComparisonTable out;
  for (const auto& s : sources) out.columns.push_back(column_title(s.strategy));
  out.data["columns"] = out.columns;
  json tables = json::array();
  std::string text;
  for (const auto& key : block_order) {
    json rows = json::array();
    std::vector<std::vector<std::string>> grid;
    grid.push_back({"dataset", "partition"});
    for (const auto& c : out.columns) grid.back().push_back(c);
    for (const auto& [ds, part] : partitions) {
      json cells = json::object();
      std::vector<std::string> line{ds, part};
      for (std::size_t c = 0; c < sources.size(); ++c) {
        std::optional<Cell> cell;
        auto bit = sources[c].blocks.find(key);
        if (bit != sources[c].blocks.end()) cell = bit->second.at(ds);
        cells[out.columns[c]] = cell ? json{{"mean", cell->mean}, {"std", cell->std}, {"n", cell->n}} : json(nullptr);
        line.push_back(format_cell(cell));
      }
      rows.push_back({{"dataset", ds}, {"partition", part}, {"cells", std::move(cells)}});
      grid.push_back(std::move(line));
    }
    tables.push_back({{"task", key.first}, {"metric", key.second}, {"rows", std::move(rows)}});

    std::vector<std::size_t> widths(grid.front().size(), 0);
    for (const auto& line : grid) {
      for (std::size_t j = 0; j < line.size(); ++j) widths[j] = std::max(widths[j], width(line[j]));
    }
    if (!text.empty()) text += "\n";
    text += key.first + " / " + key.second + "\n";
    for (const auto& line : grid) {
      std::string l;
      for (std::size_t j = 0; j < line.size(); ++j) l += pad(line[j], widths[j] + 2);
      while (!l.empty() && l.back() == ' ') l.pop_back();
      text += l + "\n";
    }
  }
  out.data["tables"] = std::move(tables);
  out.text = std::move(text);
  return out;
}

}  // namespace mmcl
