#pragma once

// run / sweep commands and their output files.
//
// results.csv columns (rows sorted by strategy, seed, task):
//   strategy,seed,task,cumulative_accuracy,cumulative_accuracy_micro,
//   labels_used,pseudo_labels_used,pseudo_label_precision,discovery_recall
// pseudo_label_precision is empty when a task produced no pseudo-labels.
// Wall time lives in summary.json so results.csv stays reproducible.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "cual/benchmark.hpp"
#include "cual/config.hpp"

namespace cual {

struct ResultRow {
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t task = 0;
  double cumulative_accuracy = 0.0;
  double cumulative_accuracy_micro = 0.0;
  std::size_t labels_used = 0;
  std::size_t pseudo_labels_used = 0;
  std::optional<double> pseudo_label_precision;
  double discovery_recall = 0.0;
};

inline constexpr const char* kResultsHeader =
    "strategy,seed,task,cumulative_accuracy,cumulative_accuracy_micro,labels_used,pseudo_labels_used,"
    "pseudo_label_precision,discovery_recall";

inline std::vector<ResultRow> result_rows(const ExperimentResult& r, std::uint64_t seed) {
  std::vector<ResultRow> rows;
  for (const auto& t : r.tasks) {
    ResultRow row;
    row.strategy = std::string(to_string(r.strategy));
    row.seed = seed;
    row.task = t.task;
    row.cumulative_accuracy = t.cumulative_accuracy;
    row.cumulative_accuracy_micro = t.cumulative_accuracy_micro;
    row.labels_used = t.labels_used;
    row.pseudo_labels_used = t.pseudo_labels_used;
    row.pseudo_label_precision = t.pseudo_label_precision;
    row.discovery_recall = t.discovery_recall;
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.strategy, a.seed, a.task) < std::tie(b.strategy, b.seed, b.task);
  });
  return rows;
}

inline std::string csv_line(const ResultRow& r) {
  using detail::format_double;
  return r.strategy + "," + std::to_string(r.seed) + "," + std::to_string(r.task) + "," +
         format_double(r.cumulative_accuracy) + "," + format_double(r.cumulative_accuracy_micro) + "," +
         std::to_string(r.labels_used) + "," + std::to_string(r.pseudo_labels_used) + "," +
         (r.pseudo_label_precision ? format_double(*r.pseudo_label_precision) : std::string()) + "," +
         format_double(r.discovery_recall);
}

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) out += csv_line(r) + "\n";
  return out;
}

inline nlohmann::ordered_json trace_json(const std::vector<IterationTrace>& trace) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& t : trace) {
    nlohmann::ordered_json j;
    j["task"] = t.task;
    j["iteration"] = t.iteration;
    j["threshold"] = t.threshold;
    j["above_threshold"] = t.above_threshold;
    j["queried"] = t.queried;
    j["queried_novel"] = t.queried_novel;
    j["pseudo_labeled"] = t.pseudo_labeled;
    j["discovered"] = t.discovered;
    j["budget_used"] = t.budget_used;
    j["budget_total"] = t.budget_total;
    j["event"] = t.event;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline nlohmann::ordered_json summary_json(const ExperimentResult& r, std::uint64_t seed, double wall_seconds) {
  nlohmann::ordered_json j;
  j["strategy"] = std::string(to_string(r.strategy));
  j["seed"] = seed;
  j["averaged_accuracy"] = r.averaged_accuracy();
  j["final_accuracy"] = r.final_accuracy();
  j["discovery_recall"] = r.overall_discovery_recall();
  j["oracle_calls"] = r.oracle_calls;
  std::size_t pl = 0;
  for (const auto& t : r.tasks) pl += t.pseudo_labels_used;
  j["pseudo_labels"] = pl;
  std::vector<std::string> digests;
  for (auto d : r.pool_digests) digests.push_back(hex64(d));
  j["pool_digests"] = digests;
  std::vector<double> per_task;
  for (const auto& t : r.tasks) per_task.push_back(t.wall_seconds);
  j["task_wall_seconds"] = per_task;
  j["wall_seconds"] = wall_seconds;
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline EmbeddingSet load_dataset(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) {
    EmbeddingSet set = read_embeddings(cfg.dataset);
    if (!set.has_labels()) throw ConfigError("dataset", cfg.dataset + " has no labels");
    return set;
  }
  return generate_synthetic(cfg.synthetic_spec());
}

struct RunOutput {
  ExperimentResult result;
  std::vector<ResultRow> rows;
};

/// Runs one experiment and writes results.csv, trace.json, summary.json and
/// config.echo.json into cfg.out.
inline RunOutput execute_run(const RunConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const EmbeddingSet data = load_dataset(cfg);
  RunOutput out;
  out.result = run_experiment(data, cfg.stream_spec(), cfg.strategy_enum(), cfg.experiment_config());
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.rows = result_rows(out.result, cfg.seed);

  const std::filesystem::path dir(cfg.out);
  std::filesystem::create_directories(dir);
  write_text(dir / "results.csv", results_csv(out.rows));
  write_text(dir / "trace.json", trace_json(out.result.trace).dump(2) + "\n");
  write_text(dir / "summary.json", summary_json(out.result, cfg.seed, wall).dump(2) + "\n");
  write_text(dir / "config.echo.json", config_to_json(cfg).dump(2) + "\n");
  return out;
}

inline void report_error(std::ostream& err, const std::exception& e) {
  nlohmann::ordered_json j;
  j["error"] = e.what();
  if (const auto* ce = dynamic_cast<const ConfigError*>(&e); ce && !ce->key().empty()) j["key"] = ce->key();
  if (dynamic_cast<const CembError*>(&e) != nullptr) j["kind"] = "cemb";
  err << j.dump() << "\n";
}

inline int cmd_run(const RunConfig& cfg, std::ostream& err = std::cerr) {
  try {
    (void)execute_run(cfg);
    return 0;
  } catch (const std::exception& e) {
    report_error(err, e);
    return 1;
  }
}

enum class SweepAxis { Strategy, Budget };

inline SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "strategy") return SweepAxis::Strategy;
  if (s == "budget") return SweepAxis::Budget;
  throw Error("unknown sweep axis '" + std::string(s) + "' (expected strategy or budget)");
}

/// One run per value in its own subdirectory of cfg.out, then sweep.csv with
/// an arm column prepended. A failing arm is reported and skipped.
inline int cmd_sweep(const RunConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                     std::ostream& err = std::cerr) {
  if (values.empty()) return 0;
  try {
    base.validate();
  } catch (const std::exception& e) {
    report_error(err, e);
    return 1;
  }
  struct Line {
    ResultRow row;
    std::string arm;
    double budget;
  };
  std::vector<Line> lines;
  int status = 0;
  for (const auto& value : values) {
    RunConfig cfg = base;
    const std::string arm = (axis == SweepAxis::Strategy ? "strategy=" : "budget=") + value;
    cfg.out = (std::filesystem::path(base.out) / arm).string();
    try {
      if (axis == SweepAxis::Strategy) {
        cfg.strategy = std::string(to_string(parse_strategy(value)));
      } else {
        set_config_value(cfg, "budget_fraction", value);
      }
      const RunOutput run = execute_run(cfg);
      for (const auto& r : run.rows) lines.push_back({r, arm, cfg.budget_fraction});
    } catch (const std::exception& e) {
      err << "arm " << arm << ": ";
      report_error(err, e);
      status = 1;
    }
  }
  std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) {
    return std::tie(a.row.strategy, a.budget, a.row.seed, a.row.task) <
           std::tie(b.row.strategy, b.budget, b.row.seed, b.row.task);
  });
  std::string csv = std::string("arm,budget_fraction,") + kResultsHeader + "\n";
  for (const auto& l : lines) csv += l.arm + "," + detail::format_double(l.budget) + "," + csv_line(l.row) + "\n";
  try {
    std::filesystem::create_directories(base.out);
    write_text(std::filesystem::path(base.out) / "sweep.csv", csv);
  } catch (const std::exception& e) {
    report_error(err, e);
    return 1;
  }
  return status;
}

}  // namespace cual
