#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hallucheck/error.hpp"
#include "hallucheck/hs.hpp"
#include "hallucheck/manifest.hpp"
#include "hallucheck/result_store.hpp"
#include "hallucheck/suite.hpp"

namespace hallucheck::analysis {

struct ScoreSeries {
  std::string name;
  std::map<std::string, double> values;  // triplet id -> value
};

/// Ranks 1..n; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(const std::vector<double>& v);

/// Pearson correlation of average ranks. Throws ValidationError when the id
/// sets differ or a value is not finite, UndefinedStatistic for n < 3 or a
/// constant series.
double spearman(const ScoreSeries& x, const ScoreSeries& y);

struct CorrelationMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<std::optional<double>>> rho;  // empty where undefined
  std::vector<std::string> undefined;                   // "a ~ b: reason"
  std::size_t n = 0;                                    // samples per cell
};

CorrelationMatrix correlation_matrix(const std::vector<ScoreSeries>& series);
std::string correlation_csv(const CorrelationMatrix& m);
void render_heatmap_png(const CorrelationMatrix& m, const std::filesystem::path& path);

// --- human study -------------------------------------------------------------

struct RaterTable {
  std::vector<std::string> rater_ids;
  std::map<std::pair<std::string, std::string>, int> scores;  // (rater, triplet) -> 1..5

  std::vector<std::string> triplet_ids() const;
  /// Throws ValidationError naming the first missing (rater, triplet) cell.
  void check_complete() const;
};

/// Reads the study export: one {"rater_id", "triplet_id", "score", ...} per line.
RaterTable rater_table_from_jsonl(const std::filesystem::path& path);
/// Reads the pivot CSV: header "triplet_id,<rater>...", one row per triplet.
RaterTable rater_table_from_csv(const std::filesystem::path& path);

/// Moves one rater's column out of the table into a series (e.g. "GPT").
std::pair<RaterTable, ScoreSeries> split_rater(const RaterTable& table, const std::string& rater);

struct BoxSummary {
  std::string label;
  std::size_t n = 0;
  double median = 0, q1 = 0, q3 = 0;
  double whisker_lo = 0, whisker_hi = 0;  // most extreme data within 1.5 IQR
  std::vector<double> outliers;
};

BoxSummary box_summary(std::string label, std::vector<double> values);

struct DeviationReport {
  std::vector<std::string> triplet_ids;
  std::map<std::string, double> h_mean;
  /// rater -> |H_mean - H_i| per triplet, ordered as triplet_ids.
  std::map<std::string, std::vector<double>> human;
  /// rater -> H_i - H_mean per triplet (signed, for centering checks).
  std::map<std::string, std::vector<double>> residual;
  std::string mllm_name;
  std::vector<double> mllm;  // |H_mean - mllm| per triplet
  std::vector<BoxSummary> summaries;  // humans in rater order, then the MLLM
};

DeviationReport rater_deviations(const RaterTable& humans, const ScoreSeries& mllm);
std::string deviations_csv(const DeviationReport& r);
void render_boxplot_png(const DeviationReport& r, const std::filesystem::path& path);

// --- aggregate tables ----------------------------------------------------------

enum class GroupBy { Model, Dataset, ModelDataset };

struct AggregateRow {
  std::string group;
  std::map<std::string, double> means;
  std::map<std::string, std::size_t> counts;
};

struct AggregateTable {
  std::vector<std::string> metrics;
  std::vector<AggregateRow> rows;
  std::map<std::string, metrics::Direction> directions;
};

/// Mean of each metric per group. Triplets are mapped to groups through the
/// manifest. Throws ValidationError for an empty store, a triplet missing from
/// the manifest, or a requested group with no records.
AggregateTable aggregate_table(const std::vector<ResultRecord>& records, const EvalManifest& manifest, GroupBy by,
                               const std::vector<std::string>& groups = {});

std::string aggregate_csv(const AggregateTable& t);
/// Text table; the best value per column (by direction) is marked with '*'.
std::string aggregate_text(const AggregateTable& t);

// --- report --------------------------------------------------------------------

struct ReportInputs {
  std::string title = "Hallucination analysis";
  std::optional<CorrelationMatrix> correlations;
  std::optional<DeviationReport> deviations;
  std::optional<AggregateTable> aggregate;
  std::vector<hs::HSStats> hs_stats;
};

/// Writes index.html plus CSV/PNG artifacts under `dir` with fixed file names.
/// Missing sections are rendered as "no data". Returns the files written.
std::vector<std::filesystem::path> render_report(const ReportInputs& in, const std::filesystem::path& dir);

}  // namespace hallucheck::analysis
