#include "hallucheck/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "hallucheck/util.hpp"

namespace hallucheck::analysis {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const ScoreSeries& x, const ScoreSeries& y) {
  if (x.values.size() != y.values.size())
    throw ValidationError("spearman: '" + x.name + "' and '" + y.name + "' cover different triplets");
  std::vector<double> a, b;
  for (const auto& [id, v] : x.values) {
    auto it = y.values.find(id);
    if (it == y.values.end())
      throw ValidationError("spearman: triplet '" + id + "' missing from '" + y.name + "'");
    if (!std::isfinite(v) || !std::isfinite(it->second))
      throw ValidationError("spearman: non-finite value for triplet '" + id + "'");
    a.push_back(v);
    b.push_back(it->second);
  }
  if (a.size() < 3) throw UndefinedStatistic("spearman needs at least 3 samples, got " + std::to_string(a.size()));

  const auto ra = average_ranks(a), rb = average_ranks(b);
  // Both rank vectors have mean (n+1)/2.
  const double mean = 0.5 * static_cast<double>(ra.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0)
    throw UndefinedStatistic("spearman: '" + (saa == 0.0 ? x.name : y.name) + "' is constant");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

CorrelationMatrix correlation_matrix(const std::vector<ScoreSeries>& series) {
  if (series.empty()) throw ValidationError("correlation_matrix: no series");
  for (const auto& s : series) {
    if (s.values.size() != series[0].values.size() ||
        !std::equal(s.values.begin(), s.values.end(), series[0].values.begin(),
                    [](const auto& p, const auto& q) { return p.first == q.first; }))
      throw ValidationError("correlation_matrix: '" + s.name + "' does not share the id set of '" +
                            series[0].name + "'");
  }
  CorrelationMatrix m;
  m.n = series[0].values.size();
  const std::size_t k = series.size();
  for (const auto& s : series) m.names.push_back(s.name);
  m.rho.assign(k, std::vector<std::optional<double>>(k));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) {
      try {
        // the diagonal is 1 by definition but still undefined for a constant series
        const double r = spearman(series[i], series[j]);
        m.rho[i][j] = m.rho[j][i] = i == j ? 1.0 : r;
      } catch (const UndefinedStatistic& e) {
        m.undefined.push_back(series[i].name + " ~ " + series[j].name + ": " + e.what());
      }
    }
  return m;
}

std::string correlation_csv(const CorrelationMatrix& m) {
  std::string out = "series";
  for (const auto& n : m.names) out += "," + util::csv_escape(n);
  out += "\n";
  for (std::size_t i = 0; i < m.names.size(); ++i) {
    out += util::csv_escape(m.names[i]);
    for (std::size_t j = 0; j < m.names.size(); ++j) out += "," + (m.rho[i][j] ? util::fixed(*m.rho[i][j], 4) : "");
    out += "\n";
  }
  return out;
}

namespace {

const cv::Scalar kBlack(0, 0, 0), kGrey(150, 150, 150), kWhite(255, 255, 255);
constexpr int kFont = cv::FONT_HERSHEY_SIMPLEX;

void write_png_mat(const cv::Mat& bgr, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw IoError("cannot write " + path.string());
}

std::string clip_label(const std::string& s, std::size_t n = 14) { return s.size() <= n ? s : s.substr(0, n - 1) + "~"; }

// Blue (-1) through white (0) to red (+1), BGR.
cv::Scalar diverging(double r) {
  const double t = std::clamp(std::abs(r), 0.0, 1.0);
  const double fade = 255.0 * (1.0 - t);
  return r >= 0 ? cv::Scalar(fade, fade, 255.0) : cv::Scalar(255.0, fade, fade);
}

void text(cv::Mat& img, const std::string& s, int x, int y, double scale = 0.4) {
  cv::putText(img, s, {x, y}, kFont, scale, kBlack, 1, cv::LINE_8);
}

}  // namespace

void render_heatmap_png(const CorrelationMatrix& m, const fs::path& path) {
  const int k = static_cast<int>(m.names.size());
  const int cell = 56, margin = 110;
  cv::Mat img(margin + k * cell + 10, margin + k * cell + 10, CV_8UC3, kWhite);
  for (int i = 0; i < k; ++i) {
    text(img, clip_label(m.names[i]), 4, margin + i * cell + cell / 2 + 4);
    // column labels written diagonally would need rotation; stagger them instead
    text(img, clip_label(m.names[i], 8), margin + i * cell + 2, margin - 8 - (i % 2) * 14);
    for (int j = 0; j < k; ++j) {
      const cv::Rect r(margin + j * cell, margin + i * cell, cell, cell);
      const auto& v = m.rho[i][j];
      cv::rectangle(img, r, v ? diverging(*v) : cv::Scalar(235, 235, 235), cv::FILLED);
      cv::rectangle(img, r, kGrey, 1);
      text(img, v ? util::fixed(*v, 2) : "n/a", r.x + 8, r.y + cell / 2 + 5, 0.45);
    }
  }
  write_png_mat(img, path);
}

// --- human study -------------------------------------------------------------

std::vector<std::string> RaterTable::triplet_ids() const {
  std::set<std::string> ids;
  for (const auto& [key, _] : scores) ids.insert(key.second);
  return {ids.begin(), ids.end()};
}

void RaterTable::check_complete() const {
  if (rater_ids.empty()) throw ValidationError("rater table has no raters");
  const auto ids = triplet_ids();
  if (ids.empty()) throw ValidationError("rater table has no scores");
  for (const auto& r : rater_ids)
    for (const auto& t : ids)
      if (!scores.contains({r, t}))
        throw ValidationError("rater table incomplete: rater '" + r + "' has no score for '" + t + "'");
  for (const auto& [key, s] : scores) {
    if (std::find(rater_ids.begin(), rater_ids.end(), key.first) == rater_ids.end())
      throw ValidationError("rater table: score from unlisted rater '" + key.first + "'");
    if (s < 1 || s > 5) throw ValidationError("rater table: score " + std::to_string(s) + " outside 1..5");
  }
}

namespace {

void check_score(int score, int lineno) {
  if (score < 1 || score > 5) throw ParseError("score " + std::to_string(score) + " outside 1..5", lineno);
}

void add_score(RaterTable& t, const std::string& rater, const std::string& triplet, int score) {
  if (std::find(t.rater_ids.begin(), t.rater_ids.end(), rater) == t.rater_ids.end()) t.rater_ids.push_back(rater);
  t.scores[{rater, triplet}] = score;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
      else if (c == '"') quoted = false;
      else cur += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::ifstream open_or_throw(const fs::path& p) {
  std::ifstream in(p);
  if (!in) {
    if (!fs::exists(p)) throw FileNotFound(p.string());
    throw IoError("cannot read " + p.string());
  }
  return in;
}

}  // namespace

RaterTable rater_table_from_jsonl(const fs::path& path) {
  auto in = open_or_throw(path);
  RaterTable t;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      check_score(j.at("score").get<int>(), lineno);
      add_score(t, j.at("rater_id").get<std::string>(), j.at("triplet_id").get<std::string>(),
                j.at("score").get<int>());
    } catch (const json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return t;
}

RaterTable rater_table_from_csv(const fs::path& path) {
  auto in = open_or_throw(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty rater CSV");
  const auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "triplet_id") throw ParseError("rater CSV header must start with triplet_id", 1);
  RaterTable t;
  t.rater_ids.assign(header.begin() + 1, header.end());
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ParseError("expected " + std::to_string(header.size()) + " cells", lineno);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      if (cells[c].empty()) continue;  // incomplete cell
      try {
        std::size_t used = 0;
        const int s = std::stoi(cells[c], &used);
        if (used != cells[c].size()) throw std::invalid_argument("trailing text");
        check_score(s, lineno);
        t.scores[{header[c], cells[0]}] = s;
      } catch (const std::logic_error&) {
        throw ParseError("bad score '" + cells[c] + "'", lineno);
      }
    }
  }
  return t;
}

std::pair<RaterTable, ScoreSeries> split_rater(const RaterTable& table, const std::string& rater) {
  if (std::find(table.rater_ids.begin(), table.rater_ids.end(), rater) == table.rater_ids.end())
    throw UnknownName("rater '" + rater + "' not in table");
  RaterTable rest;
  ScoreSeries s{rater, {}};
  for (const auto& r : table.rater_ids)
    if (r != rater) rest.rater_ids.push_back(r);
  for (const auto& [key, v] : table.scores) {
    if (key.first == rater) s.values[key.second] = v;
    else rest.scores[key] = v;
  }
  return {std::move(rest), std::move(s)};
}

BoxSummary box_summary(std::string label, std::vector<double> values) {
  if (values.empty()) throw UndefinedStatistic("box summary of '" + label + "' has no data");
  std::sort(values.begin(), values.end());
  BoxSummary b;
  b.label = std::move(label);
  b.n = values.size();
  b.q1 = hs::quantile_sorted(values, 0.25);
  b.median = hs::quantile_sorted(values, 0.5);
  b.q3 = hs::quantile_sorted(values, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_lo = b.q1;
  b.whisker_hi = b.q3;
  for (double v : values) {
    if (v < lo || v > hi) {
      b.outliers.push_back(v);
      continue;
    }
    b.whisker_lo = std::min(b.whisker_lo, v);
    b.whisker_hi = std::max(b.whisker_hi, v);
  }
  return b;
}

DeviationReport rater_deviations(const RaterTable& humans, const ScoreSeries& mllm) {
  humans.check_complete();
  DeviationReport r;
  r.triplet_ids = humans.triplet_ids();
  r.mllm_name = mllm.name.empty() ? "MLLM" : mllm.name;
  if (mllm.values.size() != r.triplet_ids.size())
    throw ValidationError("rater_deviations: MLLM series covers " + std::to_string(mllm.values.size()) +
                          " triplets, table has " + std::to_string(r.triplet_ids.size()));
  const double raters = static_cast<double>(humans.rater_ids.size());
  for (const auto& t : r.triplet_ids) {
    auto it = mllm.values.find(t);
    if (it == mllm.values.end()) throw ValidationError("rater_deviations: MLLM has no score for '" + t + "'");
    double sum = 0.0;
    for (const auto& h : humans.rater_ids) sum += humans.scores.at({h, t});
    const double mean = sum / raters;
    r.h_mean[t] = mean;
    for (const auto& h : humans.rater_ids) {
      const double d = humans.scores.at({h, t}) - mean;
      r.residual[h].push_back(d);
      r.human[h].push_back(std::abs(d));
    }
    r.mllm.push_back(std::abs(mean - it->second));
  }
  for (const auto& h : humans.rater_ids) r.summaries.push_back(box_summary(h, r.human[h]));
  r.summaries.push_back(box_summary(r.mllm_name, r.mllm));
  return r;
}

std::string deviations_csv(const DeviationReport& r) {
  std::string out = "rater,n,median,q1,q3,whisker_lo,whisker_hi,outliers\n";
  for (const auto& b : r.summaries)
    out += util::csv_escape(b.label) + "," + std::to_string(b.n) + "," + util::fixed(b.median, 4) + "," +
           util::fixed(b.q1, 4) + "," + util::fixed(b.q3, 4) + "," + util::fixed(b.whisker_lo, 4) + "," +
           util::fixed(b.whisker_hi, 4) + "," + std::to_string(b.outliers.size()) + "\n";
  return out;
}

void render_boxplot_png(const DeviationReport& r, const fs::path& path) {
  const int n = static_cast<int>(r.summaries.size());
  double top = 1.0;
  for (const auto& b : r.summaries) {
    top = std::max(top, b.whisker_hi);
    for (double o : b.outliers) top = std::max(top, o);
  }
  top = std::ceil(top * 2.0) / 2.0;
  const int slot = 48, left = 50, plot_h = 260, upper = 20, lower = 60;
  cv::Mat img(upper + plot_h + lower, left + n * slot + 20, CV_8UC3, kWhite);
  auto ypix = [&](double v) { return upper + static_cast<int>(std::lround(plot_h * (1.0 - v / top))); };

  cv::line(img, {left, upper}, {left, upper + plot_h}, kBlack, 1);
  cv::line(img, {left, upper + plot_h}, {left + n * slot, upper + plot_h}, kBlack, 1);
  for (double v = 0.0; v <= top + 1e-9; v += 0.5) {
    cv::line(img, {left - 4, ypix(v)}, {left, ypix(v)}, kBlack, 1);
    text(img, util::fixed(v, 1), 8, ypix(v) + 4, 0.35);
  }
  for (int i = 0; i < n; ++i) {
    const auto& b = r.summaries[i];
    const int cx = left + i * slot + slot / 2, hw = slot / 3;
    const cv::Scalar fill = i + 1 == n ? cv::Scalar(120, 170, 250) : cv::Scalar(230, 200, 150);
    cv::line(img, {cx, ypix(b.whisker_lo)}, {cx, ypix(b.q1)}, kBlack, 1);
    cv::line(img, {cx, ypix(b.q3)}, {cx, ypix(b.whisker_hi)}, kBlack, 1);
    cv::line(img, {cx - hw / 2, ypix(b.whisker_lo)}, {cx + hw / 2, ypix(b.whisker_lo)}, kBlack, 1);
    cv::line(img, {cx - hw / 2, ypix(b.whisker_hi)}, {cx + hw / 2, ypix(b.whisker_hi)}, kBlack, 1);
    const cv::Rect box(cx - hw, ypix(b.q3), 2 * hw, std::max(1, ypix(b.q1) - ypix(b.q3)));
    cv::rectangle(img, box, fill, cv::FILLED);
    cv::rectangle(img, box, kBlack, 1);
    cv::line(img, {cx - hw, ypix(b.median)}, {cx + hw, ypix(b.median)}, cv::Scalar(0, 0, 200), 2);
    for (double o : b.outliers) cv::circle(img, {cx, ypix(o)}, 2, kBlack, 1);
    text(img, clip_label(b.label, 6), cx - hw - 2, upper + plot_h + 16 + (i % 2) * 14, 0.35);
  }
  write_png_mat(img, path);
}

// --- aggregate tables ----------------------------------------------------------

AggregateTable aggregate_table(const std::vector<ResultRecord>& records, const EvalManifest& manifest, GroupBy by,
                               const std::vector<std::string>& groups) {
  if (records.empty()) throw ValidationError("aggregate_table: result store is empty");
  std::map<std::string, const ImageTriplet*> index;
  for (const auto& t : manifest.entries) index[t.id] = &t;

  std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> acc;
  std::set<std::string> metric_set;
  for (const auto& r : records) {
    auto it = index.find(r.triplet_id);
    if (it == index.end()) throw ValidationError("aggregate_table: triplet '" + r.triplet_id + "' not in manifest");
    const auto& t = *it->second;
    const std::string g = by == GroupBy::Model     ? t.model_tag
                          : by == GroupBy::Dataset ? t.dataset_tag
                                                   : t.model_tag + "/" + t.dataset_tag;
    auto& cell = acc[g][r.metric_name];
    cell.first += r.value;
    ++cell.second;
    metric_set.insert(r.metric_name);
  }

  AggregateTable out;
  out.metrics.assign(metric_set.begin(), metric_set.end());
  for (const auto& m : out.metrics) out.directions[m] = metrics::default_direction(m);
  std::vector<std::string> wanted = groups;
  if (wanted.empty())
    for (const auto& [g, _] : acc) wanted.push_back(g);
  for (const auto& g : wanted) {
    auto it = acc.find(g);
    if (it == acc.end()) throw ValidationError("aggregate_table: group '" + g + "' has no records");
    AggregateRow row;
    row.group = g;
    for (const auto& [m, sc] : it->second) {
      row.means[m] = sc.first / static_cast<double>(sc.second);
      row.counts[m] = sc.second;
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::string aggregate_csv(const AggregateTable& t) {
  std::string out = "group";
  for (const auto& m : t.metrics) out += "," + util::csv_escape(m);
  out += "\n";
  for (const auto& row : t.rows) {
    out += util::csv_escape(row.group);
    for (const auto& m : t.metrics) {
      auto it = row.means.find(m);
      out += "," + (it == row.means.end() ? std::string() : util::fixed(it->second, 4));
    }
    out += "\n";
  }
  return out;
}

std::string aggregate_text(const AggregateTable& t) {
  std::map<std::string, double> best;
  for (const auto& m : t.metrics) {
    const bool higher = t.directions.at(m) == metrics::Direction::Higher;
    for (const auto& row : t.rows) {
      auto it = row.means.find(m);
      if (it == row.means.end()) continue;
      auto b = best.find(m);
      if (b == best.end() || (higher ? it->second > b->second : it->second < b->second)) best[m] = it->second;
    }
  }

  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"group"};
  for (const auto& m : t.metrics)
    head.push_back(m + (t.directions.at(m) == metrics::Direction::Higher ? " (up)" : " (down)"));
  cells.push_back(head);
  for (const auto& row : t.rows) {
    std::vector<std::string> line{row.group};
    for (const auto& m : t.metrics) {
      auto it = row.means.find(m);
      if (it == row.means.end()) {
        line.push_back("-");
        continue;
      }
      const std::string v = util::fixed(it->second, 4);
      line.push_back(it->second == best[m] ? v + "*" : v + " ");
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> w(head.size(), 0);
  for (const auto& r : cells)
    for (std::size_t c = 0; c < r.size(); ++c) w[c] = std::max(w[c], r[c].size());
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      const auto& s = cells[i][c];
      if (c) out += "  ";
      out += c == 0 ? s + std::string(w[c] - s.size(), ' ') : std::string(w[c] - s.size(), ' ') + s;
    }
    out += "\n";
    if (i == 0) {
      std::size_t total = 0;
      for (auto x : w) total += x;
      out += std::string(total + 2 * (w.size() - 1), '-') + "\n";
    }
  }
  return out;
}

// --- report --------------------------------------------------------------------

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
  if (!out) throw IoError("cannot write " + p.string());
}

std::string pre(const std::string& s) { return "<pre>" + html_escape(s) + "</pre>\n"; }
const char* kNoData = "<p class=\"empty\">no data</p>\n";

}  // namespace

std::vector<fs::path> render_report(const ReportInputs& in, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir.string() + ": " + ec.message());
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& body) {
    write_text(dir / name, body);
    written.push_back(dir / name);
  };

  std::string html = "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" + html_escape(in.title) +
                     "</title>\n<style>body{font-family:sans-serif;margin:2em}pre{background:#f6f6f6;padding:1em}"
                     ".empty{color:#888}</style></head><body>\n<h1>" +
                     html_escape(in.title) + "</h1>\n";

  html += "<h2>Hallucination score</h2>\n";
  if (in.hs_stats.empty()) {
    html += kNoData;
  } else {
    emit("hs_stats.csv", hs::render_stats_csv(in.hs_stats));
    emit("hs_stats.txt", hs::render_stats_table(in.hs_stats));
    html += pre(hs::render_stats_table(in.hs_stats)) + "<p><a href=\"hs_stats.csv\">hs_stats.csv</a></p>\n";
  }

  html += "<h2>Metric averages</h2>\n";
  if (!in.aggregate || in.aggregate->rows.empty()) {
    html += kNoData;
  } else {
    emit("aggregate.csv", aggregate_csv(*in.aggregate));
    emit("aggregate.txt", aggregate_text(*in.aggregate));
    html += pre(aggregate_text(*in.aggregate)) + "<p><a href=\"aggregate.csv\">aggregate.csv</a></p>\n";
  }

  html += "<h2>Spearman correlations</h2>\n";
  if (!in.correlations || in.correlations->names.empty()) {
    html += kNoData;
  } else {
    emit("correlations.csv", correlation_csv(*in.correlations));
    render_heatmap_png(*in.correlations, dir / "correlations.png");
    written.push_back(dir / "correlations.png");
    html += "<p>n = " + std::to_string(in.correlations->n) +
            (in.correlations->n < 500 ? " (small sample: indicative of trends only)" : "") +
            "</p>\n<img src=\"correlations.png\" alt=\"correlation heatmap\">\n" + pre(correlation_csv(*in.correlations));
    if (!in.correlations->undefined.empty()) {
      html += "<p>Undefined cells:</p><ul>\n";
      for (const auto& u : in.correlations->undefined) html += "<li>" + html_escape(u) + "</li>\n";
      html += "</ul>\n";
    }
  }

  html += "<h2>Rater deviations</h2>\n";
  if (!in.deviations || in.deviations->summaries.empty()) {
    html += kNoData;
  } else {
    emit("deviations.csv", deviations_csv(*in.deviations));
    render_boxplot_png(*in.deviations, dir / "deviations.png");
    written.push_back(dir / "deviations.png");
    html += "<img src=\"deviations.png\" alt=\"rater deviation box plot\">\n" + pre(deviations_csv(*in.deviations));
  }

  html += "</body></html>\n";
  emit("index.html", html);
  return written;
}

}  // namespace hallucheck::analysis
