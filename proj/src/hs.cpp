#include "hallucheck/hs.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include <httplib.h>

#include "hallucheck/adapters.hpp"
#include "hallucheck/log.hpp"
#include "hallucheck/util.hpp"

namespace hallucheck::hs {

using nlohmann::json;
namespace fs = std::filesystem;

PromptBundle build_prompt(const PromptConfig& cfg) {
  if (cfg.rubric_override) throw ValidationError("the rubric prompt is frozen and cannot be overridden");
  if (util::sha256_hex(kRubricPrompt) != kRubricSha256)
    throw ValidationError("rubric prompt does not match its golden hash");
  PromptBundle b;
  b.system_text = std::string(kRubricPrompt);
  if (cfg.model_id) b.model_id = *cfg.model_id;
  if (cfg.temperature) b.temperature = *cfg.temperature;
  if (cfg.max_retries) {
    if (*cfg.max_retries < 0) throw ValidationError("max_retries must be >= 0");
    b.max_retries = *cfg.max_retries;
  }
  return b;
}

// --- parsing -----------------------------------------------------------------

namespace {

// End index (exclusive) of the balanced object starting at `open`, or npos.
std::size_t match_object(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_str = false, esc = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      if (esc) esc = false;
      else if (c == '\\') esc = true;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i + 1;
  }
  return std::string_view::npos;
}

}  // namespace

ParsedResponse parse_response(std::string_view text) {
  json obj;
  bool found = false;
  for (std::size_t pos = text.find('{'); pos != std::string_view::npos; pos = text.find('{', pos + 1)) {
    const auto end = match_object(text, pos);
    if (end == std::string_view::npos) continue;
    try {
      obj = json::parse(text.substr(pos, end - pos));
      if (obj.is_object()) {
        found = true;
        break;
      }
    } catch (const json::parse_error&) {
    }
  }
  if (!found) throw NoJsonFound("no JSON object found in response");

  if (!obj.contains("score") || obj["score"].is_null()) throw MissingField("response lacks 'score'");
  const auto& s = obj["score"];
  if (!s.is_number()) throw MissingField("'score' is not a number");
  if (!obj.contains("reasoning") || !obj["reasoning"].is_string()) throw MissingField("response lacks string 'reasoning'");

  int score;
  if (s.is_number_integer()) {
    const auto v = s.get<std::int64_t>();
    if (v < 1 || v > 5) throw ScoreOutOfRange("score " + std::to_string(v) + " outside 1..5");
    score = static_cast<int>(v);
  } else {
    const double v = s.get<double>();
    if (!(v >= 1.0 && v <= 5.0) || v != std::floor(v))
      throw ScoreOutOfRange("score " + util::shortest(v) + " is not an integer in 1..5");
    score = static_cast<int>(v);
  }
  auto reasoning = obj["reasoning"].get<std::string>();
  if (reasoning.find_first_not_of(" \t\r\n") == std::string::npos) throw MissingField("'reasoning' is empty");
  return {score, std::move(reasoning)};
}

// --- records -------------------------------------------------------------------

json to_json(const HSRecord& r) {
  json j{{"triplet_id", r.triplet_id},     {"run_index", r.run_index},   {"score", nullptr},
         {"reasoning", r.reasoning},       {"raw_response", r.raw_response}, {"latency_ms", r.latency_ms},
         {"model_id", r.model_id},         {"retries", r.retries}};
  if (r.score) j["score"] = *r.score;
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

HSRecord record_from_json(const json& j) {
  HSRecord r;
  try {
    r.triplet_id = j.at("triplet_id").get<std::string>();
    r.run_index = j.at("run_index").get<int>();
    if (j.contains("score") && !j["score"].is_null()) {
      const int s = j["score"].get<int>();
      if (s < 1 || s > 5) throw ScoreOutOfRange("stored score outside 1..5");
      r.score = s;
    }
    r.reasoning = j.value("reasoning", "");
    r.raw_response = j.value("raw_response", "");
    r.latency_ms = j.value("latency_ms", 0.0);
    r.model_id = j.value("model_id", "");
    r.retries = j.value("retries", 0);
    r.error = j.value("error", "");
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad HS record: ") + e.what());
  }
  return r;
}

std::vector<HSRecord> read_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    if (!fs::exists(path)) throw FileNotFound(path.string());
    throw IoError("cannot read " + path.string());
  }
  std::vector<HSRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ParseError(e.what(), lineno);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

void append_record(const fs::path& path, const HSRecord& r) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  out << to_json(r).dump() << '\n';
  if (!out) throw IoError("cannot append to " + path.string());
}

// --- clients -------------------------------------------------------------------

std::string StubClient::complete(const PromptBundle&, const std::vector<EncodedImage>& images) {
  std::lock_guard lock(mutex_);
  const std::size_t call = calls_++;
  std::vector<Role> order;
  for (const auto& im : images) order.push_back(im.role);
  orders_.push_back(std::move(order));
  if (fn_) return fn_(call);
  if (replies_.empty()) throw TransportError("stub client has no scripted replies");
  return replies_[call % replies_.size()];
}

std::size_t StubClient::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

std::vector<std::vector<Role>> StubClient::sent_orders() const {
  std::lock_guard lock(mutex_);
  return orders_;
}

std::string HeuristicStubClient::complete(const PromptBundle&, const std::vector<EncodedImage>& images) {
  const EncodedImage* gt = nullptr;
  const EncodedImage* sr = nullptr;
  for (const auto& im : images) {
    if (im.role == Role::GT) gt = &im;
    if (im.role == Role::SR) sr = &im;
  }
  if (!gt || !sr) throw TransportError("heuristic stub needs GT and SR images");
  const Image g = decode_image_bytes(gt->png);
  Image s = decode_image_bytes(sr->png);
  if (!s.same_shape(g)) s = resize(s, g.height(), g.width(), Interp::Area);
  double mad = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) mad += std::abs(g.data()[i] - s.data()[i]);
  mad /= static_cast<double>(g.size());
  const int score = mad < 0.02 ? 5 : mad < 0.05 ? 4 : mad < 0.1 ? 3 : mad < 0.2 ? 2 : 1;
  return json{{"score", score}, {"reasoning", "mean absolute SR-GT difference " + util::fixed(mad, 4)}}.dump();
}

ChatCompletionsClient::ChatCompletionsClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.api_key.empty()) throw ValidationError("chat-completions client requires an API key");
}

json ChatCompletionsClient::request_body(const PromptBundle& prompt, const std::vector<EncodedImage>& images) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", prompt.system_text}});
  for (const auto& im : images)
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:image/png;base64," + util::base64_encode(im.png)}}}});
  return json{{"model", prompt.model_id},
              {"temperature", prompt.temperature},
              {"messages", json::array({{{"role", "user"}, {"content", content}}})}};
}

std::string ChatCompletionsClient::complete(const PromptBundle& prompt, const std::vector<EncodedImage>& images) {
  auto [host, path] = adapters::split_url(cfg_.endpoint);
  httplib::Client cli(host);
  cli.set_connection_timeout(cfg_.timeout_s);
  cli.set_read_timeout(cfg_.timeout_s);
  httplib::Headers headers{{"Authorization", "Bearer " + cfg_.api_key}};
  auto res = cli.Post(path, headers, request_body(prompt, images).dump(), "application/json");
  if (!res) throw TransportError("MLLM endpoint unreachable: " + httplib::to_string(res.error()));
  if (res->status == 429) {
    double after = 5.0;
    if (res->has_header("Retry-After")) {
      try {
        after = std::stod(res->get_header_value("Retry-After"));
      } catch (...) {
      }
    }
    throw RateLimited("MLLM endpoint rate limited (HTTP 429)", after);
  }
  if (res->status >= 500) throw TransportError("MLLM endpoint returned HTTP " + std::to_string(res->status));
  if (res->status != 200)
    throw Error("MLLM endpoint rejected the request: HTTP " + std::to_string(res->status) + " " + res->body);
  try {
    const json j = json::parse(res->body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError(std::string("unexpected MLLM response shape: ") + e.what());
  }
}

TokenBucket::TokenBucket(double rate, double burst)
    : rate_(rate), capacity_(std::max(burst, 1.0)), tokens_(std::max(burst, 1.0)),
      last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
  if (rate_ <= 0.0) return;
  for (;;) {
    double wait_s;
    {
      std::lock_guard lock(mutex_);
      const auto now = std::chrono::steady_clock::now();
      tokens_ = std::min(capacity_, tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
      last_ = now;
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      wait_s = (1.0 - tokens_) / rate_;
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
  }
}

// --- scoring -------------------------------------------------------------------

namespace {

Image fit_long_side(const Image& img, int max_side) {
  const int longest = std::max(img.height(), img.width());
  if (max_side <= 0 || longest <= max_side) return img;
  const double f = static_cast<double>(max_side) / longest;
  return resize(img, std::max(1, static_cast<int>(std::lround(img.height() * f))),
                std::max(1, static_cast<int>(std::lround(img.width() * f))), Interp::Area);
}

void default_sleep(double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); }

}  // namespace

std::vector<EncodedImage> encode_triplet(const Image& gt, const Image& lr, const Image& sr, const PromptBundle& prompt,
                                         int max_side) {
  std::vector<EncodedImage> out;
  for (Role r : prompt.image_order) {
    const Image& src = r == Role::GT ? gt : r == Role::LR ? lr : sr;
    out.push_back({r, encode_png(fit_long_side(src, max_side))});
  }
  return out;
}

std::vector<HSRecord> score_triplet(MllmClient& client, const std::string& triplet_id,
                                    const std::vector<EncodedImage>& images, const PromptBundle& prompt,
                                    const ScoreOptions& opts, int first_run) {
  if (opts.runs < 1) throw ValidationError("runs must be >= 1");
  const auto sleep = opts.sleep ? opts.sleep : default_sleep;
  std::vector<HSRecord> out;
  for (int run = first_run; run < first_run + opts.runs; ++run) {
    HSRecord rec;
    rec.triplet_id = triplet_id;
    rec.run_index = run;
    rec.model_id = prompt.model_id;
    for (int attempt = 0; attempt <= prompt.max_retries; ++attempt) {
      std::string reply;
      const auto t0 = std::chrono::steady_clock::now();
      for (int transport = 0;; ++transport) {
        try {
          reply = client.complete(prompt, images);
          break;
        } catch (const RateLimited& e) {
          if (transport >= opts.transport_retries) throw;
          log::warn(triplet_id + ": rate limited, retrying in " + util::fixed(e.retry_after_s(), 1) + " s");
          sleep(e.retry_after_s());
        } catch (const TransportError& e) {
          if (transport >= opts.transport_retries) throw;
          sleep(opts.backoff_s * std::pow(2.0, transport));
        }
      }
      rec.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      rec.raw_response = reply;
      rec.retries = attempt;
      try {
        auto parsed = parse_response(reply);
        rec.score = parsed.score;
        rec.reasoning = std::move(parsed.reasoning);
        rec.error.clear();
        break;
      } catch (const ResponseError& e) {
        rec.error = e.what();
        log::debug(triplet_id + " run " + std::to_string(run) + ": unparseable reply (" + e.what() + ")");
      }
    }
    if (!rec.ok()) log::warn(triplet_id + " run " + std::to_string(run) + " failed: " + rec.error);
    out.push_back(std::move(rec));
  }
  return out;
}

void score_batch(MllmClient& client, const EvalManifest& manifest, const std::vector<std::string>& ids,
                 const PromptBundle& prompt, const BatchOptions& opts,
                 const std::function<void(const HSRecord&)>& sink,
                 const std::function<bool(const std::string&, int)>& done) {
  TokenBucket bucket(opts.requests_per_s, opts.burst);
  std::mutex sink_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mutex;

  auto worker = [&] {
    for (;;) {
      {
        std::lock_guard lock(err_mutex);
        if (first_error) return;
      }
      const std::size_t i = next++;
      if (i >= ids.size()) return;
      try {
        const auto& t = manifest.at(ids[i]);
        std::vector<int> pending;
        for (int r = 0; r < opts.score.runs; ++r)
          if (!done || !done(t.id, r)) pending.push_back(r);
        if (pending.empty()) continue;
        const auto images = encode_triplet(decode_image(manifest.resolve(t.gt)), decode_image(manifest.resolve(t.lr)),
                                           decode_image(manifest.resolve(t.sr)), prompt, opts.score.max_side);
        for (int r : pending) {
          bucket.acquire();
          ScoreOptions one = opts.score;
          one.runs = 1;
          auto recs = score_triplet(client, t.id, images, prompt, one, r);
          std::lock_guard lock(sink_mutex);
          for (const auto& rec : recs) sink(rec);
        }
      } catch (...) {
        std::lock_guard lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const int n = std::max(1, std::min<int>(opts.max_in_flight, static_cast<int>(ids.size())));
  std::vector<std::thread> pool;
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// --- statistics ------------------------------------------------------------------

double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) throw UndefinedStatistic("quantile of empty data");
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::map<std::string, double> per_image_mean(const std::vector<HSRecord>& records) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& r : records)
    if (r.ok()) {
      auto& [s, n] = acc[r.triplet_id];
      s += *r.score;
      ++n;
    }
  std::map<std::string, double> out;
  for (const auto& [id, sn] : acc) out[id] = sn.first / sn.second;
  return out;
}

std::vector<HSStats> hs_statistics(const std::vector<HSRecord>& records,
                                   const std::map<std::string, std::string>& model_of) {
  if (records.empty()) throw ValidationError("hs_statistics: no records");
  std::map<std::string, HSStats> by_model;
  std::map<std::string, std::vector<const HSRecord*>> by_triplet;
  for (const auto& r : records) by_triplet[r.triplet_id].push_back(&r);

  std::map<std::string, std::map<int, std::size_t>> counts;
  std::map<std::string, std::pair<double, std::size_t>> image_means;
  for (const auto& [id, recs] : by_triplet) {
    auto it = model_of.find(id);
    const std::string model = it == model_of.end() ? "" : it->second;
    auto& st = by_model[model];
    st.model_tag = model;
    double sum = 0.0;
    int n = 0;
    for (const auto* r : recs) {
      if (!r->ok()) {
        ++st.failed;
        continue;
      }
      sum += *r->score;
      ++n;
      ++st.runs;
      ++counts[model][*r->score];
    }
    if (n == 0) continue;
    ++st.images;
    image_means[model].first += sum / n;
    ++image_means[model].second;
  }

  std::vector<HSStats> out;
  for (auto& [model, st] : by_model) {
    if (st.images == 0) throw ValidationError("hs_statistics: model '" + model + "' has no scored records");
    st.mean_score = image_means[model].first / static_cast<double>(image_means[model].second);
    for (int s = 1; s <= 5; ++s)
      st.pct[s] = 100.0 * static_cast<double>(counts[model][s]) / static_cast<double>(st.runs);
    out.push_back(st);
  }
  return out;
}

StabilityReport stability_report(const std::vector<HSRecord>& records) {
  std::map<std::string, std::vector<const HSRecord*>> by_triplet;
  for (const auto& r : records)
    if (r.ok()) by_triplet[r.triplet_id].push_back(&r);
  if (by_triplet.empty()) throw ValidationError("stability_report: no scored records");

  StabilityReport rep;
  std::map<int, std::vector<double>> per_run;
  for (const auto& [id, recs] : by_triplet) {
    if (recs.size() < 2)
      throw ValidationError("stability_report: triplet '" + id + "' has fewer than 2 scored runs");
    StabilityReport::Image im;
    im.triplet_id = id;
    double sum = 0.0;
    for (const auto* r : recs) sum += *r->score;
    im.mean = sum / static_cast<double>(recs.size());
    for (const auto* r : recs) {
      const double d = *r->score - im.mean;
      im.diffs[r->run_index] = d;
      per_run[r->run_index].push_back(d);
    }
    rep.images.push_back(std::move(im));
  }
  for (auto& [run, diffs] : per_run) {
    std::sort(diffs.begin(), diffs.end());
    rep.runs.push_back({run, diffs.size(), diffs.front(), quantile_sorted(diffs, 0.25), quantile_sorted(diffs, 0.5),
                        quantile_sorted(diffs, 0.75), diffs.back()});
  }
  return rep;
}

namespace {

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace

std::string render_stats_table(const std::vector<HSStats>& stats) {
  std::size_t w0 = std::string("Method").size();
  for (const auto& s : stats) w0 = std::max(w0, s.model_tag.size());
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Method", "Mean Score", "1", "2", "3", "4", "5"});
  for (const auto& s : stats) {
    std::vector<std::string> row{s.model_tag, util::fixed(s.mean_score, 2)};
    for (int k = 1; k <= 5; ++k) row.push_back(util::fixed(s.pct.count(k) ? s.pct.at(k) : 0.0, 1));
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> widths(7, 0);
  widths[0] = w0;
  for (const auto& r : rows)
    for (std::size_t c = 1; c < r.size(); ++c) widths[c] = std::max(widths[c], r[c].size());
  std::string out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string line;
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      if (c) line += " | ";
      line += c + 1 == rows[i].size() ? rows[i][c] : pad(rows[i][c], widths[c]);
    }
    out += line + "\n";
    if (i == 0) {
      std::string rule;
      for (std::size_t c = 0; c < widths.size(); ++c) {
        if (c) rule += "-+-";
        rule += std::string(widths[c], '-');
      }
      out += rule + "\n";
    }
  }
  return out;
}

std::string render_stats_csv(const std::vector<HSStats>& stats) {
  std::string out = "model,mean_score,pct_1,pct_2,pct_3,pct_4,pct_5,images,runs,failed\n";
  for (const auto& s : stats) {
    out += util::csv_escape(s.model_tag) + "," + util::fixed(s.mean_score, 4);
    for (int k = 1; k <= 5; ++k) out += "," + util::fixed(s.pct.count(k) ? s.pct.at(k) : 0.0, 2);
    out += "," + std::to_string(s.images) + "," + std::to_string(s.runs) + "," + std::to_string(s.failed) + "\n";
  }
  return out;
}

}  // namespace hallucheck::hs
