#include "hallucheck/cli.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include "hallucheck/adapters.hpp"
#include "hallucheck/align.hpp"
#include "hallucheck/analysis.hpp"
#include "hallucheck/degrade.hpp"
#include "hallucheck/hs.hpp"
#include "hallucheck/log.hpp"
#include "hallucheck/result_store.hpp"
#include "hallucheck/study.hpp"
#include "hallucheck/util.hpp"
#include "hallucheck/vit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hallucheck::cli {

namespace {

std::ostream& out_of(const Common& c) { return c.out ? *c.out : std::cout; }

/// Maps exceptions onto the exit-code contract: bad input or configuration is
/// a usage error (2); anything that fails mid-run leaves partial output (1).
template <class F>
int guarded(const char* cmd, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    log::error(std::string(cmd) + ": " + e.what());
    return kUsage;
  } catch (const ParseError& e) {
    log::error(std::string(cmd) + ": " + e.what());
    return kUsage;
  } catch (const FileNotFound& e) {
    log::error(std::string(cmd) + ": " + e.what());
    return kUsage;
  } catch (const Unavailable& e) {
    log::error(std::string(cmd) + ": " + e.what());
    return kUsage;
  } catch (const json::exception& e) {
    log::error(std::string(cmd) + ": bad JSON: " + e.what());
    return kUsage;
  } catch (const std::exception& e) {
    log::error(std::string(cmd) + " failed: " + e.what());
    return kPartial;
  }
}

fs::path rebase(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw FileNotFound(p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    bool ok = k.starts_with('_');  // comment keys
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ValidationError(where + ": unknown key '" + k + "'");
  }
}

int resolve_workers(int requested, const ToolConfig& cfg) {
  const int w = requested > 0 ? requested : cfg.workers;
  if (w < 1) throw ValidationError("workers must be >= 1");
  return w;
}

/// Latest record per (triplet, run), in order of first appearance.
std::vector<hs::HSRecord> latest_hs(const std::vector<hs::HSRecord>& recs) {
  std::map<std::pair<std::string, int>, std::size_t> pos;
  std::vector<hs::HSRecord> out;
  for (const auto& r : recs) {
    auto [it, fresh] = pos.emplace(std::pair{r.triplet_id, r.run_index}, out.size());
    if (fresh) out.push_back(r);
    else out[it->second] = r;
  }
  return out;
}

std::map<std::string, std::string> model_map(const EvalManifest& m) {
  std::map<std::string, std::string> out;
  for (const auto& t : m.entries) out[t.id] = t.model_tag.empty() ? "unknown" : t.model_tag;
  return out;
}

std::string meta_suffix(const std::map<std::string, std::string>& meta) {
  if (meta.empty()) return {};
  std::string s = "[";
  for (const auto& [k, v] : meta) s += (s.size() > 1 ? "," : "") + k + "=" + v;
  return s + "]";
}

}  // namespace

// --- config -------------------------------------------------------------------------

ToolConfig tool_config_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ValidationError("tool config must be a JSON object");
  if (j.contains("api_key")) throw ValidationError("tool config: API keys are read from the environment only");
  check_keys(j, {"backends", "layers", "ssd", "metric_endpoints", "mllm", "workers", "requests_per_s", "output_root"},
             "tool config");
  ToolConfig c;
  if (j.contains("backends")) {
    for (const auto& [family, b] : j["backends"].items()) {
      check_keys(b, {"kind", "weights", "seed", "patch", "dim", "depth"}, "backends." + family);
      BackendSpec s;
      s.kind = b.value("kind", s.kind);
      if (s.kind != "vit" && s.kind != "projection")
        throw ValidationError("backends." + family + ": kind must be vit or projection");
      if (b.contains("weights")) s.weights = rebase(b["weights"].get<std::string>(), base_dir);
      s.seed = b.value("seed", s.seed);
      s.patch = b.value("patch", s.patch);
      s.dim = b.value("dim", s.dim);
      s.depth = b.value("depth", s.depth);
      c.backends[family] = s;
    }
  }
  c.layers = j.value("layers", c.layers);
  features::layer_preset(c.layers);  // rejects unknown names early
  if (j.contains("ssd")) {
    const auto& s = j["ssd"];
    check_keys(s, {"tagger", "segmenter"}, "ssd");
    SsdSpec spec;
    const auto& t = s.at("tagger");
    if (t.contains("url")) spec.tagger_url = t["url"].get<std::string>();
    else spec.stub_tags = t.at("stub").get<std::vector<std::string>>();
    const auto& g = s.at("segmenter");
    if (g.contains("url")) spec.segmenter_url = g["url"].get<std::string>();
    else spec.segmenter_kind = g.at("kind").get<std::string>();
    c.ssd = spec;
  }
  if (j.contains("metric_endpoints"))
    c.metric_endpoints = j["metric_endpoints"].get<std::map<std::string, std::string>>();
  if (j.contains("mllm")) {
    const auto& m = j["mllm"];
    check_keys(m, {"endpoint", "model", "api_key_env"}, "mllm");
    c.mllm_endpoint = m.value("endpoint", c.mllm_endpoint);
    c.mllm_model = m.value("model", c.mllm_model);
    c.api_key_env = m.value("api_key_env", c.api_key_env);
  }
  c.workers = j.value("workers", c.workers);
  c.requests_per_s = j.value("requests_per_s", c.requests_per_s);
  if (c.workers < 1) throw ValidationError("tool config: workers must be >= 1");
  if (!(c.requests_per_s > 0)) throw ValidationError("tool config: requests_per_s must be > 0");
  if (j.contains("output_root")) c.output_root = rebase(j["output_root"].get<std::string>(), base_dir);
  return c;
}

ToolConfig load_tool_config(const std::optional<fs::path>& explicit_path) {
  fs::path p;
  if (explicit_path && !explicit_path->empty()) p = *explicit_path;
  else if (const char* env = std::getenv("HALLUCHECK_CONFIG"); env && *env) p = env;
  if (p.empty()) return {};
  ToolConfig c = tool_config_from_json(read_json_file(p), p.parent_path());
  c.source = p;
  return c;
}

metrics::SuiteResources suite_resources(const ToolConfig& cfg, const std::vector<std::string>& names) {
  metrics::SuiteResources res;
  res.interm_layers = features::layer_preset(cfg.layers);
  std::set<std::string> families;
  for (const auto& n : names)
    for (const char* f : {"dino", "clip"})
      if (n.rfind(std::string(f) + "_", 0) == 0) families.insert(f);
  for (const auto& f : families) {
    auto it = cfg.backends.find(f);
    if (it == cfg.backends.end()) continue;
    const auto& s = it->second;
    if (s.kind == "projection") {
      res.backends[f] = std::make_shared<features::ProjectionBackend>(
          features::ProjectionBackend::Options{f + "-projection", s.patch, s.dim, s.depth, s.seed});
    } else {
      if (s.weights.empty()) throw ValidationError("backends." + f + ": 'weights' is required for kind vit");
      if (!fs::exists(s.weights)) throw FileNotFound(s.weights.string());
      res.backends[f] = std::make_shared<features::VitBackend>(features::VitBackend::load(f, s.weights));
    }
  }
  const bool wants_ssd = std::find(names.begin(), names.end(), "ssd") != names.end();
  if (wants_ssd && cfg.ssd) {
    const auto& s = *cfg.ssd;
    if (!s.tagger_url.empty()) res.tagger = std::make_shared<adapters::HttpTagger>(adapters::HttpEndpoint{s.tagger_url});
    else res.tagger = std::make_shared<adapters::StubTagger>(s.stub_tags);
    if (!s.segmenter_url.empty()) {
      res.segmenter = std::make_shared<adapters::HttpSegmenter>(adapters::HttpEndpoint{s.segmenter_url});
    } else if (s.segmenter_kind == "uniform") {
      res.segmenter = std::make_shared<adapters::UniformSegmenter>();
    } else if (s.segmenter_kind == "onehot") {
      res.segmenter = std::make_shared<adapters::OneHotSegmenter>();
    } else if (s.segmenter_kind == "softluma") {
      res.segmenter = std::make_shared<adapters::SoftLumaSegmenter>();
    } else {
      throw ValidationError("ssd.segmenter.kind must be uniform, onehot or softluma");
    }
  }
  return res;
}

metrics::MetricRegistry build_registry(const ToolConfig& cfg, const metrics::SuiteResources& res) {
  auto reg = metrics::default_registry(res);
  for (const auto& [name, url] : cfg.metric_endpoints) {
    if (!reg.known(name)) throw ValidationError("metric_endpoints: '" + name + "' is not a known metric");
    const auto& e = reg.at(name);
    if (e.available()) throw ValidationError("metric_endpoints: '" + name + "' is built in");
    const auto kind = e.kind;
    adapters::HttpEndpoint ep{url};
    reg.register_metric(
        name,
        [ep, name, kind](const metrics::MetricInput& in) {
          return adapters::http_scalar_metric(ep, name, *in.sr, kind == metrics::MetricKind::FR ? in.gt : nullptr);
        },
        kind, e.direction);
  }
  return reg;
}

SourceArg parse_source(const std::string& s) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i)
    if (i == s.size() || s[i] == ':') {
      parts.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  if (parts.size() < 2 || parts.size() > 3 || parts[0].empty())
    throw ValidationError("source '" + s + "' must look like DIR:COUNT[:TAG]");
  SourceArg a;
  a.dir = parts[0];
  try {
    std::size_t used = 0;
    a.count = std::stoi(parts[1], &used);
    if (used != parts[1].size()) throw std::invalid_argument("trailing");
  } catch (const std::logic_error&) {
    throw ValidationError("source '" + s + "': COUNT must be an integer");
  }
  if (a.count < 1) throw ValidationError("source '" + s + "': COUNT must be >= 1");
  if (parts.size() == 3) a.tag = parts[2];
  return a;
}

// --- evaluate -----------------------------------------------------------------------

int cmd_evaluate(const EvaluateArgs& a, const ToolConfig& cfg, const Common& c) {
  return guarded("evaluate", [&] {
    auto& o = out_of(c);
    if (a.metrics.empty()) throw ValidationError("no metrics requested");
    if (a.store.empty()) throw ValidationError("an output store path is required");
    const EvalManifest m = load_manifest(a.manifest);
    const int workers = resolve_workers(a.workers, cfg);

    // Name check first so a typo fails before any backend is loaded.
    metrics::check_metric_names(build_registry(cfg, {}), a.metrics);

    std::set<std::pair<std::string, std::string>> have;
    if (fs::exists(a.store))
      for (const auto& r : ResultStore::read(a.store))
        if (r.meta.empty()) have.insert({r.triplet_id, r.metric_name});

    std::vector<std::pair<const ImageTriplet*, std::vector<std::string>>> todo;
    std::size_t pending = 0;
    for (const auto& t : m.entries) {
      std::vector<std::string> missing;
      for (const auto& name : a.metrics)
        if (!have.count({t.id, name})) missing.push_back(name);
      pending += missing.size();
      if (!missing.empty()) todo.emplace_back(&t, std::move(missing));
    }
    o << "evaluate: " << m.entries.size() << " triplets x " << a.metrics.size() << " metrics, "
      << (m.entries.size() * a.metrics.size() - pending) << " stored, " << pending << " to compute"
      << " (workers " << workers << ", store " << a.store.string() << ")\n";
    if (c.dry_run) return static_cast<int>(kOk);

    ResultStore store(a.store);
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> computed{0};
    std::mutex mu;
    std::set<std::string> skipped;
    std::exception_ptr first_error;
    std::atomic<bool> stop{false};

    auto work = [&] {
      try {
        // feature backends are single-threaded, so each worker owns a set
        const auto res = suite_resources(cfg, a.metrics);
        const auto reg = build_registry(cfg, res);
        for (std::size_t i; !stop && (i = next++) < todo.size();) {
          const auto& [t, names] = todo[i];
          const auto v = metrics::run_metric_suite(*t, m, {names}, reg);
          for (const auto& name : names) {
            auto it = v.values.find(name);
            if (it == v.values.end()) continue;
            store.append({t->id, name, it->second, {}});
            ++computed;
          }
          std::lock_guard lk(mu);
          for (const auto& [name, why] : v.skipped)
            if (skipped.insert(name).second) log::warn("metric '" + name + "' skipped: " + why);
          log::debug("evaluated " + t->id);
        }
      } catch (...) {
        std::lock_guard lk(mu);
        if (!first_error) first_error = std::current_exception();
        stop = true;
      }
    };
    if (!todo.empty()) {
      std::vector<std::thread> pool;
      for (int w = 1; w < std::min<int>(workers, static_cast<int>(todo.size())); ++w) pool.emplace_back(work);
      work();
      for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    o << "evaluate: computed " << computed.load() << " values";
    if (!skipped.empty()) {
      o << "; skipped:";
      for (const auto& s : skipped) o << " " << s;
    }
    o << "\n";
    return static_cast<int>(skipped.empty() ? kOk : kPartial);
  });
}

// --- hs -------------------------------------------------------------------------------

int cmd_hs(const HsArgs& a, const ToolConfig& cfg, const Common& c) {
  return guarded("hs", [&] {
    auto& o = out_of(c);
    if (a.runs < 1) throw ValidationError("runs must be >= 1");
    if (a.out.empty()) throw ValidationError("an output records path is required");
    if (a.max_side < 16) throw ValidationError("max_side must be >= 16");
    const EvalManifest m = load_manifest(a.manifest);
    const int workers = resolve_workers(a.workers, cfg);

    hs::PromptConfig pc;
    if (!cfg.mllm_model.empty()) pc.model_id = cfg.mllm_model;
    const auto prompt = hs::build_prompt(pc);

    const bool live = a.client == "live";
    if (!live && a.client != "stub") throw ValidationError("client must be stub or live");
    std::string key;
    if (live) {
      const char* env = std::getenv(cfg.api_key_env.c_str());
      if (!env || !*env) throw ValidationError("live scoring needs an API key in $" + cfg.api_key_env);
      key = env;
    }

    std::set<std::pair<std::string, int>> done;
    if (fs::exists(a.out))
      for (const auto& r : latest_hs(hs::read_records(a.out)))
        if (r.ok()) done.insert({r.triplet_id, r.run_index});
    std::size_t pending = 0;
    for (const auto& t : m.entries)
      for (int r = 0; r < a.runs; ++r) pending += done.count({t.id, r}) ? 0 : 1;

    o << "hs: " << m.entries.size() << " triplets x " << a.runs << " runs, " << pending << " requests pending ("
      << (live ? "live " + prompt.model_id + " at " + cfg.mllm_endpoint : std::string("stub client")) << ")\n";
    if (c.dry_run) return static_cast<int>(kOk);

    std::unique_ptr<hs::MllmClient> client;
    if (live) client = std::make_unique<hs::ChatCompletionsClient>(hs::HttpClientConfig{cfg.mllm_endpoint, key});
    else client = std::make_unique<hs::HeuristicStubClient>();

    hs::BatchOptions bo;
    bo.score.runs = a.runs;
    bo.score.max_side = a.max_side;
    bo.max_in_flight = workers;
    bo.requests_per_s = live ? cfg.requests_per_s : 1e9;
    bo.burst = live ? std::max(1.0, cfg.requests_per_s * 2) : 1e9;
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    std::vector<std::string> ids;
    for (const auto& t : m.entries) ids.push_back(t.id);
    hs::score_batch(
        *client, m, ids, prompt, bo,
        [&](const hs::HSRecord& rec) {
          hs::HSRecord r = rec;
          if (!live) {
            // offline replies take no time worth recording and keep files reproducible
            r.latency_ms = 0.0;
            r.model_id = "stub-heuristic";
          }
          hs::append_record(a.out, r);
        },
        [&](const std::string& id, int run) { return done.count({id, run}) > 0; });

    const auto records = latest_hs(hs::read_records(a.out));
    const auto stats = hs::hs_statistics(records, model_map(m));
    const auto table = hs::render_stats_table(stats);
    o << table;
    if (!a.stats.empty()) {
      if (a.stats.has_parent_path()) fs::create_directories(a.stats.parent_path());
      std::ofstream(a.stats) << table;
    }
    std::size_t failed = 0;
    for (const auto& r : records) failed += r.ok() ? 0 : 1;
    if (failed) log::warn(std::to_string(failed) + " runs failed and were excluded from the statistics");
    return static_cast<int>(failed ? kPartial : kOk);
  });
}

// --- correlate ------------------------------------------------------------------------

int cmd_correlate(const CorrelateArgs& a, const ToolConfig& cfg, const Common& c) {
  (void)cfg;
  return guarded("correlate", [&] {
    auto& o = out_of(c);
    if (a.stores.empty() && a.hs.empty()) throw ValidationError("no stores or HS files given");
    if (a.out.empty()) throw ValidationError("an output directory is required");
    if (a.group_by != "combined" && a.group_by != "model" && a.group_by != "dataset")
      throw ValidationError("group-by must be combined, model or dataset");
    std::optional<EvalManifest> m;
    if (!a.manifest.empty()) m = load_manifest(a.manifest, {.check_dimensions = false});
    if (a.group_by != "combined" && !m) throw ValidationError("grouping by " + a.group_by + " needs --manifest");

    std::vector<analysis::ScoreSeries> series;
    std::map<std::string, std::size_t> index;
    std::vector<ResultRecord> records;
    for (const auto& p : a.stores) {
      if (!fs::exists(p)) throw FileNotFound(p.string());
      for (const auto& r : ResultStore::read(p)) {
        const auto name = r.metric_name + meta_suffix(r.meta);
        auto [it, fresh] = index.emplace(name, series.size());
        if (fresh) series.push_back({name, {}});
        auto& s = series[it->second];
        if (s.values.count(r.triplet_id))
          throw ValidationError("metric '" + name + "' for triplet '" + r.triplet_id + "' appears twice");
        s.values[r.triplet_id] = r.value;
        if (r.meta.empty()) records.push_back(r);
      }
    }
    std::vector<hs::HSRecord> hs_records;
    for (const auto& p : a.hs) {
      if (!fs::exists(p)) throw FileNotFound(p.string());
      const auto recs = hs::read_records(p);
      hs_records.insert(hs_records.end(), recs.begin(), recs.end());
    }
    hs_records = latest_hs(hs_records);
    if (!a.hs.empty()) {
      analysis::ScoreSeries s{"hs", hs::per_image_mean(hs_records)};
      for (const auto& [id, v] : s.values) records.push_back({id, "hs", v, {}});
      if (index.count("hs")) throw ValidationError("a store already holds a metric named 'hs'");
      series.push_back(std::move(s));
    }

    // Every series must cover the same triplets.
    const auto& ref = series.front();
    for (const auto& s : series) {
      for (const auto& [id, _] : s.values)
        if (!ref.values.count(id))
          throw ValidationError("id sets differ: '" + id + "' is in " + s.name + " but not in " + ref.name);
      for (const auto& [id, _] : ref.values)
        if (!s.values.count(id))
          throw ValidationError("id sets differ: '" + id + "' is in " + ref.name + " but not in " + s.name);
    }
    if (m)
      for (const auto& [id, _] : ref.values) m->at(id);  // every id must be in the manifest

    std::map<std::string, std::vector<std::string>> groups;
    if (m && a.group_by != "combined")
      for (const auto& [id, _] : ref.values) {
        const auto& t = m->at(id);
        groups[a.group_by == "model" ? t.model_tag : t.dataset_tag].push_back(id);
      }

    o << "correlate: " << series.size() << " series over " << ref.values.size() << " triplets; groups: combined";
    for (const auto& [g, ids] : groups) o << ", " << g << " (" << ids.size() << ")";
    o << "; report -> " << a.out.string() << "\n";
    if (c.dry_run) return static_cast<int>(kOk);

    analysis::ReportInputs in;
    in.title = a.title;
    if (series.size() >= 2) in.correlations = analysis::correlation_matrix(series);
    else log::warn("only one series: no correlation matrix");
    const auto model_of = m ? model_map(*m) : std::map<std::string, std::string>{};
    if (m && !records.empty()) in.aggregate = analysis::aggregate_table(records, *m, analysis::GroupBy::Model);
    if (!hs_records.empty()) {
      std::map<std::string, std::string> tags = model_of;
      if (!m)
        for (const auto& r : hs_records) tags[r.triplet_id] = "all";
      in.hs_stats = hs::hs_statistics(hs_records, tags);
    }
    if (!a.ratings.empty()) {
      if (a.hs.empty()) throw ValidationError("--ratings needs HS records to compare against");
      const auto table = a.ratings.extension() == ".csv" ? analysis::rater_table_from_csv(a.ratings)
                                                         : analysis::rater_table_from_jsonl(a.ratings);
      in.deviations = analysis::rater_deviations(table, {"MLLM", hs::per_image_mean(hs_records)});
    }
    auto files = analysis::render_report(in, a.out);

    for (const auto& [g, ids] : groups) {
      std::vector<analysis::ScoreSeries> sub;
      for (const auto& s : series) {
        analysis::ScoreSeries t{s.name, {}};
        for (const auto& id : ids) t.values[id] = s.values.at(id);
        sub.push_back(std::move(t));
      }
      analysis::ReportInputs gi;
      gi.title = a.title + ": " + g;
      if (sub.size() >= 2) gi.correlations = analysis::correlation_matrix(sub);
      for (const auto& st : in.hs_stats)
        if (st.model_tag == g) gi.hs_stats.push_back(st);
      const auto written = analysis::render_report(gi, a.out / "groups" / g);
      files.insert(files.end(), written.begin(), written.end());
    }
    if (in.correlations)
      for (const auto& u : in.correlations->undefined) log::warn("undefined correlation: " + u);
    o << "correlate: wrote " << files.size() << " files\n";
    return static_cast<int>(kOk);
  });
}

// --- degrade --------------------------------------------------------------------------

int cmd_degrade(const DegradeArgs& a, const ToolConfig& cfg, const Common& c) {
  return guarded("degrade", [&] {
    auto& o = out_of(c);
    if (a.sources.empty()) throw ValidationError("at least one --source DIR:COUNT[:TAG] is required");
    if (a.config.empty()) throw ValidationError("a degradation config is required");
    if (a.out.empty()) throw ValidationError("an output directory is required");
    auto dc = degrade::load_config(a.config);
    if (c.seed) dc.seed = *c.seed;
    if (a.crop_size) dc.crop_size = *a.crop_size;
    dc.validate();
    std::vector<degrade::SourceSpec> sources;
    for (const auto& s : a.sources) {
      const auto p = parse_source(s);
      sources.push_back({p.dir, p.count, p.tag});
    }
    const auto plan = degrade::plan_dataset(sources, dc, a.held_out);
    o << "degrade: config " << dc.name << ", seed " << dc.seed << ", crop " << dc.crop_size << " -> "
      << dc.crop_size / dc.out_scale << "\n";
    for (const auto& s : plan.sources)
      o << "  " << s.tag << ": " << s.count << " pairs from " << s.files.size() << " files (" << s.available
        << " crop positions)\n";
    o << "  total " << plan.total << ", held out " << plan.held_out << " -> " << a.out.string() << "\n";
    if (c.dry_run) return static_cast<int>(kOk);
    const auto res = degrade::build_dataset(sources, dc, {a.out, a.held_out, resolve_workers(a.workers, cfg)});
    o << "degrade: wrote " << res.all.entries.size() << " pairs (" << res.train.entries.size() << " train, "
      << res.val.entries.size() << " val)\n";
    return static_cast<int>(kOk);
  });
}

// --- finetune -------------------------------------------------------------------------

int cmd_finetune(const FinetuneArgs& a, const ToolConfig& cfg, const Common& c) {
  (void)cfg;
  return guarded("finetune", [&] {
    auto& o = out_of(c);
    if (a.config.empty()) throw ValidationError("a finetune config is required");
    const json j = read_json_file(a.config);
    check_keys(j, {"adapter", "data", "reward", "train", "toy", "output", "state_every", "reward_seed"},
               a.config.string());
    const fs::path base = a.config.parent_path();

    const std::string adapter_name = !a.adapter.empty() ? a.adapter : j.value("adapter", std::string("toy"));
    const auto spec = align::adapter_preset(adapter_name);
    spec.validate();
    auto reward = align::reward_config_from_json(j.value("reward", json{{"preset", "dino-st"}}));
    reward.validate();
    auto train = align::train_config_from_json(j.value("train", json::object()));
    if (a.steps) train.total_steps = *a.steps;
    if (c.seed) train.seed = *c.seed;
    train.validate();

    align::ToyAdapterOptions opts;
    if (j.contains("toy")) {
      const auto& t = j["toy"];
      check_keys(t, {"size", "scale", "hidden", "control", "lora_alpha", "seed"}, "toy");
      opts.size = t.value("size", opts.size);
      opts.scale = t.value("scale", opts.scale);
      opts.hidden = t.value("hidden", opts.hidden);
      opts.control = t.value("control", opts.control);
      opts.lora_alpha = t.value("lora_alpha", opts.lora_alpha);
      opts.seed = t.value("seed", opts.seed);
    }
    align::ToyAdapter adapter(spec, opts);  // non-toy samplers are Unavailable here

    const fs::path out = !a.out.empty() ? a.out : rebase(j.value("output", std::string("finetune_out")), base);
    const int state_every = j.value("state_every", 20);
    const auto models = align::toy_reward_models(reward, j.value("reward_seed", std::uint64_t{0}));

    align::TrainData data;
    std::string data_desc;
    const json dj = j.value("data", json{{"synthetic", 16}});
    if (dj.is_string()) {
      const auto mp = rebase(dj.get<std::string>(), base);
      data = align::load_train_data(load_manifest(mp), adapter);
      data_desc = mp.string();
    } else {
      check_keys(dj, {"synthetic", "seed"}, "data");
      data = align::synthetic_train_data(dj.at("synthetic").get<int>(), adapter, dj.value("seed", std::uint64_t{5}));
      data_desc = "synthetic";
    }

    std::optional<align::TrainState> state;
    if (!a.resume.empty()) state = align::load_train_state(a.resume);

    o << "finetune: adapter " << spec.name << ", reward " << reward.semantic_backend << "-"
      << features::to_string(reward.token_kind) << " lambda " << util::shortest(reward.lambda) << ", "
      << train.total_steps << " steps, batch " << train.batch << "x" << train.grad_accum << ", lr "
      << util::shortest(train.lr) << ", " << data.lr.size() << " pairs (" << data_desc << ")";
    if (state) o << ", resuming at step " << state->next_step;
    o << " -> " << out.string() << "\n";
    if (c.dry_run) return static_cast<int>(kOk);

    fs::create_directories(out);
    align::FinetuneOutputs fo;
    fo.log_csv = out / "train_log.csv";
    fo.checkpoint = out / "lora.safetensors";
    fo.state = out / "train_state.json";
    fo.state_every = state_every;
    fo.on_step = [](const align::TrainLogRow& r) {
      if (r.step % 10 == 0)
        log::info("step " + std::to_string(r.step) + " reward " + util::fixed(r.reward_mean, 5) + " grad " +
                  util::fixed(r.grad_norm, 5));
    };
    const auto run = align::finetune(adapter, data, models, reward, train, fo, state ? &*state : nullptr);

    const double start = align::smoothed_reward(run.log, 0);
    const double end = align::smoothed_reward(run.log, run.log.size() - 1);
    json summary = {{"adapter", align::to_json(spec)},
                    {"reward", align::to_json(reward)},
                    {"train", align::to_json(train)},
                    {"steps", run.log.size()},
                    {"smoothed_reward_start", start},
                    {"smoothed_reward_end", end},
                    {"base_hash_before", run.base_hash_before},
                    {"base_hash_after", run.base_hash_after}};
    std::ofstream(out / "run.json") << summary.dump(2) << "\n";
    o << "finetune: smoothed reward " << util::fixed(start, 5) << " -> " << util::fixed(end, 5)
      << ", base weights unchanged\n";
    return static_cast<int>(kOk);
  });
}

// --- study ----------------------------------------------------------------------------

int cmd_study_serve(const StudyServeArgs& a, const ToolConfig& cfg, const Common& c) {
  (void)cfg;
  return guarded("study serve", [&] {
    auto& o = out_of(c);
    if (a.root.empty()) throw ValidationError("a study root directory is required");
    if (a.port < 0 || a.port > 65535) throw ValidationError("port out of range");
    if (!a.manifest.empty() && a.raters.empty()) throw ValidationError("creating a study needs --rater");
    if (c.dry_run) {
      o << "study serve: root " << a.root.string() << ", " << a.host << ":" << a.port;
      if (!a.manifest.empty()) o << ", create study from " << a.manifest.string() << " for " << a.raters.size() << " raters";
      o << "\n";
      return static_cast<int>(kOk);
    }
    study::StudyService svc(a.root);
    if (!a.manifest.empty()) {
      const auto id = svc.create_study(load_manifest(a.manifest), a.raters, c.seed.value_or(0));
      o << "study " << id << "\n";
    }
    study::StudyServer server(svc, {a.host, a.port});
    o << "serving " << svc.study_ids().size() << " studies on " << a.host << ":" << a.port << std::endl;
    server.run();
    return static_cast<int>(kOk);
  });
}

int cmd_study_export(const StudyExportArgs& a, const ToolConfig& cfg, const Common& c) {
  (void)cfg;
  return guarded("study export", [&] {
    auto& o = out_of(c);
    if (a.root.empty() || a.study_id.empty() || a.out.empty())
      throw ValidationError("study export needs --root, --study and --out");
    if (!fs::is_directory(a.root)) throw FileNotFound(a.root.string());
    study::StudyService svc(a.root);
    if (!svc.has_study(a.study_id)) throw ValidationError("unknown study '" + a.study_id + "'");
    const auto e = svc.export_ratings(a.study_id);
    o << "study export: " << e.records.size() << " ratings, " << e.missing.size() << " missing cells -> "
      << a.out.string() << "\n";
    if (c.dry_run) return static_cast<int>(kOk);
    study::write_export(e, a.out);
    return static_cast<int>(kOk);
  });
}

}  // namespace hallucheck::cli
