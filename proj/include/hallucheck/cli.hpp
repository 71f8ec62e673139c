#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hallucheck/suite.hpp"

namespace hallucheck::cli {

enum ExitCode : int { kOk = 0, kPartial = 1, kUsage = 2 };

/// A feature backend family entry. kind "vit" loads HF-layout safetensors;
/// "projection" is the weight-free stand-in.
struct BackendSpec {
  std::string kind = "vit";
  std::filesystem::path weights;
  std::uint64_t seed = 7;
  int patch = 16, dim = 64, depth = 12;
};

/// tagger: {"url"} or {"stub": [tags]}; segmenter: {"url"} or {"kind": uniform|onehot|softluma}.
struct SsdSpec {
  std::string tagger_url;
  std::vector<std::string> stub_tags;
  std::string segmenter_url;
  std::string segmenter_kind;
};

struct ToolConfig {
  std::map<std::string, BackendSpec> backends;  // "dino", "clip"
  std::string layers = "interm";
  std::optional<SsdSpec> ssd;
  std::map<std::string, std::string> metric_endpoints;  // external IQA metric -> URL
  std::string mllm_endpoint = "https://api.openai.com/v1/chat/completions";
  std::string mllm_model;      // empty = prompt default
  std::string api_key_env = "OPENAI_API_KEY";
  int workers = 1;
  double requests_per_s = 2.0;
  std::filesystem::path output_root = ".";
  std::filesystem::path source;  // file the config came from, empty for defaults
};

/// Relative paths in the file resolve against its directory. Paths are not
/// checked here; each subcommand validates what it uses.
ToolConfig tool_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
/// `explicit_path`, else $HALLUCHECK_CONFIG, else defaults.
ToolConfig load_tool_config(const std::optional<std::filesystem::path>& explicit_path = std::nullopt);

/// Builds suite resources for the requested metric names only, loading the
/// backends they need. Families absent from the config stay unfilled slots,
/// so their metrics are skipped rather than rejected.
metrics::SuiteResources suite_resources(const ToolConfig& cfg, const std::vector<std::string>& metrics);
/// default_registry plus configured HTTP endpoints for the external IQA slots.
metrics::MetricRegistry build_registry(const ToolConfig& cfg, const metrics::SuiteResources& res);

struct Common {
  bool dry_run = false;
  std::optional<std::uint64_t> seed;  // overrides seeds in config files
  std::ostream* out = nullptr;  // defaults to std::cout
};

struct EvaluateArgs {
  std::filesystem::path manifest;
  std::vector<std::string> metrics;
  std::filesystem::path store;
  int workers = 0;  // 0 = config
};
int cmd_evaluate(const EvaluateArgs& a, const ToolConfig& cfg, const Common& c = {});

struct HsArgs {
  std::filesystem::path manifest;
  int runs = 6;
  std::filesystem::path out;            // JSON-lines records
  std::filesystem::path stats;          // optional text table
  std::string client = "stub";          // stub | live
  int workers = 0;
  int max_side = 512;
};
int cmd_hs(const HsArgs& a, const ToolConfig& cfg, const Common& c = {});

struct CorrelateArgs {
  std::vector<std::filesystem::path> stores;  // metric result stores
  std::vector<std::filesystem::path> hs;      // HS record files
  std::filesystem::path manifest;             // needed for grouping and HS tables
  std::string group_by = "model";             // combined | model | dataset
  std::filesystem::path ratings;              // optional study export (jsonl or csv)
  std::filesystem::path out;
  std::string title = "Hallucination analysis";
};
int cmd_correlate(const CorrelateArgs& a, const ToolConfig& cfg, const Common& c = {});

struct DegradeArgs {
  std::vector<std::string> sources;  // DIR:COUNT[:TAG]
  std::filesystem::path config;      // degradation config JSON
  std::filesystem::path out;
  int held_out = 100;
  int workers = 0;
  std::optional<int> crop_size;
};
int cmd_degrade(const DegradeArgs& a, const ToolConfig& cfg, const Common& c = {});

struct FinetuneArgs {
  std::filesystem::path config;
  std::string adapter;               // overrides the config's adapter
  std::filesystem::path out;         // overrides the config's output
  std::filesystem::path resume;      // training state to continue from
  std::optional<int> steps;          // overrides train.total_steps
};
int cmd_finetune(const FinetuneArgs& a, const ToolConfig& cfg, const Common& c = {});

struct StudyServeArgs {
  std::filesystem::path root;
  std::string host = "127.0.0.1";
  int port = 8765;
  std::filesystem::path manifest;    // optional: create a study before serving
  std::vector<std::string> raters;
};
int cmd_study_serve(const StudyServeArgs& a, const ToolConfig& cfg, const Common& c = {});

struct StudyExportArgs {
  std::filesystem::path root;
  std::string study_id;
  std::filesystem::path out;
};
int cmd_study_export(const StudyExportArgs& a, const ToolConfig& cfg, const Common& c = {});

/// Parses "DIR:COUNT[:TAG]".
struct SourceArg {
  std::filesystem::path dir;
  int count = 0;
  std::string tag;
};
SourceArg parse_source(const std::string& s);

}  // namespace hallucheck::cli
