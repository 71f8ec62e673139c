// Command-line entry point. Argument parsing only; the subcommands live in
// the library (hallucheck/cli.hpp) so tests can drive them directly.

#include <iostream>

#include <CLI11.hpp>

#include "hallucheck/cli.hpp"
#include "hallucheck/log.hpp"

namespace cli = hallucheck::cli;

int main(int argc, char** argv) {
  CLI::App app{"hallucheck: hallucination-aware evaluation for image super-resolution"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "hallucheck 0.1.0");

  std::string config_path;
  bool dry_run = false, verbose = false, quiet = false;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Tool config JSON (default: $HALLUCHECK_CONFIG)");
  app.add_flag("--dry-run", dry_run, "Print the resolved plan and exit without side effects");
  app.add_option("--seed", seed, "Root seed for every random stream");
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  // evaluate
  cli::EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Run the metric suite over a manifest (resumes by default)");
  evaluate->add_option("--manifest", ev.manifest, "Triplet manifest (JSON lines)")->required();
  evaluate->add_option("--metrics", ev.metrics, "Metric names, e.g. mse psnr ssim dino_st_interm")
      ->required()
      ->delimiter(',');
  evaluate->add_option("--out", ev.store, "Result store (JSON lines), appended to")->required();
  evaluate->add_option("--workers", ev.workers, "Worker threads (default from config)");

  // hs
  cli::HsArgs hs;
  auto* hs_cmd = app.add_subcommand("hs", "Score triplets with the MLLM rubric (resumes by default)");
  hs_cmd->add_option("--manifest", hs.manifest, "Triplet manifest")->required();
  hs_cmd->add_option("--runs", hs.runs, "Scoring runs per triplet")->capture_default_str();
  hs_cmd->add_option("--out", hs.out, "HS records (JSON lines), appended to")->required();
  hs_cmd->add_option("--stats", hs.stats, "Also write the statistics table here");
  hs_cmd->add_option("--client", hs.client, "stub (offline, deterministic) or live")
      ->check(CLI::IsMember({"stub", "live"}))
      ->capture_default_str();
  hs_cmd->add_option("--workers", hs.workers, "Requests in flight (default from config)");
  hs_cmd->add_option("--max-side", hs.max_side, "Long-side cap for uploaded images")->capture_default_str();

  // correlate
  cli::CorrelateArgs co;
  auto* correlate = app.add_subcommand("correlate", "Spearman matrices, tables and the report bundle");
  correlate->add_option("--store", co.stores, "Metric result store (repeatable)");
  correlate->add_option("--hs", co.hs, "HS records file (repeatable)");
  correlate->add_option("--manifest", co.manifest, "Manifest for model/dataset grouping");
  correlate->add_option("--group-by", co.group_by, "combined, model or dataset")
      ->check(CLI::IsMember({"combined", "model", "dataset"}))
      ->capture_default_str();
  correlate->add_option("--ratings", co.ratings, "Study export (ratings.jsonl or ratings.csv)");
  correlate->add_option("--title", co.title, "Report title");
  correlate->add_option("--out", co.out, "Report directory")->required();

  // degrade
  cli::DegradeArgs dg;
  auto* degrade = app.add_subcommand("degrade", "Build a synthetic LR/HR training set");
  degrade->add_option("--source", dg.sources, "DIR:COUNT[:TAG] (repeatable)")->required();
  degrade->add_option("--config", dg.config, "Degradation config JSON")->required();
  degrade->add_option("--out", dg.out, "Output directory")->required();
  degrade->add_option("--held-out", dg.held_out, "Validation pairs")->capture_default_str();
  degrade->add_option("--workers", dg.workers, "Worker threads (default from config)");
  degrade->add_option("--crop-size", dg.crop_size, "Override the config's HR crop size");

  // finetune
  cli::FinetuneArgs ft;
  auto* finetune = app.add_subcommand("finetune", "Reward fine-tuning of an SR adapter's LoRA factors");
  finetune->add_option("--train-config", ft.config, "Fine-tune config JSON")->required();
  finetune->add_option("--adapter", ft.adapter, "toy, seesr-like or pasd-like")
      ->check(CLI::IsMember({"toy", "seesr-like", "pasd-like"}));
  finetune->add_option("--out", ft.out, "Output directory (overrides the config)");
  finetune->add_option("--resume", ft.resume, "train_state.json to continue from");
  finetune->add_option("--steps", ft.steps, "Override total steps");

  // study
  auto* study = app.add_subcommand("study", "Human rating study service");
  study->require_subcommand(1);
  cli::StudyServeArgs ss;
  auto* serve = study->add_subcommand("serve", "Serve the study HTTP API");
  serve->add_option("--root", ss.root, "Study state directory")->required();
  serve->add_option("--host", ss.host)->capture_default_str();
  serve->add_option("--port", ss.port)->capture_default_str();
  serve->add_option("--manifest", ss.manifest, "Create a study from this manifest first");
  serve->add_option("--rater", ss.raters, "Rater id (repeatable)");
  cli::StudyExportArgs se;
  auto* exp = study->add_subcommand("export", "Write ratings.jsonl / ratings.csv for a study");
  exp->add_option("--root", se.root, "Study state directory")->required();
  exp->add_option("--study", se.study_id, "Study id")->required();
  exp->add_option("--out", se.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kUsage;
  }

  namespace log = hallucheck::log;
  if (verbose) log::set_min_level(log::Level::Debug);
  else if (quiet) log::set_min_level(log::Level::Warn);

  cli::ToolConfig cfg;
  try {
    cfg = cli::load_tool_config(config_path.empty() ? std::nullopt : std::optional(std::filesystem::path(config_path)));
  } catch (const std::exception& e) {
    log::error(std::string("config: ") + e.what());
    return cli::kUsage;
  }
  const cli::Common common{dry_run, seed, &std::cout};

  if (*evaluate) return cli::cmd_evaluate(ev, cfg, common);
  if (*hs_cmd) return cli::cmd_hs(hs, cfg, common);
  if (*correlate) return cli::cmd_correlate(co, cfg, common);
  if (*degrade) return cli::cmd_degrade(dg, cfg, common);
  if (*finetune) return cli::cmd_finetune(ft, cfg, common);
  if (*serve) return cli::cmd_study_serve(ss, cfg, common);
  if (*exp) return cli::cmd_study_export(se, cfg, common);
  return cli::kUsage;
}
