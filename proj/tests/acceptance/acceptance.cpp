// Acceptance gate. One line per criterion:
//   PASS|FAIL|SKIP  <n>  <name>  (<seconds> s)  <detail>
// Exit status is 1 if any criterion fails; skips do not fail the gate.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include "fixtures.hpp"
#include "hallucheck/adapters.hpp"
#include "hallucheck/align.hpp"
#include "hallucheck/analysis.hpp"
#include "hallucheck/cli.hpp"
#include "hallucheck/degrade.hpp"
#include "hallucheck/features.hpp"
#include "hallucheck/hs.hpp"
#include "hallucheck/log.hpp"
#include "hallucheck/metrics.hpp"
#include "hallucheck/rng.hpp"
#include "hallucheck/util.hpp"
#include "hallucheck/vit.hpp"

using namespace hallucheck;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Status { Pass, Fail, Skip };

struct Outcome {
  Status status = Status::Pass;
  std::string detail;
};

Outcome pass(std::string d) { return {Status::Pass, std::move(d)}; }
Outcome fail(std::string d) { return {Status::Fail, std::move(d)}; }
Outcome skip(std::string d) { return {Status::Skip, std::move(d)}; }

std::string num(double v, int prec = 3) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = fixtures::read_file(e.path());
  return out;
}

// ---------------------------------------------------------------------------
// 1. Spearman vs a brute-force oracle

// Average ranks by counting: rank = #{smaller} + (#{equal} + 1) / 2.
double brute_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < n; ++j) {
        less += v[j] < v[i];
        equal += v[j] == v[i];
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += rx[i], my += ry[i];
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

analysis::ScoreSeries series(const std::string& name, const std::vector<double>& v) {
  analysis::ScoreSeries s{name, {}};
  for (std::size_t i = 0; i < v.size(); ++i) s.values["i" + std::to_string(100 + i)] = v[i];
  return s;
}

Outcome c1_spearman() {
  Rng r(2024);
  double worst = 0;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> x(20), y(20);
    // small integer ranges force ties; a few series also copy values outright
    for (auto& v : x) v = static_cast<double>(r.uniform_int(0, 6));
    for (auto& v : y) v = k % 3 == 0 ? r.uniform() : static_cast<double>(r.uniform_int(0, 4));
    if (k % 7 == 0) y[3] = y[4] = y[5];
    const double want = brute_spearman(x, y);
    const double got = analysis::spearman(series("x", x), series("y", y));
    worst = std::max(worst, std::abs(got - want));
  }
  if (worst > 1e-12) return fail("max |diff| " + num(worst));
  const std::vector<double> a{1, 2, 3, 4}, rev{4, 3, 2, 1}, swap{2, 1, 4, 3};
  const double id = analysis::spearman(series("a", a), series("b", a));
  const double re = analysis::spearman(series("a", a), series("b", rev));
  const double sw = analysis::spearman(series("a", a), series("b", swap));
  if (id != 1.0 || re != -1.0 || sw != 0.6)
    return fail("anchors " + num(id, 17) + " " + num(re, 17) + " " + num(sw, 17));
  return pass("200 tied series, max |diff| " + num(worst) + "; anchors 1, -1, 0.6 exact");
}

// ---------------------------------------------------------------------------
// 2. Metric identities

Outcome c2_identities() {
  features::ProjectionBackend proj;
  adapters::SoftLumaSegmenter seg;
  const std::vector<std::string> tags{"sky", "grass", "wall"};
  int bad = 0;
  std::string first;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok && bad++ == 0) first = what;
  };
  for (int i = 0; i < 20; ++i) {
    const Image x = fixtures::textured_image(64 + 8 * (i % 3), 64, 500 + i);
    const auto tag = " (image " + std::to_string(i) + ")";
    check(metrics::mse(x, x) == 0.0, "mse" + tag);
    check(metrics::ssim(x, x) == 1.0, "ssim" + tag);
    for (auto kind : {features::TokenKind::ST, features::TokenKind::CLS}) {
      const auto f = features::embed(proj, x, kind, features::kIntermLayers);
      check(features::feature_distance(f, f) == 0.0, "feature_distance" + tag);
    }
    const auto s = adapters::segment(x, tags, seg);
    check(metrics::ssd(s, s) == 0.0, "ssd" + tag);
    const Image flat(48, 40, static_cast<float>(i) / 19.0f);
    check(metrics::sharpness(flat) == 0.0, "sharpness" + tag);
  }
  if (bad) return fail(std::to_string(bad) + " identities not exact, first: " + first);
  return pass("20 images: mse 0, ssim 1, feature_distance 0 (ST and CLS), ssd 0, sharpness(const) 0");
}

// ---------------------------------------------------------------------------
// 3. DINO-ST-interm monotonicity (real weights only)

Outcome c3_monotonicity() {
  const char* w = std::getenv("HALLUCHECK_DINO_WEIGHTS");
  const char* d = std::getenv("HALLUCHECK_NATURAL_IMAGES");
  if (!w || !*w || !d || !*d)
    return skip("needs pretrained DINOv2 weights ($HALLUCHECK_DINO_WEIGHTS) and >= 20 natural images "
                "($HALLUCHECK_NATURAL_IMAGES); neither ships with the repository");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(d)) {
    auto ext = e.path().extension().string();
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.size() < 20) return skip("fewer than 20 images in " + std::string(d));
  files.resize(20);
  auto backend = features::VitBackend::load("dino", w);
  int monotone = 0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const Image clean = decode_image(files[i]);
    const auto ref = features::embed(backend, clean, features::TokenKind::ST, features::kIntermLayers);
    double prev = -1;
    bool ok = true;
    for (double sigma : {0.0, 0.05, 0.1, 0.2}) {
      const Image noisy = sigma == 0 ? clean : fixtures::add_noise(clean, sigma, 31 + i);
      const double dist =
          features::feature_distance(ref, features::embed(backend, noisy, features::TokenKind::ST, features::kIntermLayers));
      ok = ok && dist > prev;
      prev = dist;
    }
    monotone += ok;
  }
  const std::string msg = std::to_string(monotone) + "/20 images strictly increasing";
  return monotone >= 18 ? pass(msg) : fail(msg);
}

// ---------------------------------------------------------------------------
// 4. SSD ln 2

Outcome c4_ssd() {
  metrics::SegmentationDistribution gt{{"a", "b"}, 3, 4, {}}, sr = gt;
  for (int p = 0; p < 12; ++p) {
    gt.probs.insert(gt.probs.end(), {p % 2 ? 1.0 : 0.0, p % 2 ? 0.0 : 1.0});
    sr.probs.insert(sr.probs.end(), {0.5, 0.5});
  }
  const double v = metrics::ssd(gt, sr);
  const double err = std::abs(v - std::numbers::ln2);
  if (err > 1e-9) return fail("ssd " + num(v, 17) + ", |err| " + num(err));
  return pass("one-hot vs uniform = " + num(v, 12) + ", |err| " + num(err));
}

// ---------------------------------------------------------------------------
// 5. HS parser fixtures and fuzz

enum class Cls { Ok, NoJson, OutOfRange, Missing };

const char* cls_name(Cls c) {
  switch (c) {
    case Cls::Ok: return "ok";
    case Cls::NoJson: return "no-json";
    case Cls::OutOfRange: return "out-of-range";
    case Cls::Missing: return "missing-field";
  }
  return "?";
}

std::pair<Cls, int> classify(const std::string& text) {
  try {
    return {Cls::Ok, hs::parse_response(text).score};
  } catch (const hs::NoJsonFound&) {
    return {Cls::NoJson, 0};
  } catch (const hs::ScoreOutOfRange&) {
    return {Cls::OutOfRange, 0};
  } catch (const hs::MissingField&) {
    return {Cls::Missing, 0};
  }
}

struct Canned {
  std::string text;
  Cls want;
  int score = 0;
};

std::vector<Canned> canned_responses() {
  return {
      // valid
      {R"({"score": 1, "reasoning": "The face is replaced by an unrelated texture."})", Cls::Ok, 1},
      {R"({"score": 2, "reasoning": "Text on the sign is garbled."})", Cls::Ok, 2},
      {R"({"reasoning": "Minor unnatural fur pattern.", "score": 3})", Cls::Ok, 3},
      {"{\n  \"score\": 4,\n  \"reasoning\": \"Slight over-sharpening only.\"\n}", Cls::Ok, 4},
      {R"({"score": 5, "reasoning": "Artifact-free and faithful to the reference."})", Cls::Ok, 5},
      // fenced
      {"```json\n{\"score\": 4, \"reasoning\": \"Clean edges.\"}\n```", Cls::Ok, 4},
      {"```\n{\"score\": 2, \"reasoning\": \"Extra windows on the building.\"}\n```", Cls::Ok, 2},
      {"```JSON\n{\"score\": 3, \"reasoning\": \"Blotchy grass.\"}```", Cls::Ok, 3},
      {"Result:\n```json\n{\"score\": 5, \"reasoning\": \"none\"}\n```\nDone.", Cls::Ok, 5},
      // prose-wrapped
      {"Here is my assessment: {\"score\": 3, \"reasoning\": \"Hair strands merge.\"} Let me know.", Cls::Ok, 3},
      {"After comparing the three images, I conclude {\"score\": 1, \"reasoning\": \"A second head appears.\"}.",
       Cls::Ok, 1},
      {"Sure.\n\n{\"reasoning\": \"Mild ringing {around} text.\", \"score\": 4}\n\nThanks!", Cls::Ok, 4},
      {"Note {this is not json}. Final: {\"score\": 2, \"reasoning\": \"Wrong animal texture.\"}", Cls::Ok, 2},
      // out of range
      {R"({"score": 0, "reasoning": "Terrible."})", Cls::OutOfRange},
      {R"({"score": 6, "reasoning": "Better than perfect."})", Cls::OutOfRange},
      {R"({"score": 3.5, "reasoning": "Between levels."})", Cls::OutOfRange},
      {R"({"score": -1, "reasoning": "Negative."})", Cls::OutOfRange},
      // missing or mistyped fields
      {R"({"reasoning": "Forgot the score."})", Cls::Missing},
      {R"({"score": 4})", Cls::Missing},
      {R"({"score": "4", "reasoning": "Score as a string."})", Cls::Missing},
      {R"({"score": null, "reasoning": "Null score."})", Cls::Missing},
      // truncated
      {R"({"score": 4, "reasoning": "The output was cut o)", Cls::NoJson},
      {R"({"score": 3, "reas)", Cls::NoJson},
      {"```json\n{\"score\": 2,", Cls::NoJson},
      {"I would rate this image", Cls::NoJson},
  };
}

Outcome c5_parser() {
  const auto cases = canned_responses();
  int right = 0;
  std::string first;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto [got, score] = classify(cases[i].text);
    const bool ok = got == cases[i].want && (got != Cls::Ok || score == cases[i].score);
    right += ok;
    if (!ok && first.empty())
      first = "case " + std::to_string(i) + " gave " + cls_name(got) + ", want " + cls_name(cases[i].want);
  }
  if (right != static_cast<int>(cases.size()))
    return fail(std::to_string(right) + "/" + std::to_string(cases.size()) + " classified; " + first);

  // mutate canned texts: insertions, deletions, replacements biased to JSON syntax and digits
  Rng r(77);
  const std::string pool = "{}[]\":,-.0123456789eE ` \n\\scorereasoning";
  int parsed = 0, escaped = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string s = cases[static_cast<std::size_t>(r.uniform_int(0, cases.size() - 1))].text;
    const int edits = static_cast<int>(r.uniform_int(1, 6));
    for (int e = 0; e < edits; ++e) {
      const auto op = r.uniform_int(0, 2);
      const auto pos = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(s.size())));
      const char c = pool[static_cast<std::size_t>(r.uniform_int(0, pool.size() - 1))];
      if (op == 0) s.insert(s.begin() + static_cast<std::ptrdiff_t>(pos), c);
      else if (pos < s.size() && op == 1) s.erase(pos, 1);
      else if (pos < s.size()) s[pos] = c;
    }
    try {
      const auto p = hs::parse_response(s);
      if (p.score < 1 || p.score > 5) return fail("fuzz produced score " + std::to_string(p.score) + " from: " + s);
      ++parsed;
    } catch (const hs::ResponseError&) {
    } catch (const std::exception& e) {
      ++escaped;
    }
  }
  if (escaped) return fail(std::to_string(escaped) + " fuzz inputs raised a non-parse exception");
  return pass("25/25 canned responses classified; 10000 mutations, " + std::to_string(parsed) +
              " parsed, all scores in 1..5");
}

// ---------------------------------------------------------------------------
// 6. Swin2SR golden table

Outcome c6_golden() {
  const auto recs = fixtures::swin2sr_records();
  std::map<std::string, std::string> tags;
  for (const auto& r : recs) tags[r.triplet_id] = "Swin2SR";
  const std::string want =
      "Method  | Mean Score | 1   | 2    | 3    | 4    | 5\n"
      "--------+------------+-----+------+------+------+-----\n"
      "Swin2SR | 3.38       | 6.5 | 12.8 | 33.2 | 30.7 | 16.8\n";
  const auto table = hs::render_stats_table(hs::hs_statistics(recs, tags));
  if (table != want) return fail("table differs:\n" + table);
  // byte-stable through the record file
  const auto dir = fixtures::temp_dir("acc_golden");
  for (const auto& r : recs) hs::append_record(dir / "swin2sr.jsonl", r);
  const auto again = hs::render_stats_table(hs::hs_statistics(hs::read_records(dir / "swin2sr.jsonl"), tags));
  if (again != want) return fail("table differs after a record-file round trip");
  return pass("Swin2SR | 3.38 | 6.5 | 12.8 | 33.2 | 30.7 | 16.8 reproduced byte for byte from " +
              std::to_string(recs.size()) + " records");
}

// ---------------------------------------------------------------------------
// 7. Rater deviations

Outcome c7_deviations() {
  Rng r(11);
  analysis::RaterTable t;
  std::vector<std::string> ids;
  for (int j = 0; j < 20; ++j) ids.push_back("img" + std::to_string(10 + j));
  for (int i = 0; i < 11; ++i) t.rater_ids.push_back("u" + std::to_string(10 + i));
  std::vector<std::vector<int>> s(11, std::vector<int>(20));
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 20; ++j) {
      s[i][j] = static_cast<int>(r.uniform_int(1, 5));
      t.scores[{t.rater_ids[i], ids[j]}] = s[i][j];
    }
  analysis::ScoreSeries gpt{"GPT", {}};
  for (const auto& id : ids) gpt.values[id] = r.uniform(1.0, 5.0);
  const auto rep = analysis::rater_deviations(t, gpt);
  if (rep.triplet_ids != ids) return fail("triplet order differs");

  double worst = 0, centering = 0;
  for (int j = 0; j < 20; ++j) {
    double sum = 0;
    for (int i = 0; i < 11; ++i) sum += s[i][j];
    const double hmean = sum / 11.0;
    worst = std::max(worst, std::abs(rep.h_mean.at(ids[j]) - hmean));
    double resid = 0;
    for (int i = 0; i < 11; ++i) {
      worst = std::max(worst, std::abs(rep.human.at(t.rater_ids[i])[j] - std::abs(hmean - s[i][j])));
      resid += rep.residual.at(t.rater_ids[i])[j];
    }
    centering = std::max(centering, std::abs(resid));
    worst = std::max(worst, std::abs(rep.mllm[j] - std::abs(hmean - gpt.values.at(ids[j]))));
  }
  if (worst > 1e-12 || centering > 1e-12)
    return fail("max |diff| " + num(worst) + ", max |sum of residuals| " + num(centering));
  return pass("11 raters x 20 images: max |diff| " + num(worst) + ", centering " + num(centering));
}

// ---------------------------------------------------------------------------
// 8. Degradation determinism

Outcome c8_degrade() {
  const auto dir = fixtures::temp_dir("acc_degrade");
  for (int i = 0; i < 3; ++i) {
    fs::create_directories(dir / "src");
    write_png(fixtures::textured_image(160, 144 + 16 * i, 40 + i), dir / "src" / ("hr" + std::to_string(i) + ".png"));
  }
  auto cfg = degrade::load_config(fs::path(HALLUCHECK_SOURCE_DIR) / "configs" / "stablesr_default.json");
  cfg.crop_size = 128;
  cfg.seed = 20240601;
  const std::vector<degrade::SourceSpec> src{{dir / "src", 8, "tex"}};
  const auto a = degrade::build_dataset(src, cfg, {dir / "a", 2, 1});
  const auto b = degrade::build_dataset(src, cfg, {dir / "b", 2, 2});
  for (const char* f : {"manifest.jsonl", "manifest_train.jsonl", "manifest_val.jsonl", "pairs.jsonl"})
    if (fixtures::read_file(dir / "a" / f) != fixtures::read_file(dir / "b" / f)) return fail(std::string(f) + " differs");
  for (const auto& t : a.all.entries) {
    if (fixtures::read_file(a.all.resolve(t.lr)) != fixtures::read_file(b.all.resolve(b.all.at(t.id).lr)))
      return fail("LR bytes differ for " + t.id);
    if (fixtures::read_file(a.all.resolve(t.gt)) != fixtures::read_file(b.all.resolve(b.all.at(t.id).gt)))
      return fail("HR bytes differ for " + t.id);
    const Image lr = decode_image(a.all.resolve(t.lr)), hr = decode_image(a.all.resolve(t.gt));
    if (lr.height() * 4 != hr.height() || lr.width() * 4 != hr.width())
      return fail(t.id + ": LR " + std::to_string(lr.width()) + "x" + std::to_string(lr.height()) + " is not HR/4");
  }
  return pass(std::to_string(a.all.entries.size()) + " pairs bitwise identical across two builds; LR 32x32 = HR/4");
}

// ---------------------------------------------------------------------------
// 9. Toy fine-tune

Outcome c9_finetune() {
  const auto dir = fixtures::temp_dir("acc_finetune");
  const fs::path cfg_path = fs::path(HALLUCHECK_SOURCE_DIR) / "configs" / "finetune_toy.json";
  const json cfg = json::parse(fixtures::read_file(cfg_path));
  const auto& train = cfg["train"];
  if (train["total_steps"] != 200 || train["batch"] != 8 || train["grad_accum"] != 4 || train["lr"] != 1e-3)
    return fail("configs/finetune_toy.json does not hold 200 steps, batch 8x4, lr 1e-3");

  std::ostringstream sink;
  cli::FinetuneArgs args;
  args.config = cfg_path;
  args.adapter = "toy";
  args.out = dir / "out";
  const int code = cli::cmd_finetune(args, {}, {false, std::nullopt, &sink});
  if (code != cli::kOk) return fail("cmd_finetune exited " + std::to_string(code));

  // smoothed reward recomputed from the log file
  std::ifstream log(dir / "out" / "train_log.csv");
  std::string line;
  std::getline(log, line);
  std::vector<double> reward;
  while (std::getline(log, line)) {
    const auto a = line.find(','), b = line.find(',', a + 1);
    reward.push_back(std::stod(line.substr(a + 1, b - a - 1)));
  }
  if (reward.size() != 200) return fail("log has " + std::to_string(reward.size()) + " rows");
  double end = 0;
  for (std::size_t i = 180; i < 200; ++i) end += reward[i];
  end /= 20;
  const double start = reward[0];
  if (!(end > start)) return fail("smoothed reward did not rise: " + num(start, 6) + " -> " + num(end, 6));

  // base weights: rebuild the adapter from the same options and compare hashes
  align::ToyAdapterOptions o;
  const auto& toy = cfg["toy"];
  o.size = toy["size"];
  o.scale = toy["scale"];
  o.hidden = toy["hidden"];
  o.control = toy["control"];
  o.lora_alpha = toy["lora_alpha"];
  o.seed = toy["seed"];
  align::ToyAdapter adapter(align::adapter_preset("toy"), o);
  const auto run = json::parse(fixtures::read_file(dir / "out" / "run.json"));
  if (run["base_hash_before"] != adapter.base_hash() || run["base_hash_after"] != adapter.base_hash())
    return fail("base weight hash changed");
  align::load_checkpoint(adapter, dir / "out" / "lora.safetensors");  // refuses a foreign base

  // reward gradient through the sampler, at the trained LoRA
  const auto reward_cfg = align::reward_config_from_json(cfg["reward"]);
  const auto models = align::toy_reward_models(reward_cfg);
  const auto data = align::synthetic_train_data(2, adapter, 5);
  double worst = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto g = fixtures::reward_gradient_check(adapter, data.lr[i], data.gt[i], models, reward_cfg, 900 + i);
    if (!(g.fd_norm > 0)) return fail("finite-difference gradient is zero");
    worst = std::max(worst, g.rel_error);
  }
  if (!(worst < 1e-3)) return fail("gradient rel. err " + num(worst));
  return pass("smoothed reward " + num(start, 5) + " -> " + num(end, 5) + "; base hash unchanged; gradient rel. err " +
              num(worst, 2));
}

// ---------------------------------------------------------------------------
// 10. lambda linearity and presets

Outcome c10_lambda() {
  const std::map<std::string, std::pair<std::string, double>> want{
      {"dino-st", {"dino", 0.05}}, {"clip-st", {"clip", 0.1}}, {"clip-cls", {"clip", 0.05}}};
  const auto presets = align::reward_presets();
  if (presets.size() != 3) return fail("expected three presets");
  for (const auto& p : presets) {
    const auto it = want.find(p.name);
    if (it == want.end() || p.config.semantic_backend != it->second.first || p.config.lambda != it->second.second)
      return fail("preset " + p.name + " is (" + p.config.semantic_backend + ", " + num(p.config.lambda) + ")");
    const auto kind = p.name == "clip-cls" ? features::TokenKind::CLS : features::TokenKind::ST;
    if (p.config.token_kind != kind) return fail("preset " + p.name + " has the wrong token kind");
  }

  align::ToyAdapterOptions o;
  align::ToyAdapter adapter(align::adapter_preset("toy"), o);
  const auto data = align::synthetic_train_data(3, adapter, 8);
  double worst = 0;
  for (const auto& p : presets) {
    const auto models = align::toy_reward_models(p.config);
    for (std::size_t i = 0; i < data.lr.size(); ++i) {
      Rng rng(40 + i);
      const Image sr = adapter.sample(data.lr[i], rng);
      auto at = [&](double lambda) {
        auto c = p.config;
        c.lambda = lambda;
        ad::Tape t;
        return align::combined_reward(t, t.constant(align::to_mat(sr)), o.size, o.size, data.gt[i], models, c).scalar();
      };
      const double r0 = at(0), r1 = at(1);
      for (double l : {0.05, 0.1, 0.25, 0.5, 2.0, 10.0}) worst = std::max(worst, std::abs(at(l) - (r0 + l * (r1 - r0))));
    }
  }
  if (worst > 1e-9) return fail("max linearity error " + num(worst));
  return pass("presets (DINO-ST, 0.05), (CLIP-ST, 0.1), (CLIP-CLS, 0.05); linearity error " + num(worst));
}

// ---------------------------------------------------------------------------
// 11. End-to-end dry run

int pipeline(const fs::path& dir, std::string& why) {
  const auto fx = fixtures::make_triplets(dir / "data", 6);
  const auto cfg = cli::tool_config_from_json(json::parse(
      fixtures::read_file(fs::path(HALLUCHECK_SOURCE_DIR) / "configs" / "tool_offline.json")));
  std::ostringstream sink;
  const cli::Common c{false, std::nullopt, &sink};
  const std::vector<std::string> metrics{"mse",      "psnr",           "ssim",         "sharpness",
                                         "dino_st",  "dino_st_interm", "clip_cls",     "clip_st_interm",
                                         "ssd"};
  if (int e = cli::cmd_evaluate({fx.manifest_path, metrics, dir / "out" / "scores.jsonl", 1}, cfg, c)) {
    why = "evaluate";
    return e;
  }
  cli::HsArgs h;
  h.manifest = fx.manifest_path;
  h.out = dir / "out" / "hs.jsonl";
  h.stats = dir / "out" / "hs_stats.txt";
  if (int e = cli::cmd_hs(h, cfg, c)) {
    why = "hs";
    return e;
  }
  cli::CorrelateArgs co;
  co.stores = {dir / "out" / "scores.jsonl"};
  co.hs = {h.out};
  co.manifest = fx.manifest_path;
  co.out = dir / "out" / "report";
  if (int e = cli::cmd_correlate(co, cfg, c)) {
    why = "correlate";
    return e;
  }
  return 0;
}

Outcome c11_end_to_end() {
  const auto dir = fixtures::temp_dir("acc_e2e");
  std::string why;
  for (const char* run : {"one", "two"})
    if (int e = pipeline(dir / run, why)) return fail(why + " exited " + std::to_string(e));
  for (const char* f : {"index.html", "correlations.csv", "correlations.png", "hs_stats.csv", "aggregate.csv"})
    if (!fs::exists(dir / "one" / "out" / "report" / f)) return fail(std::string("report lacks ") + f);
  const auto a = tree_bytes(dir / "one" / "out"), b = tree_bytes(dir / "two" / "out");
  if (a != b) {
    for (const auto& [k, v] : a)
      if (!b.count(k) || b.at(k) != v) return fail(k + " differs between runs");
    return fail("file sets differ between runs");
  }
  return pass("evaluate -> hs (stub) -> correlate exit 0; " + std::to_string(a.size()) +
              " output files identical across two runs");
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 = no time limit
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  log::set_min_level(log::Level::Warn);
  const std::vector<Criterion> all{
      {1, "spearman-oracle", 5, c1_spearman},
      {2, "metric-identities", 30, c2_identities},
      {3, "dino-monotonicity", 300, c3_monotonicity},
      {4, "ssd-ln2", 0, c4_ssd},
      {5, "hs-parser", 0, c5_parser},
      {6, "hs-golden-table", 0, c6_golden},
      {7, "rater-deviations", 0, c7_deviations},
      {8, "degrade-determinism", 0, c8_degrade},
      {9, "toy-finetune", 600, c9_finetune},
      {10, "lambda-linearity", 0, c10_lambda},
      {11, "end-to-end", 60, c11_end_to_end},
  };
  int failed = 0, skipped = 0;
  for (const auto& c : all) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.status == Status::Pass && c.budget_s > 0 && secs > c.budget_s) {
      o.status = Status::Fail;
      o.detail += "; over the " + num(c.budget_s) + " s budget";
    }
    const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Fail ? "FAIL" : "SKIP";
    failed += o.status == Status::Fail;
    skipped += o.status == Status::Skip;
    std::printf("%s  %2d  %-20s (%7.2f s)  %s\n", tag, c.id, c.name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %zu criteria, %d failed, %d skipped\n", all.size(), failed, skipped);
  return failed ? 1 : 0;
}
