#include "hallucheck/align.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>

#include "hallucheck/log.hpp"
#include "hallucheck/safetensors.hpp"
#include "hallucheck/util.hpp"

namespace hallucheck::align {

using features::TokenKind;
using nlohmann::json;
namespace fs = std::filesystem;

Mat to_mat(const Image& img) {
  Mat m(static_cast<Eigen::Index>(img.height()) * img.width(), 3);
  const auto px = img.data();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = px[static_cast<std::size_t>(r) * 3 + c];
  return m;
}

Image to_image(const Mat& m, int height, int width) {
  if (m.rows() != static_cast<Eigen::Index>(height) * width || m.cols() != 3)
    throw ShapeMismatch("to_image: matrix is not (h*w) x 3");
  Image img(height, width);
  auto px = img.data();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (int c = 0; c < 3; ++c) px[static_cast<std::size_t>(r) * 3 + c] = static_cast<float>(m(r, c));
  return img;
}

namespace {

Mat random_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal() * stddev;
  return m;
}

// 3x3 neighbourhoods of an (h*w) x 3 image, zero padded: (h*w) x 27.
ad::Index im2col_index(int h, int w) {
  auto idx = std::make_shared<std::vector<int>>();
  idx->reserve(static_cast<std::size_t>(h) * w * 27);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          for (int c = 0; c < 3; ++c) {
            const int yy = y + dy, xx = x + dx;
            idx->push_back(yy < 0 || yy >= h || xx < 0 || xx >= w ? -1 : (yy * w + xx) * 3 + c);
          }
  return idx;
}

Mat gather_value(const Mat& a, const std::vector<int>& idx, int rows, int cols) {
  Mat out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int k = idx[static_cast<std::size_t>(r) * cols + c];
      out(r, c) = k < 0 ? 0.0 : a(k / a.cols(), k % a.cols());
    }
  return out;
}

std::vector<int> checked_layers(std::vector<int> layers, int depth) {
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  if (layers.empty()) throw ValidationError("reward: empty layer set");
  if (layers.front() < 0 || layers.back() >= depth)
    throw ValidationError("reward: layer index outside [0, " + std::to_string(depth) + ")");
  return layers;
}

}  // namespace

// --- backends ----------------------------------------------------------------------

std::vector<Mat> DiffBackend::reference_tokens(const Image& img, TokenKind kind, const std::vector<int>& layers) {
  ad::Tape tape;
  const auto vars = tokens(tape, tape.constant(to_mat(img)), img.height(), img.width(), kind, layers);
  std::vector<Mat> out;
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

ToyVitBackend::ToyVitBackend(Options opts) : opts_(std::move(opts)) {
  if (opts_.patch < 1 || opts_.dim < 1 || opts_.depth < 1) throw ValidationError("toy backend: bad options");
  Rng rng(derive_key(opts_.seed, {0x746f79}));
  const int in = opts_.patch * opts_.patch * 3;
  embed_ = random_normal(rng, in, opts_.dim, 1.0 / std::sqrt(static_cast<double>(in)));
  for (int l = 0; l < opts_.depth; ++l) {
    w_.push_back(random_normal(rng, opts_.dim, opts_.dim, 1.0 / std::sqrt(static_cast<double>(opts_.dim))));
    b_.push_back(random_normal(rng, 1, opts_.dim, 0.1));
  }
}

std::vector<Var> ToyVitBackend::tokens(ad::Tape& tape, Var img, int height, int width, TokenKind kind,
                                       const std::vector<int>& layers_in) {
  const int p = opts_.patch;
  if (height % p != 0 || width % p != 0)
    throw ShapeMismatch("toy backend: image " + std::to_string(width) + "x" + std::to_string(height) +
                        " is not a multiple of patch " + std::to_string(p));
  if (img.rows() != static_cast<Eigen::Index>(height) * width || img.cols() != 3)
    throw ShapeMismatch("toy backend: image variable has the wrong shape");
  const auto layers = checked_layers(layers_in, opts_.depth);
  const int gh = height / p, gw = width / p, n = gh * gw, in = p * p * 3;

  auto& idx = patch_index_[{height, width}];
  if (!idx) {
    auto v = std::make_shared<std::vector<int>>();
    v->reserve(static_cast<std::size_t>(n) * in);
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            for (int c = 0; c < 3; ++c) v->push_back(((gy * p + py) * width + gx * p + px) * 3 + c);
    idx = v;
  }
  Rng pos_rng(derive_key(opts_.seed, {0x706f73, static_cast<std::uint64_t>(gh), static_cast<std::uint64_t>(gw)}));
  const Mat pos = random_normal(pos_rng, n, opts_.dim, 0.1);

  Var x = ad::add_scalar(ad::scale(ad::gather(img, idx, n, in), 4.0), -2.0);  // (v - 0.5) / 0.25
  Var h = ad::add(ad::matmul(x, tape.constant(embed_)), tape.constant(pos));
  std::vector<Var> out;
  std::size_t next = 0;
  for (int l = 0; l <= layers.back(); ++l) {
    h = ad::add(h, ad::tanh(ad::add_row(ad::matmul(h, tape.constant(w_[l])), tape.constant(b_[l]))));
    if (l == layers[next]) {
      out.push_back(kind == TokenKind::CLS ? ad::row_mean(h) : h);
      ++next;
    }
  }
  return out;
}

double QualityBackend::score_value(const Image& img) {
  ad::Tape tape;
  return score(tape, tape.constant(to_mat(img)), img.height(), img.width()).scalar();
}

Var LaplacianQuality::score(ad::Tape& tape, Var img, int height, int width) {
  if (height < 3 || width < 3) throw ShapeMismatch("quality: image smaller than 3x3");
  auto& idx = index_[{height, width}];
  if (!idx) {
    auto v = std::make_shared<std::vector<int>>();
    for (int y = 1; y + 1 < height; ++y)
      for (int x = 1; x + 1 < width; ++x)
        for (int k : {(y - 1) * width + x, y * width + x - 1, y * width + x, y * width + x + 1, (y + 1) * width + x})
          v->push_back(k);
    idx = v;
  }
  Mat to_luma(3, 1);
  to_luma << 0.299, 0.587, 0.114;
  Mat stencil(5, 1);
  stencil << 1.0, 1.0, -4.0, 1.0, 1.0;
  const int n = (height - 2) * (width - 2);
  Var y = ad::matmul(img, tape.constant(to_luma));
  Var lap = ad::matmul(ad::gather(y, idx, n, 5), tape.constant(stencil));
  Var e = ad::mean(ad::square(lap));
  return ad::scale(ad::div(e, ad::add_scalar(e, c_)), q_max_);
}

// --- rewards -----------------------------------------------------------------------

void RewardConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("reward: lambda must be a finite value >= 0");
  if (semantic_backend.empty()) throw ValidationError("reward: semantic backend must be named");
  if (layers.empty()) throw ValidationError("reward: empty layer set");
}

namespace {

std::string to_string(QualityTerm q) { return q == QualityTerm::None ? "none" : "musiq_like"; }
std::string to_string(QualityForm f) { return f == QualityForm::Normalized ? "normalized" : "literal_cosine"; }

}  // namespace

json to_json(const RewardConfig& c) {
  return json{{"semantic_backend", c.semantic_backend},
              {"token_kind", features::to_string(c.token_kind)},
              {"layers", c.layers},
              {"quality_term", to_string(c.quality)},
              {"quality_form", to_string(c.quality_form)},
              {"lambda", c.lambda}};
}

RewardConfig reward_config_from_json(const json& j) {
  RewardConfig c;
  try {
    if (j.contains("preset")) c = reward_preset(j["preset"].get<std::string>());
    c.semantic_backend = j.value("semantic_backend", c.semantic_backend);
    if (j.contains("token_kind")) c.token_kind = features::token_kind_from_string(j["token_kind"].get<std::string>());
    if (j.contains("layers")) {
      if (j["layers"].is_string()) c.layers = features::layer_preset(j["layers"].get<std::string>());
      else c.layers = j["layers"].get<std::vector<int>>();
    }
    if (j.contains("quality_term")) {
      const auto q = j["quality_term"].get<std::string>();
      if (q != "none" && q != "musiq_like") throw ValidationError("reward: unknown quality_term '" + q + "'");
      c.quality = q == "none" ? QualityTerm::None : QualityTerm::MusiqLike;
    }
    if (j.contains("quality_form")) {
      const auto f = j["quality_form"].get<std::string>();
      if (f != "normalized" && f != "literal_cosine") throw ValidationError("reward: unknown quality_form '" + f + "'");
      c.quality_form = f == "normalized" ? QualityForm::Normalized : QualityForm::LiteralCosine;
    }
    c.lambda = j.value("lambda", c.lambda);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("reward config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<RewardPreset> reward_presets() {
  RewardConfig dino;
  dino.semantic_backend = "dino";
  dino.token_kind = TokenKind::ST;
  dino.lambda = 0.05;
  RewardConfig clip_st = dino;
  clip_st.semantic_backend = "clip";
  clip_st.lambda = 0.1;
  RewardConfig clip_cls = clip_st;
  clip_cls.token_kind = TokenKind::CLS;
  clip_cls.lambda = 0.05;
  return {{"dino-st", dino}, {"clip-st", clip_st}, {"clip-cls", clip_cls}};
}

RewardConfig reward_preset(const std::string& name) {
  for (const auto& p : reward_presets())
    if (p.name == name) return p.config;
  throw UnknownName("unknown reward preset '" + name + "' (dino-st, clip-st, clip-cls)");
}

RewardModels toy_reward_models(const RewardConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ToyVitBackend::Options o;
  if (cfg.semantic_backend == "dino" || cfg.semantic_backend == "toy") {
    o.id = "toy-dino";
    o.seed = 11 ^ seed;
  } else if (cfg.semantic_backend == "clip") {
    o.id = "toy-clip";
    o.seed = 23 ^ seed;
  } else {
    throw Unavailable("no differentiable backend for '" + cfg.semantic_backend + "'");
  }
  return {std::make_shared<ToyVitBackend>(o), std::make_shared<LaplacianQuality>()};
}

Var semantic_reward(ad::Tape& tape, Var sr, int height, int width, const Image& gt, DiffBackend& backend,
                    const RewardConfig& cfg) {
  if (gt.height() != height || gt.width() != width) throw ShapeMismatch("semantic_reward: sr and gt sizes differ");
  const auto layers = checked_layers(cfg.layers, backend.depth());
  const auto s = backend.tokens(tape, sr, height, width, cfg.token_kind, layers);
  const auto g = backend.reference_tokens(gt, cfg.token_kind, layers);
  if (s.size() != g.size()) throw ShapeMismatch("semantic_reward: layer counts differ");
  std::vector<Var> gv;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].rows() != s[i].rows() || g[i].cols() != s[i].cols())
      throw ShapeMismatch("semantic_reward: token shapes differ");
    gv.push_back(tape.constant(g[i]));
  }
  Var a = ad::normalize_rows(s.size() == 1 ? s[0] : ad::concat_cols(s));
  Var b = ad::normalize_rows(gv.size() == 1 ? gv[0] : ad::concat_cols(gv));
  return ad::mean(ad::rowwise_dot(a, b));
}

Var quality_reward(ad::Tape& tape, Var sr, int height, int width, const Image& gt, QualityBackend& backend,
                   QualityForm form) {
  Var q = backend.score(tape, sr, height, width);
  if (form == QualityForm::Normalized) {
    if (!(backend.q_max() > 0.0)) throw ValidationError("quality backend reports a non-positive Q_max");
    return ad::scale(q, 1.0 / backend.q_max());
  }
  const double qg = backend.score_value(gt);
  return ad::rowwise_dot(ad::normalize_rows(q), ad::normalize_rows(tape.constant(Mat::Constant(1, 1, qg))));
}

Var combined_reward(ad::Tape& tape, Var sr, int height, int width, const Image& gt, const RewardModels& models,
                    const RewardConfig& cfg) {
  cfg.validate();
  if (!models.semantic) throw Unavailable("semantic reward backend not loaded");
  Var r = semantic_reward(tape, sr, height, width, gt, *models.semantic, cfg);
  if (cfg.quality == QualityTerm::None) return r;
  if (!models.quality) throw Unavailable("quality reward backend not loaded");
  return ad::add(r, ad::scale(quality_reward(tape, sr, height, width, gt, *models.quality, cfg.quality_form), cfg.lambda));
}

// --- adapter specs -------------------------------------------------------------------

std::string to_string(Sampler s) {
  switch (s) {
    case Sampler::DDIM: return "ddim";
    case Sampler::UniPC: return "unipc";
    case Sampler::Toy: return "toy";
  }
  return "?";
}

std::string to_string(PromptSource p) {
  switch (p) {
    case PromptSource::Tags: return "tags";
    case PromptSource::Caption: return "caption";
    case PromptSource::None: return "none";
  }
  return "?";
}

void AdapterSpec::validate() const {
  if (steps < 1) throw ValidationError("adapter '" + name + "': steps must be >= 1");
  if (lora_rank < 1) throw ValidationError("adapter '" + name + "': lora_rank must be >= 1");
  if (trainable_scope != "lora_unet_only")
    throw ValidationError("adapter '" + name + "': only the lora_unet_only scope is supported");
  if (std::find(frozen_parts.begin(), frozen_parts.end(), "controlnet") == frozen_parts.end())
    throw ValidationError("adapter '" + name + "': the control branch must be frozen");
}

json to_json(const AdapterSpec& s) {
  return json{{"name", s.name},
              {"sampler", to_string(s.sampler)},
              {"steps", s.steps},
              {"cfg_weight", s.cfg_weight},
              {"prompt_source", to_string(s.prompt_source)},
              {"positive_suffix", s.positive_suffix},
              {"negative_prompt", s.negative_prompt},
              {"trainable_scope", s.trainable_scope},
              {"lora_rank", s.lora_rank},
              {"frozen_parts", s.frozen_parts}};
}

std::vector<AdapterSpec> adapter_presets() {
  const std::string suffix = "clean, high-resolution, 8k";
  AdapterSpec seesr;
  seesr.name = "seesr-like";
  seesr.sampler = Sampler::DDIM;
  seesr.steps = 50;
  seesr.cfg_weight = 5.5;
  seesr.prompt_source = PromptSource::Tags;
  seesr.positive_suffix = suffix;
  seesr.negative_prompt = "dotted, noise, blur, lowres, smooth";

  AdapterSpec pasd = seesr;
  pasd.name = "pasd-like";
  pasd.sampler = Sampler::UniPC;
  pasd.steps = 20;
  pasd.cfg_weight = 9.0;
  pasd.prompt_source = PromptSource::Caption;
  pasd.negative_prompt = "dotted, noise, blur, lowres, oversmooth, bad anatomy, worst quality, low quality";

  AdapterSpec toy;
  toy.name = "toy";
  toy.sampler = Sampler::Toy;
  toy.steps = 4;
  toy.cfg_weight = 1.0;
  toy.prompt_source = PromptSource::None;
  toy.frozen_parts = {"controlnet"};
  return {seesr, pasd, toy};
}

AdapterSpec adapter_preset(const std::string& name) {
  for (const auto& p : adapter_presets())
    if (p.name == name) return p;
  throw UnknownName("unknown adapter preset '" + name + "' (seesr-like, pasd-like, toy)");
}

// --- toy adapter ---------------------------------------------------------------------

namespace {

constexpr int kTimeFeatures = 8;
constexpr int kTrainSteps = 1000;

Mat time_embedding(double t) {
  Mat e(1, kTimeFeatures);
  for (int k = 0; k < kTimeFeatures / 2; ++k) {
    const double a = std::numbers::pi * (1 << k) * t / kTrainSteps;
    e(0, 2 * k) = std::sin(a);
    e(0, 2 * k + 1) = std::cos(a);
  }
  return e;
}

std::string hash_mat(const std::string& name, const Mat& m) {
  std::string buf = name;
  buf.push_back('\0');
  buf.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  return util::sha256_hex(buf);
}

}  // namespace

ToyAdapter::ToyAdapter(AdapterSpec spec, Options opts) : spec_(std::move(spec)), opts_(opts) {
  spec_.validate();
  if (spec_.sampler != Sampler::Toy)
    throw Unavailable("adapter '" + spec_.name + "' needs its pretrained diffusion checkpoint; only the toy adapter runs in-process");
  if (opts_.size < 3 || opts_.scale < 1 || opts_.size % opts_.scale != 0)
    throw ValidationError("toy adapter: size must be a multiple of scale");

  Rng rng(derive_key(opts_.seed, {0x61646170}));
  const int in1 = 27 + opts_.control, hd = opts_.hidden, r = spec_.lora_rank;
  auto add = [&](std::vector<ad::Param>& v, const std::string& name, Mat m) { v.push_back({name, std::move(m), {}}); };
  add(base_, "control.w", random_normal(rng, 27, opts_.control, 1.0 / std::sqrt(27.0)));
  add(base_, "control.b", random_normal(rng, 1, opts_.control, 0.1));
  add(base_, "denoise.w1", random_normal(rng, in1, hd, 1.0 / std::sqrt(static_cast<double>(in1))));
  add(base_, "denoise.b1", Mat::Zero(1, hd));
  add(base_, "denoise.wt", random_normal(rng, kTimeFeatures, hd, 1.0 / std::sqrt(static_cast<double>(kTimeFeatures))));
  add(base_, "denoise.w2", random_normal(rng, hd, hd, 1.0 / std::sqrt(static_cast<double>(hd))));
  add(base_, "denoise.b2", Mat::Zero(1, hd));
  add(base_, "denoise.w3", random_normal(rng, hd, 3, 0.1 / std::sqrt(static_cast<double>(hd))));
  add(base_, "denoise.b3", Mat::Zero(1, 3));

  const std::array<std::pair<int, int>, 3> shapes{{{in1, hd}, {hd, hd}, {hd, 3}}};
  for (int l = 0; l < 3; ++l) {
    const auto [fi, fo] = shapes[l];
    add(lora_, "lora." + std::to_string(l + 1) + ".a", random_normal(rng, fi, r, 1.0 / std::sqrt(static_cast<double>(fi))));
    add(lora_, "lora." + std::to_string(l + 1) + ".b", Mat::Zero(r, fo));
  }

  im2col_ = im2col_index(opts_.size, opts_.size);
  alpha_bar_.resize(kTrainSteps);
  double prod = 1.0;
  for (int t = 0; t < kTrainSteps; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * t / (kTrainSteps - 1);
    prod *= 1.0 - beta;
    alpha_bar_[t] = prod;
  }
}

std::string ToyAdapter::base_hash() const {
  std::string all;
  for (const auto& p : base_) all += hash_mat(p.name, p.value);
  return util::sha256_hex(all);
}

std::map<std::string, std::string> ToyAdapter::param_hashes() const {
  std::map<std::string, std::string> out;
  for (const auto* group : {&base_, &lora_})
    for (const auto& p : *group) out[p.name] = hash_mat(p.name, p.value);
  return out;
}

Mat ToyAdapter::control_features(const Mat& cond) const {
  const int n = opts_.size * opts_.size;
  Mat cols = gather_value(cond, *im2col_, n, 27);
  Mat z = (cols * base_[0].value).rowwise() + base_[1].value.row(0);
  return z.array().tanh().matrix();
}

Var ToyAdapter::lora_linear(ad::Tape& tape, Var x, int layer, bool grad) {
  static constexpr int kW[] = {2, 5, 7}, kB[] = {3, 6, 8};
  auto& a = lora_[2 * layer];
  auto& b = lora_[2 * layer + 1];
  Var y = ad::add_row(ad::matmul(x, tape.constant(base_[kW[layer]].value)), tape.constant(base_[kB[layer]].value));
  Var av = grad ? tape.param(a) : tape.constant(a.value);
  Var bv = grad ? tape.param(b) : tape.constant(b.value);
  const double s = opts_.lora_alpha / spec_.lora_rank;
  return ad::add(y, ad::scale(ad::matmul(ad::matmul(x, av), bv), s));
}

Var ToyAdapter::denoise_x0(ad::Tape& tape, Var x, const Mat& control_feat, const Mat& control_img, double t,
                           bool grad) {
  const int n = opts_.size * opts_.size;
  Var in = ad::concat_cols({ad::gather(x, im2col_, n, 27), tape.constant(control_feat)});
  Var h = lora_linear(tape, in, 0, grad);
  h = ad::silu(ad::add_row(h, tape.constant(time_embedding(t) * base_[4].value)));
  h = ad::silu(lora_linear(tape, h, 1, grad));
  Var residual = lora_linear(tape, h, 2, grad);
  return ad::add(tape.constant(control_img), residual);
}

Var ToyAdapter::sample_differentiable(ad::Tape& tape, const Image& lr, Rng& rng, const SampleOptions& so) {
  const int lr_side = opts_.size / opts_.scale;
  if (lr.height() != lr_side || lr.width() != lr_side)
    throw ShapeMismatch("toy adapter expects a " + std::to_string(lr_side) + "x" + std::to_string(lr_side) + " LR input");
  if (so.truncation && *so.truncation < 0) throw ValidationError("truncation must be >= 0");

  // conditioning in pre-tanh space so that decode(control) ~ upsampled LR
  Mat cond = to_mat(resize(lr, opts_.size, opts_.size, Interp::Cubic));
  cond = (2.0 * cond.array() - 1.0).cwiseMax(-0.95).cwiseMin(0.95).matrix();
  cond = cond.unaryExpr([](double v) { return std::atanh(v); });
  const Mat ctrl = control_features(cond);

  const int n = opts_.size * opts_.size, steps = spec_.steps;
  std::vector<int> ts(steps);
  for (int i = 0; i < steps; ++i) ts[i] = kTrainSteps - 1 - i * (kTrainSteps / steps);
  const int keep = so.truncation ? std::min(*so.truncation, steps) : steps;

  Var x = tape.constant(random_normal(rng, n, 3, 1.0));
  std::size_t start_bytes = tape.bytes(), per_step = 0;
  for (int i = 0; i < steps; ++i) {
    const double ab = alpha_bar_[ts[i]];
    const double ab_prev = i + 1 < steps ? alpha_bar_[ts[i + 1]] : 1.0;
    auto step = [&](ad::Tape& tp, Var xin, bool grad) {
      Var x0 = denoise_x0(tp, xin, ctrl, cond, ts[i], grad);
      if (ab_prev == 1.0) return x0;
      Var eps = ad::scale(ad::sub(xin, ad::scale(x0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
      return ad::add(ad::scale(x0, std::sqrt(ab_prev)), ad::scale(eps, std::sqrt(1.0 - ab_prev)));
    };
    if (i < steps - keep) {
      ad::Tape scratch;
      x = tape.constant(step(scratch, scratch.constant(x.value()), false).value());
      continue;
    }
    const std::size_t before = tape.bytes();
    x = step(tape, x, true);
    per_step = std::max(per_step, tape.bytes() - before);
    if (so.memory_budget > 0 && tape.bytes() > so.memory_budget) {
      const std::size_t avail = so.memory_budget > start_bytes ? so.memory_budget - start_bytes : 0;
      const int k = static_cast<int>(avail / std::max<std::size_t>(per_step, 1));
      throw MemoryBudgetExceeded("sampler exceeds the activation budget of " + std::to_string(so.memory_budget) +
                                     " bytes; use truncation <= " + std::to_string(k),
                                 k);
    }
  }
  return ad::add_scalar(ad::scale(ad::tanh(x), 0.5), 0.5);
}

Image ToyAdapter::sample(const Image& lr, Rng& rng) {
  ad::Tape tape;
  SampleOptions so;
  so.truncation = 0;
  return to_image(sample_differentiable(tape, lr, rng, so).value(), opts_.size, opts_.size);
}

// --- training --------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (total_steps < 1) throw ValidationError("train: total_steps must be >= 1");
  if (batch < 1 || grad_accum < 1) throw ValidationError("train: batch and grad_accum must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("train: lr must be > 0");
  if (truncation && *truncation < 1) throw ValidationError("train: truncation must be >= 1 or full");
}

json to_json(const TrainConfig& c) {
  return json{{"total_steps", c.total_steps},
              {"batch", c.batch},
              {"grad_accum", c.grad_accum},
              {"lr", c.lr},
              {"optimizer", "adam"},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"truncation", c.truncation ? json(*c.truncation) : json("full")},
              {"memory_budget_mb", c.memory_budget_mb},
              {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.total_steps = j.value("total_steps", c.total_steps);
    c.batch = j.value("batch", c.batch);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    if (j.contains("optimizer") && j["optimizer"] != "adam") throw ValidationError("train: only adam is supported");
    if (j.contains("truncation")) {
      const auto& t = j["truncation"];
      if (t.is_string()) {
        if (t != "full") throw ValidationError("train: truncation must be an integer or \"full\"");
      } else {
        c.truncation = t.get<int>();
      }
    }
    c.memory_budget_mb = j.value("memory_budget_mb", c.memory_budget_mb);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainData load_train_data(const EvalManifest& m, const ToyAdapter& adapter) {
  if (m.entries.empty()) throw ValidationError("finetune: dataset manifest is empty");
  const int size = adapter.options().size, lr_side = size / adapter.options().scale;
  TrainData d;
  for (const auto& t : m.entries) {
    Image lr = decode_image(m.resolve(t.lr));
    Image gt = decode_image(m.resolve(t.gt));
    if (lr.height() != lr_side || lr.width() != lr_side || gt.height() != size || gt.width() != size)
      throw ValidationError("finetune: pair '" + t.id + "' is not " + std::to_string(lr_side) + "px LR / " +
                            std::to_string(size) + "px GT");
    d.ids.push_back(t.id);
    d.lr.push_back(std::move(lr));
    d.gt.push_back(std::move(gt));
  }
  return d;
}

TrainData synthetic_train_data(int count, const ToyAdapter& adapter, std::uint64_t seed) {
  if (count < 1) throw ValidationError("synthetic_train_data: count must be >= 1");
  const int size = adapter.options().size, lr_side = size / adapter.options().scale;
  TrainData d;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_key(seed, {0x73796eULL, static_cast<std::uint64_t>(i)}));
    const double fx = rng.uniform(0.1, 0.8), fy = rng.uniform(0.1, 0.8), phase = rng.uniform(0.0, 6.0);
    Image gt(size, size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int c = 0; c < 3; ++c)
          gt.at(y, x, c) = static_cast<float>(0.5 + 0.4 * std::sin(fx * x + fy * y + phase + c));
    char id[32];
    std::snprintf(id, sizeof id, "syn_%04d", i);
    d.ids.push_back(id);
    d.lr.push_back(resize(gt, lr_side, lr_side, Interp::Area));
    d.gt.push_back(std::move(gt));
  }
  return d;
}

double smoothed_reward(const std::vector<TrainLogRow>& log, std::size_t i, std::size_t window) {
  if (i >= log.size()) throw ValidationError("smoothed_reward: step out of range");
  const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
  double s = 0.0;
  for (std::size_t k = lo; k <= i; ++k) s += log[k].reward_mean;
  return s / static_cast<double>(i - lo + 1);
}

std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "step,reward_mean,loss,grad_norm,lr\n";
  for (const auto& r : log)
    out += std::to_string(r.step) + "," + util::shortest(r.reward_mean) + "," + util::shortest(r.loss) + "," +
           util::shortest(r.grad_norm) + "," + util::shortest(r.lr) + "\n";
  return out;
}

TrainRun finetune(ToyAdapter& adapter, const TrainData& data, const RewardModels& models, const RewardConfig& reward,
                  const TrainConfig& cfg, const FinetuneOutputs& out, const TrainState* resume) {
  cfg.validate();
  reward.validate();
  if (data.lr.empty() || data.lr.size() != data.gt.size()) throw ValidationError("finetune: no training pairs");

  TrainRun run;
  run.config = cfg;
  run.base_hash_before = adapter.base_hash();
  auto& params = adapter.lora();
  std::vector<Mat> m1, m2;
  for (auto& p : params) {
    m1.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
    m2.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
  }
  SampleOptions so;
  so.truncation = cfg.truncation;
  so.memory_budget = cfg.memory_budget_mb * 1024 * 1024;
  const int size = adapter.options().size;
  const double per_sample = 1.0 / cfg.effective_batch();

  std::size_t cursor = 0;
  int first_step = 0;
  if (resume) {
    if (resume->base_hash != run.base_hash_before)
      throw ValidationError("training state was saved for different base weights");
    if (resume->next_step > cfg.total_steps)
      throw ValidationError("training state is past total_steps (" + std::to_string(resume->next_step) + ")");
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto take = [&](const std::map<std::string, Mat>& from, Mat& to) {
        auto it = from.find(params[k].name);
        if (it == from.end() || it->second.rows() != to.rows() || it->second.cols() != to.cols())
          throw ShapeMismatch("training state: bad or missing '" + params[k].name + "'");
        to = it->second;
      };
      take(resume->lora, params[k].value);
      take(resume->m1, m1[k]);
      take(resume->m2, m2[k]);
    }
    first_step = resume->next_step;
    cursor = static_cast<std::size_t>(resume->cursor);
    run.log = resume->log;
  }

  std::ofstream log_file;
  if (!out.log_csv.empty()) {
    if (out.log_csv.has_parent_path()) fs::create_directories(out.log_csv.parent_path());
    log_file.open(out.log_csv, std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + out.log_csv.string());
    log_file << train_log_csv(run.log);
  }

  auto snapshot = [&](int next) {
    TrainState s;
    s.next_step = next;
    s.cursor = cursor;
    s.base_hash = run.base_hash_before;
    s.log = run.log;
    for (std::size_t k = 0; k < params.size(); ++k) {
      s.lora[params[k].name] = params[k].value;
      s.m1[params[k].name] = m1[k];
      s.m2[params[k].name] = m2[k];
    }
    save_train_state(s, out.state);
  };

  for (int step = first_step; step < cfg.total_steps; ++step) {
    for (auto& p : params) p.zero_grad();
    double reward_sum = 0.0;
    for (int a = 0; a < cfg.grad_accum; ++a)
      for (int b = 0; b < cfg.batch; ++b) {
        const std::size_t i = cursor++ % data.lr.size();
        Rng rng(derive_key(cfg.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(a),
                                      static_cast<std::uint64_t>(b)}));
        ad::Tape tape;
        Var sr = adapter.sample_differentiable(tape, data.lr[i], rng, so);
        Var r = combined_reward(tape, sr, size, size, data.gt[i], models, reward);
        if (!std::isfinite(r.scalar()))
          throw TrainingDiverged("non-finite reward at step " + std::to_string(step) + " on pair '" + data.ids[i] + "'");
        reward_sum += r.scalar();
        tape.backward(ad::scale(r, -per_sample));
      }

    double norm2 = 0.0;
    for (auto& p : params) norm2 += p.grad.squaredNorm();
    const double grad_norm = std::sqrt(norm2);
    const double reward_mean = reward_sum * per_sample;
    if (!std::isfinite(grad_norm) || !std::isfinite(reward_mean))
      throw TrainingDiverged("non-finite loss or gradient at step " + std::to_string(step) +
                             " (reward " + util::shortest(reward_mean) + ", grad norm " + util::shortest(grad_norm) + ")");

    const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1), bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Mat& g = params[k].grad;
      m1[k] = cfg.beta1 * m1[k] + (1.0 - cfg.beta1) * g;
      m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
      params[k].value.array() -=
          cfg.lr * (m1[k].array() / bc1) / ((m2[k].array() / bc2).sqrt() + cfg.eps);
    }

    TrainLogRow row{step, reward_mean, -reward_mean, grad_norm, cfg.lr};
    run.log.push_back(row);
    if (log_file.is_open()) {
      log_file << train_log_csv({row}).substr(std::string("step,reward_mean,loss,grad_norm,lr\n").size());
      log_file.flush();
    }
    if (out.on_step) out.on_step(row);
    if (!out.state.empty() && out.state_every > 0 && (step + 1) % out.state_every == 0) snapshot(step + 1);
  }
  if (!out.state.empty()) snapshot(cfg.total_steps);

  run.base_hash_after = adapter.base_hash();
  if (run.base_hash_after != run.base_hash_before)
    throw Error("finetune modified frozen base weights (hash changed)");
  if (!out.checkpoint.empty()) {
    save_checkpoint(adapter, reward, out.checkpoint);
    run.checkpoint = out.checkpoint;
  }
  return run;
}

namespace {

nlohmann::json mat_json(const Mat& m) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"f64le", util::base64_encode({bytes, static_cast<std::size_t>(m.size()) * sizeof(double)})}};
}

Mat mat_from_json(const nlohmann::json& j) {
  Mat m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  const auto raw = util::base64_decode(j.at("f64le").get<std::string>());
  if (raw.size() != static_cast<std::size_t>(m.size()) * sizeof(double))
    throw ParseError("training state: matrix payload has the wrong size");
  std::memcpy(m.data(), raw.data(), raw.size());
  return m;
}

}  // namespace

void save_train_state(const TrainState& s, const fs::path& path) {
  nlohmann::json j;
  j["format"] = "hallucheck-train-state-1";
  j["next_step"] = s.next_step;
  j["cursor"] = s.cursor;
  j["base_hash"] = s.base_hash;
  j["log"] = nlohmann::json::array();
  for (const auto& r : s.log) {
    // doubles travel as exact bit patterns so the resumed log is identical
    j["log"].push_back({{"step", r.step},
                        {"reward_mean", std::bit_cast<std::uint64_t>(r.reward_mean)},
                        {"loss", std::bit_cast<std::uint64_t>(r.loss)},
                        {"grad_norm", std::bit_cast<std::uint64_t>(r.grad_norm)},
                        {"lr", std::bit_cast<std::uint64_t>(r.lr)}});
  }
  const std::pair<const char*, const std::map<std::string, Mat>*> parts[] = {
      {"lora", &s.lora}, {"m1", &s.m1}, {"m2", &s.m2}};
  for (const auto& [name, src] : parts) {
    auto& o = j[name] = nlohmann::json::object();
    for (const auto& [k, m] : *src) o[k] = mat_json(m);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f << j.dump() << "\n";
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

TrainState load_train_state(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FileNotFound(path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("training state " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "hallucheck-train-state-1")
    throw ParseError("training state " + path.string() + ": unknown format");
  TrainState s;
  s.next_step = j.at("next_step").get<int>();
  s.cursor = j.at("cursor").get<std::uint64_t>();
  s.base_hash = j.at("base_hash").get<std::string>();
  for (const auto& r : j.at("log"))
    s.log.push_back({r.at("step").get<int>(), std::bit_cast<double>(r.at("reward_mean").get<std::uint64_t>()),
                     std::bit_cast<double>(r.at("loss").get<std::uint64_t>()),
                     std::bit_cast<double>(r.at("grad_norm").get<std::uint64_t>()),
                     std::bit_cast<double>(r.at("lr").get<std::uint64_t>())});
  for (const auto& [k, v] : j.at("lora").items()) s.lora[k] = mat_from_json(v);
  for (const auto& [k, v] : j.at("m1").items()) s.m1[k] = mat_from_json(v);
  for (const auto& [k, v] : j.at("m2").items()) s.m2[k] = mat_from_json(v);
  return s;
}

void save_checkpoint(const ToyAdapter& adapter, const RewardConfig& reward, const fs::path& path) {
  std::map<std::string, Tensor> tensors;
  for (const auto& p : adapter.lora()) {
    Tensor t;
    t.shape = {p.value.rows(), p.value.cols()};
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) t.data.push_back(static_cast<float>(p.value(r, c)));
    tensors.emplace(p.name, std::move(t));
  }
  save_safetensors(path, tensors,
                   {{"format", "hallucheck-lora-1"},
                    {"adapter", to_json(adapter.spec()).dump()},
                    {"reward", to_json(reward).dump()},
                    {"base_hash", adapter.base_hash()},
                    {"lora_alpha", util::shortest(adapter.options().lora_alpha)},
                    {"seed", std::to_string(adapter.options().seed)}});
}

void load_checkpoint(ToyAdapter& adapter, const fs::path& path) {
  const auto st = SafeTensors::load(path);
  const auto& meta = st.metadata();
  auto it = meta.find("base_hash");
  if (it == meta.end()) throw ParseError("checkpoint " + path.string() + " lacks base_hash metadata");
  if (it->second != adapter.base_hash())
    throw ValidationError("checkpoint " + path.string() + " was trained against different base weights");
  for (auto& p : adapter.lora()) {
    const auto& t = st.get(p.name);
    if (t.shape.size() != 2 || t.shape[0] != p.value.rows() || t.shape[1] != p.value.cols())
      throw ShapeMismatch("checkpoint tensor '" + p.name + "' has the wrong shape");
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c)
        p.value(r, c) = t.data[static_cast<std::size_t>(r * p.value.cols() + c)];
  }
}

}  // namespace hallucheck::align
