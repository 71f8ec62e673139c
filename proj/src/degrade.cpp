#include "hallucheck/degrade.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <mutex>
#include <numbers>
#include <set>
#include <thread>

#include <opencv2/imgproc.hpp>

#include "hallucheck/error.hpp"
#include "hallucheck/log.hpp"

namespace hallucheck::degrade {

using nlohmann::json;
namespace fs = std::filesystem;
using std::numbers::pi;

namespace {

const std::set<std::string> kKernels{"iso",           "aniso",           "generalized_iso",
                                     "generalized_aniso", "plateau_iso", "plateau_aniso"};
const std::set<std::string> kModes{"area", "bilinear", "bicubic"};

void check_prob(double p, const std::string& what) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("degradation config: " + what + " must be in [0,1]");
}
void check_range(const Range& r, const std::string& what, double min_lo = 0.0) {
  if (!(r.lo <= r.hi) || r.lo < min_lo) throw ValidationError("degradation config: bad range for " + what);
}

void validate_stage(const StageSpec& s, const std::string& name) {
  check_prob(s.blur.prob, name + ".blur.prob");
  check_prob(s.blur.sinc_prob, name + ".blur.sinc_prob");
  if (s.blur.enabled) {
    if (s.blur.kernel_list.empty() || s.blur.kernel_list.size() != s.blur.kernel_prob.size())
      throw ValidationError("degradation config: " + name + ".blur kernel_list/kernel_prob mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < s.blur.kernel_list.size(); ++i) {
      if (!kKernels.contains(s.blur.kernel_list[i]))
        throw ValidationError("degradation config: unknown kernel '" + s.blur.kernel_list[i] + "'");
      check_prob(s.blur.kernel_prob[i], name + ".blur.kernel_prob");
      total += s.blur.kernel_prob[i];
    }
    if (std::abs(total - 1.0) > 1e-6) throw ValidationError("degradation config: " + name + " kernel_prob must sum to 1");
  }
  check_range(s.blur.sigma, name + ".blur.sigma", 1e-6);
  check_range(s.blur.betag, name + ".blur.betag", 1e-6);
  check_range(s.blur.betap, name + ".blur.betap", 1e-6);
  double total = 0.0;
  for (double p : s.resize.updown_prob) {
    check_prob(p, name + ".resize.updown_prob");
    total += p;
  }
  if (s.resize.enabled && std::abs(total - 1.0) > 1e-6)
    throw ValidationError("degradation config: " + name + ".resize.updown_prob must sum to 1");
  check_range(s.resize.scale, name + ".resize.scale", 1e-6);
  check_prob(s.noise.gaussian_prob, name + ".noise.gaussian_prob");
  check_prob(s.noise.gray_prob, name + ".noise.gray_prob");
  check_range(s.noise.sigma, name + ".noise.sigma");
  check_range(s.noise.poisson_scale, name + ".noise.poisson_scale");
  check_range(s.jpeg.quality, name + ".jpeg.quality", 1.0);
  if (s.jpeg.quality.hi > 100.0) throw ValidationError("degradation config: JPEG quality above 100");
}

}  // namespace

void DegradationConfig::validate() const {
  if (out_scale < 1) throw ValidationError("degradation config: out_scale must be >= 1");
  if (crop_size < 1 || crop_size % out_scale != 0)
    throw ValidationError("degradation config: crop_size must be a positive multiple of out_scale");
  if (kernel_size_min < 1 || kernel_size_min % 2 == 0 || kernel_size_max % 2 == 0 || kernel_size_min > kernel_size_max)
    throw ValidationError("degradation config: kernel sizes must be odd with min <= max");
  validate_stage(first, "first");
  validate_stage(second, "second");
  check_prob(final_stage.sinc_prob, "final.sinc_prob");
  check_prob(final_stage.jpeg_first_prob, "final.jpeg_first_prob");
  check_range(final_stage.jpeg.quality, "final.jpeg.quality", 1.0);
  if (resize_modes.empty()) throw ValidationError("degradation config: resize_modes is empty");
  for (const auto& m : resize_modes)
    if (!kModes.contains(m)) throw ValidationError("degradation config: unknown resize mode '" + m + "'");
}

// --- JSON ------------------------------------------------------------------------

namespace {

Range range_of(const json& j, const char* key, Range dflt) {
  if (!j.contains(key)) return dflt;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 2) throw ValidationError(std::string("degradation config: '") + key + "' must be [lo, hi]");
  return {a[0].get<double>(), a[1].get<double>()};
}

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

// Unknown keys are errors so a misspelt probability cannot silently fall back
// to its default. Keys starting with '_' are comments.
void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError("degradation config: '" + where + "' must be an object");
  for (const auto& [k, _] : j.items()) {
    if (k.starts_with('_')) continue;
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ValidationError("degradation config: unknown key '" + where + "." + k + "'");
  }
}

StageSpec stage_from_json(const json& j, const std::string& where) {
  check_keys(j, {"blur", "resize", "noise", "jpeg"}, where);
  StageSpec s;
  if (j.contains("blur")) {
    const auto& b = j["blur"];
    check_keys(b, {"enabled", "prob", "kernel_list", "kernel_prob", "sigma", "betag", "betap", "sinc_prob"},
               where + ".blur");
    s.blur.enabled = b.value("enabled", true);
    s.blur.prob = b.value("prob", 1.0);
    s.blur.kernel_list = b.value("kernel_list", std::vector<std::string>{});
    s.blur.kernel_prob = b.value("kernel_prob", std::vector<double>{});
    s.blur.sigma = range_of(b, "sigma", s.blur.sigma);
    s.blur.betag = range_of(b, "betag", s.blur.betag);
    s.blur.betap = range_of(b, "betap", s.blur.betap);
    s.blur.sinc_prob = b.value("sinc_prob", s.blur.sinc_prob);
  } else {
    s.blur.enabled = false;
  }
  if (j.contains("resize")) {
    const auto& r = j["resize"];
    check_keys(r, {"enabled", "updown_prob", "scale"}, where + ".resize");
    s.resize.enabled = r.value("enabled", true);
    if (r.contains("updown_prob")) s.resize.updown_prob = r["updown_prob"].get<std::array<double, 3>>();
    s.resize.scale = range_of(r, "scale", s.resize.scale);
  } else {
    s.resize.enabled = false;
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    check_keys(n, {"enabled", "gaussian_prob", "sigma", "poisson_scale", "gray_prob"}, where + ".noise");
    s.noise.enabled = n.value("enabled", true);
    s.noise.gaussian_prob = n.value("gaussian_prob", s.noise.gaussian_prob);
    s.noise.sigma = range_of(n, "sigma", s.noise.sigma);
    s.noise.poisson_scale = range_of(n, "poisson_scale", s.noise.poisson_scale);
    s.noise.gray_prob = n.value("gray_prob", s.noise.gray_prob);
  } else {
    s.noise.enabled = false;
  }
  if (j.contains("jpeg")) {
    check_keys(j["jpeg"], {"enabled", "quality"}, where + ".jpeg");
    s.jpeg.enabled = j["jpeg"].value("enabled", true);
    s.jpeg.quality = range_of(j["jpeg"], "quality", s.jpeg.quality);
  } else {
    s.jpeg.enabled = false;
  }
  return s;
}

json stage_json(const StageSpec& s) {
  return json{{"blur",
               {{"enabled", s.blur.enabled},
                {"prob", s.blur.prob},
                {"kernel_list", s.blur.kernel_list},
                {"kernel_prob", s.blur.kernel_prob},
                {"sigma", range_json(s.blur.sigma)},
                {"betag", range_json(s.blur.betag)},
                {"betap", range_json(s.blur.betap)},
                {"sinc_prob", s.blur.sinc_prob}}},
              {"resize",
               {{"enabled", s.resize.enabled}, {"updown_prob", s.resize.updown_prob}, {"scale", range_json(s.resize.scale)}}},
              {"noise",
               {{"enabled", s.noise.enabled},
                {"gaussian_prob", s.noise.gaussian_prob},
                {"sigma", range_json(s.noise.sigma)},
                {"poisson_scale", range_json(s.noise.poisson_scale)},
                {"gray_prob", s.noise.gray_prob}}},
              {"jpeg", {{"enabled", s.jpeg.enabled}, {"quality", range_json(s.jpeg.quality)}}}};
}

}  // namespace

DegradationConfig config_from_json(const json& j) {
  DegradationConfig c;
  try {
    check_keys(j, {"name", "kernel_size", "first", "second", "final", "resize_modes", "crop_size", "out_scale", "seed"},
               "config");
    c.name = j.value("name", c.name);
    if (j.contains("kernel_size")) {
      const auto ks = range_of(j, "kernel_size", {});
      c.kernel_size_min = static_cast<int>(ks.lo);
      c.kernel_size_max = static_cast<int>(ks.hi);
    }
    c.first = stage_from_json(j.value("first", json::object()), "first");
    c.second = stage_from_json(j.value("second", json::object()), "second");
    const auto f = j.value("final", json::object());
    check_keys(f, {"sinc_prob", "jpeg_first_prob", "jpeg"}, "final");
    c.final_stage.sinc_prob = f.value("sinc_prob", c.final_stage.sinc_prob);
    c.final_stage.jpeg_first_prob = f.value("jpeg_first_prob", c.final_stage.jpeg_first_prob);
    if (f.contains("jpeg")) {
      check_keys(f["jpeg"], {"enabled", "quality"}, "final.jpeg");
      c.final_stage.jpeg.enabled = f["jpeg"].value("enabled", true);
      c.final_stage.jpeg.quality = range_of(f["jpeg"], "quality", c.final_stage.jpeg.quality);
    } else {
      c.final_stage.jpeg.enabled = false;
    }
    c.resize_modes = j.value("resize_modes", c.resize_modes);
    c.crop_size = j.value("crop_size", c.crop_size);
    c.out_scale = j.value("out_scale", c.out_scale);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("degradation config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const DegradationConfig& c) {
  return json{{"name", c.name},
              {"kernel_size", json::array({c.kernel_size_min, c.kernel_size_max})},
              {"first", stage_json(c.first)},
              {"second", stage_json(c.second)},
              {"final",
               {{"sinc_prob", c.final_stage.sinc_prob},
                {"jpeg_first_prob", c.final_stage.jpeg_first_prob},
                {"jpeg", {{"enabled", c.final_stage.jpeg.enabled}, {"quality", range_json(c.final_stage.jpeg.quality)}}}}},
              {"resize_modes", c.resize_modes},
              {"crop_size", c.crop_size},
              {"out_scale", c.out_scale},
              {"seed", c.seed}};
}

DegradationConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFound(path.string());
  try {
    return config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ParseError("degradation config " + path.string() + ": " + e.what());
  }
}

DegradationConfig identity_config(int crop_size, int out_scale) {
  DegradationConfig c;
  c.name = "identity";
  c.first.blur.enabled = c.first.resize.enabled = c.first.noise.enabled = c.first.jpeg.enabled = false;
  c.second = c.first;
  c.final_stage.sinc_prob = 0.0;
  c.final_stage.jpeg.enabled = false;
  c.resize_modes = {"bicubic"};
  c.crop_size = crop_size;
  c.out_scale = out_scale;
  return c;
}

// --- kernels ---------------------------------------------------------------------

std::vector<double> make_kernel(const std::string& family, int size, double sx, double sy, double rotation,
                                double beta) {
  if (size < 1 || size % 2 == 0) throw ValidationError("kernel size must be odd");
  if (!kKernels.contains(family)) throw ValidationError("unknown kernel family '" + family + "'");
  const bool iso = family.ends_with("_iso") || family == "iso";
  if (iso) {
    sy = sx;
    rotation = 0.0;
  }
  // inverse of R diag(sx^2, sy^2) R^T
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double a = c * c / (sx * sx) + s * s / (sy * sy);
  const double b = c * s * (1.0 / (sx * sx) - 1.0 / (sy * sy));
  const double d = s * s / (sx * sx) + c * c / (sy * sy);
  const int half = size / 2;
  std::vector<double> k(static_cast<std::size_t>(size) * size);
  double total = 0.0;
  for (int y = -half; y <= half; ++y)
    for (int x = -half; x <= half; ++x) {
      const double q = a * x * x + 2.0 * b * x * y + d * y * y;
      double v;
      if (family.starts_with("generalized")) v = std::exp(-0.5 * std::pow(q, beta));
      else if (family.starts_with("plateau")) v = 1.0 / (std::pow(q, beta) + 1.0);
      else v = std::exp(-0.5 * q);
      k[static_cast<std::size_t>(y + half) * size + (x + half)] = v;
      total += v;
    }
  for (auto& v : k) v /= total;
  return k;
}

std::vector<double> sinc_kernel(int size, double omega_c) {
  if (size < 1 || size % 2 == 0) throw ValidationError("kernel size must be odd");
  const int half = size / 2;
  std::vector<double> k(static_cast<std::size_t>(size) * size);
  double total = 0.0;
  for (int y = -half; y <= half; ++y)
    for (int x = -half; x <= half; ++x) {
      const double r = std::hypot(x, y);
      const double v = r == 0.0 ? omega_c * omega_c / (4.0 * pi) : omega_c * std::cyl_bessel_j(1.0, omega_c * r) / (2.0 * pi * r);
      k[static_cast<std::size_t>(y + half) * size + (x + half)] = v;
      total += v;
    }
  for (auto& v : k) v /= total;
  return k;
}

namespace {

void clamp01(Image& img) {
  for (auto& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
}

Interp interp_of(const std::string& mode) {
  if (mode == "area") return Interp::Area;
  if (mode == "bilinear") return Interp::Linear;
  return Interp::Cubic;
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
}

std::size_t pick_weighted(const double* p, std::size_t n, Rng& rng) {
  double u = rng.uniform(), acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return n - 1;
}

int draw_kernel_size(const DegradationConfig& c, Rng& rng) {
  const auto steps = (c.kernel_size_max - c.kernel_size_min) / 2;
  return c.kernel_size_min + 2 * static_cast<int>(rng.uniform_int(0, steps));
}

double draw_beta(const Range& r, Rng& rng) {
  return rng.uniform() < 0.5 ? rng.uniform(r.lo, std::max(r.lo, 1.0)) : rng.uniform(std::min(1.0, r.hi), r.hi);
}

void blur_op(Image& img, const BlurSpec& b, const DegradationConfig& c, Rng& rng, json& log) {
  const int size = draw_kernel_size(c, rng);
  if (rng.uniform() < b.sinc_prob) {
    const double omega = size < 13 ? rng.uniform(pi / 3, pi) : rng.uniform(pi / 5, pi);
    img = filter(img, sinc_kernel(size, omega), size);
    log.push_back({{"op", "blur"}, {"kernel", "sinc"}, {"size", size}, {"omega_c", omega}});
  } else {
    const auto& family = b.kernel_list[pick_weighted(b.kernel_prob.data(), b.kernel_prob.size(), rng)];
    const double sx = rng.uniform(b.sigma.lo, b.sigma.hi);
    const double sy = rng.uniform(b.sigma.lo, b.sigma.hi);
    const double rot = rng.uniform(-pi, pi);
    double beta = 1.0;
    if (family.starts_with("generalized")) beta = draw_beta(b.betag, rng);
    if (family.starts_with("plateau")) beta = draw_beta(b.betap, rng);
    img = filter(img, make_kernel(family, size, sx, sy, rot, beta), size);
    log.push_back({{"op", "blur"}, {"kernel", family}, {"size", size}, {"sigma_x", sx}, {"sigma_y", sy},
                   {"rotation", rot}, {"beta", beta}});
  }
  clamp01(img);
}

void resize_op(Image& img, const ResizeSpec& r, double base_h, double base_w, const DegradationConfig& c, Rng& rng,
               json& log) {
  const auto kind = pick_weighted(r.updown_prob.data(), 3, rng);
  const double scale = kind == 0 ? rng.uniform(1.0, std::max(1.0, r.scale.hi))
                       : kind == 1 ? rng.uniform(std::min(r.scale.lo, 1.0), 1.0)
                                   : 1.0;
  const auto& mode = pick(c.resize_modes, rng);
  const int h = std::max(1, static_cast<int>(base_h * scale));
  const int w = std::max(1, static_cast<int>(base_w * scale));
  img = resize(img, h, w, interp_of(mode));
  clamp01(img);
  log.push_back({{"op", "resize"}, {"scale", scale}, {"mode", mode}, {"height", h}, {"width", w}});
}

void noise_op(Image& img, const NoiseSpec& n, Rng& rng, json& log) {
  const bool gray = rng.uniform() < n.gray_prob;
  const std::size_t pixels = static_cast<std::size_t>(img.height()) * img.width();
  auto px = img.data();
  if (rng.uniform() < n.gaussian_prob) {
    const double sigma = rng.uniform(n.sigma.lo, n.sigma.hi) / 255.0;
    for (std::size_t i = 0; i < pixels; ++i) {
      const double g = gray ? rng.normal() * sigma : 0.0;
      for (int ch = 0; ch < 3; ++ch)
        px[i * 3 + ch] += static_cast<float>(gray ? g : rng.normal() * sigma);
    }
    log.push_back({{"op", "noise"}, {"type", "gaussian"}, {"sigma", sigma * 255.0}, {"gray", gray}});
  } else {
    const double scale = rng.uniform(n.poisson_scale.lo, n.poisson_scale.hi);
    // Poisson on 8-bit levels, vals rounded up to a power of two
    std::set<int> levels;
    for (float v : px) levels.insert(static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    const double vals = std::exp2(std::ceil(std::log2(static_cast<double>(std::max<std::size_t>(levels.size(), 2)))));
    auto shot = [&](double v) {
      const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
      return (static_cast<double>(rng.poisson(q * vals)) / vals - q) * scale;
    };
    for (std::size_t i = 0; i < pixels; ++i) {
      if (gray) {
        const double y = 0.299 * px[i * 3] + 0.587 * px[i * 3 + 1] + 0.114 * px[i * 3 + 2];
        const double d = shot(y);
        for (int ch = 0; ch < 3; ++ch) px[i * 3 + ch] += static_cast<float>(d);
      } else {
        for (int ch = 0; ch < 3; ++ch) px[i * 3 + ch] += static_cast<float>(shot(px[i * 3 + ch]));
      }
    }
    log.push_back({{"op", "noise"}, {"type", "poisson"}, {"scale", scale}, {"gray", gray}});
  }
  clamp01(img);
}

void jpeg_op(Image& img, const JpegSpec& j, Rng& rng, json& log) {
  const int q = static_cast<int>(std::lround(rng.uniform(j.quality.lo, j.quality.hi)));
  img = jpeg_roundtrip(img, q);
  clamp01(img);
  log.push_back({{"op", "jpeg"}, {"quality", q}});
}

void run_stage(Image& img, const StageSpec& s, double base_h, double base_w, const DegradationConfig& c, Rng& rng,
               json& log) {
  if (s.blur.enabled && rng.uniform() < s.blur.prob) blur_op(img, s.blur, c, rng, log);
  if (s.resize.enabled) resize_op(img, s.resize, base_h, base_w, c, rng, log);
  if (s.noise.enabled) noise_op(img, s.noise, rng, log);
  if (s.jpeg.enabled) jpeg_op(img, s.jpeg, rng, log);
}

}  // namespace

Image filter(const Image& img, const std::vector<double>& kernel, int size) {
  if (kernel.size() != static_cast<std::size_t>(size) * size) throw ShapeMismatch("kernel size mismatch");
  const cv::Mat src(img.height(), img.width(), CV_32FC3, const_cast<float*>(img.data().data()));
  cv::Mat k(size, size, CV_32F);
  for (int i = 0; i < size * size; ++i) k.at<float>(i / size, i % size) = static_cast<float>(kernel[i]);
  Image out(img.height(), img.width());
  cv::Mat dst(out.height(), out.width(), CV_32FC3, out.data().data());
  cv::filter2D(src, dst, CV_32F, k, {-1, -1}, 0.0, cv::BORDER_REFLECT_101);
  return out;
}

Crop random_crop(const Image& img, int size, Rng& rng) {
  if (size < 1 || img.height() < size || img.width() < size)
    throw ValidationError("random_crop: source " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                          " is smaller than " + std::to_string(size));
  Crop c;
  c.top = static_cast<int>(rng.uniform_int(0, img.height() - size));
  c.left = static_cast<int>(rng.uniform_int(0, img.width() - size));
  c.image = crop(img, c.top, c.left, size, size);
  return c;
}

Crop median_center_crop(const Image& img, int size) {
  if (size < 1 || img.height() < size || img.width() < size)
    throw ValidationError("median_center_crop: source is smaller than " + std::to_string(size));
  Crop c;
  c.top = (img.height() - size) / 2;
  c.left = (img.width() - size) / 2;
  c.image = crop(img, c.top, c.left, size, size);
  return c;
}

Degraded degrade(const Image& hr, const DegradationConfig& cfg, Rng& rng) {
  cfg.validate();
  if (hr.height() != cfg.crop_size || hr.width() != cfg.crop_size)
    throw ValidationError("degrade: expected a " + std::to_string(cfg.crop_size) + "x" + std::to_string(cfg.crop_size) +
                          " input, got " + std::to_string(hr.width()) + "x" + std::to_string(hr.height()));
  Degraded out;
  out.params = json::array();
  Image img = hr;
  const double h = hr.height(), w = hr.width();
  run_stage(img, cfg.first, h, w, cfg, rng, out.params);
  run_stage(img, cfg.second, h / cfg.out_scale, w / cfg.out_scale, cfg, rng, out.params);

  const int oh = cfg.crop_size / cfg.out_scale, ow = cfg.crop_size / cfg.out_scale;
  auto resize_sinc = [&] {
    const auto& mode = pick(cfg.resize_modes, rng);
    img = resize(img, oh, ow, interp_of(mode));
    clamp01(img);
    out.params.push_back({{"op", "resize"}, {"mode", mode}, {"height", oh}, {"width", ow}});
    if (rng.uniform() < cfg.final_stage.sinc_prob) {
      const int size = draw_kernel_size(cfg, rng);
      const double omega = rng.uniform(pi / 3, pi);
      img = filter(img, sinc_kernel(size, omega), size);
      clamp01(img);
      out.params.push_back({{"op", "sinc"}, {"size", size}, {"omega_c", omega}});
    }
  };
  const bool jpeg_first = rng.uniform() < cfg.final_stage.jpeg_first_prob;
  if (jpeg_first && cfg.final_stage.jpeg.enabled) jpeg_op(img, cfg.final_stage.jpeg, rng, out.params);
  resize_sinc();
  if (!jpeg_first && cfg.final_stage.jpeg.enabled) jpeg_op(img, cfg.final_stage.jpeg, rng, out.params);
  clamp01(img);
  out.lr = std::move(img);
  return out;
}

// --- dataset building ----------------------------------------------------------

namespace {

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::string pair_id(const std::string& tag, int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", k);
  return tag + "_" + buf;
}

}  // namespace

DatasetPlan plan_dataset(const std::vector<SourceSpec>& sources, const DegradationConfig& cfg, int held_out) {
  cfg.validate();
  if (sources.empty()) throw ValidationError("build_dataset: no sources");
  if (held_out < 0) throw ValidationError("build_dataset: held-out size must be >= 0");
  DatasetPlan plan;
  std::set<std::string> tags;
  for (const auto& s : sources) {
    if (!fs::is_directory(s.dir)) throw FileNotFound(s.dir.string());
    if (s.count < 0) throw ValidationError("build_dataset: negative count for " + s.dir.string());
    DatasetPlan::Source src;
    src.tag = s.tag.empty() ? s.dir.filename().string() : s.tag;
    if (src.tag.empty()) src.tag = s.dir.parent_path().filename().string();
    if (!tags.insert(src.tag).second) throw ValidationError("build_dataset: duplicate source tag '" + src.tag + "'");
    src.count = s.count;
    for (const auto& e : fs::directory_iterator(s.dir)) {
      if (!e.is_regular_file() || !is_image(e.path())) continue;
      const auto dims = probe_dimensions(e.path());
      if (!dims) continue;
      const auto [w, h] = *dims;
      if (w < cfg.crop_size || h < cfg.crop_size) continue;
      src.files.push_back(e.path());
      src.available += static_cast<std::uint64_t>(w - cfg.crop_size + 1) * static_cast<std::uint64_t>(h - cfg.crop_size + 1);
    }
    std::sort(src.files.begin(), src.files.end());
    if (static_cast<std::uint64_t>(s.count) > src.available)
      throw ValidationError("build_dataset: source '" + src.tag + "' offers " + std::to_string(src.available) +
                            " crop positions of size " + std::to_string(cfg.crop_size) + ", " +
                            std::to_string(s.count) + " requested");
    plan.total += s.count;
    plan.sources.push_back(std::move(src));
  }
  if (held_out > plan.total)
    throw ValidationError("build_dataset: held-out size " + std::to_string(held_out) + " exceeds " +
                          std::to_string(plan.total) + " pairs");
  plan.held_out = held_out;
  return plan;
}

BuildResult build_dataset(const std::vector<SourceSpec>& sources, const DegradationConfig& cfg,
                          const BuildOptions& opts) {
  const auto plan = plan_dataset(sources, cfg, opts.held_out);
  fs::create_directories(opts.out / "hr");
  fs::create_directories(opts.out / "lr");

  struct Job {
    int source, k;
  };
  std::vector<Job> jobs;
  for (int s = 0; s < static_cast<int>(plan.sources.size()); ++s)
    for (int k = 0; k < plan.sources[s].count; ++k) jobs.push_back({s, k});

  std::vector<ImageTriplet> triplets(jobs.size());
  std::vector<json> pair_specs(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const int lr_side = cfg.crop_size / cfg.out_scale;

  auto worker = [&] {
    for (std::size_t i; (i = next++) < jobs.size();) {
      try {
        const auto& job = jobs[i];
        const auto& src = plan.sources[job.source];
        const auto& file = src.files[static_cast<std::size_t>(job.k) % src.files.size()];
        Rng rng(derive_key(cfg.seed, {static_cast<std::uint64_t>(job.source), static_cast<std::uint64_t>(job.k)}));
        const auto c = random_crop(decode_image(file), cfg.crop_size, rng);
        const auto d = degrade(c.image, cfg, rng);
        const auto id = pair_id(src.tag, job.k);
        const fs::path hr_rel = fs::path("hr") / (id + ".png"), lr_rel = fs::path("lr") / (id + ".png");
        write_png(c.image, opts.out / hr_rel);
        write_png(d.lr, opts.out / lr_rel);

        ImageTriplet t;
        t.id = id;
        t.gt = {id, hr_rel, Role::GT, cfg.crop_size, cfg.crop_size};
        t.sr = {id, hr_rel, Role::SR, cfg.crop_size, cfg.crop_size};
        t.lr = {id, lr_rel, Role::LR, lr_side, lr_side};
        t.model_tag = "hr-copy";
        t.dataset_tag = src.tag;
        t.scale = cfg.out_scale;
        triplets[i] = std::move(t);
        pair_specs[i] = json{{"id", id},
                             {"source", file.filename().string()},
                             {"source_tag", src.tag},
                             {"crop_origin", {c.top, c.left}},
                             {"stream", {cfg.seed, job.source, job.k}},
                             {"params", d.params}};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::clamp(opts.workers, 1, std::max(1, static_cast<int>(jobs.size())));
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);

  BuildResult r;
  const std::string note = "degrade config=" + cfg.name + " seed=" + std::to_string(cfg.seed);
  for (auto* m : {&r.all, &r.train, &r.val}) {
    m->source_note = note;
    m->base_dir = opts.out;
  }
  r.all.entries = triplets;

  std::vector<std::size_t> order(triplets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split(derive_key(cfg.seed, {0x76616c}));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(split.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  std::vector<bool> is_val(triplets.size(), false);
  for (int i = 0; i < plan.held_out; ++i) is_val[order[i]] = true;
  for (std::size_t i = 0; i < triplets.size(); ++i) (is_val[i] ? r.val : r.train).entries.push_back(triplets[i]);

  save_manifest(r.all, opts.out / "manifest.jsonl");
  save_manifest(r.train, opts.out / "manifest_train.jsonl");
  save_manifest(r.val, opts.out / "manifest_val.jsonl");
  std::ofstream pairs(opts.out / "pairs.jsonl", std::ios::trunc);
  for (const auto& p : pair_specs) pairs << p.dump() << '\n';
  if (!pairs) throw IoError("cannot write " + (opts.out / "pairs.jsonl").string());
  log::info("built " + std::to_string(triplets.size()) + " pairs (" + std::to_string(plan.held_out) + " held out) in " +
            opts.out.string());
  return r;
}

}  // namespace hallucheck::degrade
