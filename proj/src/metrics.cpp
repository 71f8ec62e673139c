#include "hallucheck/metrics.hpp"

#include <cmath>
#include <algorithm>
#include <limits>

#include "hallucheck/error.hpp"

namespace hallucheck::metrics {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeMismatch(std::string(op) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                        std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                        std::to_string(b.width()));
  if (a.empty()) throw ValidationError(std::string(op) + ": empty image");
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-((i - c) * (i - c)) / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable 'valid' correlation: output is (H - n + 1) x (W - n + 1).
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = in.height - n + 1;
  const int ow = in.width - n + 1;
  Plane rows{in.height, ow, std::vector<double>(static_cast<std::size_t>(in.height) * ow)};
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * in.at(y, x + i);
      rows.at(y, x) = s;
    }
  Plane out{oh, ow, std::vector<double>(static_cast<std::size_t>(oh) * ow)};
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * rows.at(y + i, x);
      out.at(y, x) = s;
    }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane p = a;
  for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] *= b.data[i];
  return p;
}

}  // namespace

double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  const auto da = a.data();
  const auto db = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = static_cast<double>(da[i]) - static_cast<double>(db[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(da.size());
}

double psnr_from_mse(double m) {
  if (m <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(m);
}

double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

double ssim(const Image& a, const Image& b, const SsimParams& p) {
  require_same_shape(a, b, "ssim");
  if (a.height() < p.window || a.width() < p.window)
    throw ValidationError("ssim: image smaller than the " + std::to_string(p.window) + "x" +
                          std::to_string(p.window) + " window");
  const Plane x = luma(a);
  const Plane y = luma(b);
  const auto k = gaussian_kernel(p.window, p.sigma);
  const Plane mx = filter_valid(x, k);
  const Plane my = filter_valid(y, k);
  const Plane sxx = filter_valid(product(x, x), k);
  const Plane syy = filter_valid(product(y, y), k);
  const Plane sxy = filter_valid(product(x, y), k);
  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.data.size(); ++i) {
    const double ux = mx.data[i], uy = my.data[i];
    const double vx = sxx.data[i] - ux * ux;
    const double vy = syy.data[i] - uy * uy;
    const double cxy = sxy.data[i] - ux * uy;
    acc += ((2 * ux * uy + c1) * (2 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.data.size());
}

double sharpness(const Image& img) {
  if (img.empty()) throw ValidationError("sharpness: empty image");
  if (img.height() < 3 || img.width() < 3) return 0.0;
  Plane g = luma(img);
  for (auto& v : g.data) v *= 255.0;
  double sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (int y = 1; y + 1 < g.height; ++y)
    for (int x = 1; x + 1 < g.width; ++x) {
      const double r = g.at(y - 1, x) + g.at(y + 1, x) + g.at(y, x - 1) + g.at(y, x + 1) - 4.0 * g.at(y, x);
      sum += r;
      sum2 += r * r;
      ++n;
    }
  const double mean = sum / static_cast<double>(n);
  const double var = sum2 / static_cast<double>(n) - mean * mean;
  return var < 0.0 ? 0.0 : var;
}

void SegmentationDistribution::validate(double tol) const {
  const std::size_t k = labels.size();
  if (k == 0) throw ValidationError("segmentation: empty label list");
  if (probs.size() != static_cast<std::size_t>(height) * width * k)
    throw ShapeMismatch("segmentation: probability buffer does not match H x W x K");
  for (std::size_t p = 0; p < probs.size(); p += k) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (!(probs[p + j] >= 0.0)) throw ValidationError("segmentation: negative or NaN probability");
      s += probs[p + j];
    }
    if (std::abs(s - 1.0) > tol) throw ValidationError("segmentation: pixel distribution does not sum to 1");
  }
}

double ssd(const SegmentationDistribution& gt, const SegmentationDistribution& sr, double epsilon) {
  if (gt.height != sr.height || gt.width != sr.width) throw ShapeMismatch("ssd: segmentation sizes differ");
  if (gt.labels != sr.labels) throw ShapeMismatch("ssd: label lists differ");
  if (gt.probs.size() != sr.probs.size()) throw ShapeMismatch("ssd: probability buffers differ in size");
  const std::size_t k = gt.labels.size();
  const std::size_t pixels = static_cast<std::size_t>(gt.height) * gt.width;
  if (pixels == 0 || k == 0) throw ValidationError("ssd: empty segmentation");
  double total = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    double kl = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double pg = gt.probs[p * k + j];
      if (pg <= 0.0) continue;
      const double ps = std::max(sr.probs[p * k + j], epsilon);
      kl += pg * std::log(pg / ps);
    }
    total += std::max(kl, 0.0);  // roundoff and the epsilon floor can push a zero KL below 0
  }
  return total / static_cast<double>(pixels);
}

}  // namespace hallucheck::metrics
