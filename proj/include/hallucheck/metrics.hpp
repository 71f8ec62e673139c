#pragma once

#include <string>
#include <vector>

#include "hallucheck/image.hpp"

namespace hallucheck::metrics {

/// Mean over all pixels and channels of (a - b)^2.
double mse(const Image& a, const Image& b);

/// -10 log10(mse) with peak 1.0; +inf for identical images.
double psnr_from_mse(double mse);
double psnr(const Image& a, const Image& b);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Single-scale SSIM on BT.601 luma: Gaussian-weighted local statistics over
/// every fully-contained window, mean-pooled.
double ssim(const Image& a, const Image& b, const SsimParams& params = {});

/// Variance of the 3x3 Laplacian response of the 0-255 luma, interior pixels only.
double sharpness(const Image& img);

/// Per-pixel class distributions from an open-vocabulary segmenter.
struct SegmentationDistribution {
  std::vector<std::string> labels;
  int height = 0;
  int width = 0;
  std::vector<double> probs;  // (y * width + x) * K + k

  int classes() const { return static_cast<int>(labels.size()); }
  double& at(int y, int x, int k) { return probs[(static_cast<std::size_t>(y) * width + x) * labels.size() + k]; }
  double at(int y, int x, int k) const {
    return probs[(static_cast<std::size_t>(y) * width + x) * labels.size() + k];
  }

  /// Throws ValidationError unless every pixel is a distribution (sum 1 +- 1e-6, all >= 0).
  void validate(double tol = 1e-6) const;
};

inline constexpr double kSsdEpsilon = 1e-10;

/// Mean over pixels of KL(P_gt || P_sr), with P_sr floored at epsilon.
double ssd(const SegmentationDistribution& gt, const SegmentationDistribution& sr, double epsilon = kSsdEpsilon);

}  // namespace hallucheck::metrics
