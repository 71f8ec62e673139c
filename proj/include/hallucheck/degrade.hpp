#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hallucheck/image.hpp"
#include "hallucheck/manifest.hpp"
#include "hallucheck/rng.hpp"

namespace hallucheck::degrade {

struct Range {
  double lo = 0.0, hi = 0.0;
};

struct BlurSpec {
  bool enabled = true;
  double prob = 1.0;
  std::vector<std::string> kernel_list;  // iso, aniso, generalized_iso, ...
  std::vector<double> kernel_prob;
  Range sigma{0.2, 3.0};
  Range betag{0.5, 4.0};
  Range betap{1.0, 2.0};
  double sinc_prob = 0.1;
};

struct ResizeSpec {
  bool enabled = true;
  std::array<double, 3> updown_prob{0.2, 0.7, 0.1};  // up, down, keep
  Range scale{0.15, 1.5};
};

struct NoiseSpec {
  bool enabled = true;
  double gaussian_prob = 0.5;  // otherwise Poisson
  Range sigma{1.0, 30.0};      // on the 0..255 scale
  Range poisson_scale{0.05, 3.0};
  double gray_prob = 0.4;
};

struct JpegSpec {
  bool enabled = true;
  Range quality{30.0, 95.0};
};

struct StageSpec {
  BlurSpec blur;
  ResizeSpec resize;
  NoiseSpec noise;
  JpegSpec jpeg;
};

struct FinalSpec {
  double sinc_prob = 0.8;
  double jpeg_first_prob = 0.5;  // JPEG before resize+sinc, else after
  JpegSpec jpeg;
};

struct DegradationConfig {
  std::string name = "custom";
  int kernel_size_min = 7;  // odd kernel sizes are drawn from [min, max]
  int kernel_size_max = 21;
  StageSpec first;
  StageSpec second;
  FinalSpec final_stage;
  std::vector<std::string> resize_modes{"area", "bilinear", "bicubic"};
  int crop_size = 512;
  int out_scale = 4;
  std::uint64_t seed = 0;

  /// Throws ValidationError on out-of-range probabilities, empty ranges,
  /// unknown kernel or resize names, or a crop size not divisible by out_scale.
  void validate() const;
};

DegradationConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DegradationConfig& c);
DegradationConfig load_config(const std::filesystem::path& path);

/// Everything disabled, final resize bicubic only: LR is the bicubic downsample.
DegradationConfig identity_config(int crop_size = 512, int out_scale = 4);

/// Normalized 2-D kernel of the given family, size odd.
std::vector<double> make_kernel(const std::string& family, int size, double sigma_x, double sigma_y,
                                double rotation, double beta);
/// Circular low-pass (jinc) kernel with cutoff omega_c.
std::vector<double> sinc_kernel(int size, double omega_c);

/// Convolves every channel with a size×size kernel, reflect-101 borders.
Image filter(const Image& img, const std::vector<double>& kernel, int size);

struct Crop {
  Image image;
  int top = 0, left = 0;
};

/// Uniform top-left origin. Throws ValidationError if the image is smaller than size.
Crop random_crop(const Image& img, int size, Rng& rng);
Crop median_center_crop(const Image& img, int size);

struct Degraded {
  Image lr;
  nlohmann::json params;  // every sampled parameter, in application order
};

/// Two-stage degradation plus the final stage. Output is crop/out_scale per side,
/// clamped to [0,1] after every operation.
Degraded degrade(const Image& hr, const DegradationConfig& cfg, Rng& rng);

// --- dataset building ----------------------------------------------------------

struct SourceSpec {
  std::filesystem::path dir;
  int count = 0;
  std::string tag;  // defaults to the directory name
};

struct BuildOptions {
  std::filesystem::path out;
  int held_out = 100;
  int workers = 1;
};

struct DatasetPlan {
  struct Source {
    std::string tag;
    std::vector<std::filesystem::path> files;
    int count = 0;
    std::uint64_t available = 0;  // distinct crop positions
  };
  std::vector<Source> sources;
  int total = 0;
  int held_out = 0;
};

/// Lists and probes the sources without decoding; throws ValidationError when
/// a source has fewer crop positions than requested.
DatasetPlan plan_dataset(const std::vector<SourceSpec>& sources, const DegradationConfig& cfg, int held_out);

struct BuildResult {
  EvalManifest all;
  EvalManifest train;
  EvalManifest val;
};

/// Writes <out>/hr/<id>.png, <out>/lr/<id>.png, pairs.jsonl (crop origin and
/// sampled parameters per pair), manifest.jsonl (all pairs),
/// manifest_train.jsonl and manifest_val.jsonl. Each pair draws from its own
/// stream keyed by (seed, source index, pair index).
BuildResult build_dataset(const std::vector<SourceSpec>& sources, const DegradationConfig& cfg,
                          const BuildOptions& opts);

}  // namespace hallucheck::degrade
