#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hallucheck/adapters.hpp"
#include "hallucheck/features.hpp"
#include "hallucheck/image.hpp"
#include "hallucheck/manifest.hpp"

namespace hallucheck::metrics {

enum class MetricKind { FR, NR };
enum class Direction { Lower, Higher };  // which way is better

/// What a metric callable receives. NR metrics get `gt` and `lr` as null.
struct MetricInput {
  std::string triplet_id;
  const Image* sr = nullptr;
  const Image* gt = nullptr;
  const Image* lr = nullptr;
};

using MetricFn = std::function<double(const MetricInput&)>;

struct MetricEntry {
  std::string name;
  MetricKind kind = MetricKind::FR;
  Direction direction = Direction::Lower;
  MetricFn fn;  // empty for an optional slot with no provider

  bool available() const { return static_cast<bool>(fn); }
};

/// Name -> metric. Known-but-unfilled slots (external models without an
/// adapter) are accepted by the suite and skipped with a warning; names that
/// were never declared are rejected.
class MetricRegistry {
 public:
  /// Throws ValidationError if `name` already has a provider.
  const MetricEntry& register_metric(const std::string& name, MetricFn fn, MetricKind kind,
                                     Direction direction = Direction::Lower);
  /// Declares an optional slot; a later register_metric fills it.
  void declare_slot(const std::string& name, MetricKind kind, Direction direction);

  bool known(const std::string& name) const { return entries_.contains(name); }
  const MetricEntry& at(const std::string& name) const;
  std::vector<std::string> names() const;
  std::map<std::string, Direction> directions() const;

 private:
  std::map<std::string, MetricEntry> entries_;
};

/// Feature backends by family ("dino", "clip") plus the SSD adapters.
struct SuiteResources {
  std::map<std::string, std::shared_ptr<features::Backend>> backends;
  std::vector<int> interm_layers = features::kIntermLayers;
  std::shared_ptr<adapters::Tagger> tagger;
  std::shared_ptr<adapters::Segmenter> segmenter;
};

/// Registers the built-in metrics: mse, psnr, ssim, sharpness, the feature
/// distances {dino,clip}_{st,cls}[_interm] for each family present in
/// `res.backends`, ssd when tagger and segmenter are present, and optional
/// slots for the external IQA models (lpips, dists, musiq, clipiqa, qalign,
/// tlr, deepvit).
MetricRegistry default_registry(const SuiteResources& res);

/// Direction of each metric name the toolkit knows, including external ones.
Direction default_direction(const std::string& metric);

struct MetricVector {
  std::string triplet_id;
  std::map<std::string, double> values;
  std::vector<std::pair<std::string, std::string>> skipped;  // (metric, reason)
};

struct SuiteConfig {
  std::vector<std::string> metrics;
};

/// Throws UnknownName before any computation if a name is not registered.
void check_metric_names(const MetricRegistry& reg, const std::vector<std::string>& names);

/// Decodes the triplet, checks its size invariants, and computes each metric:
/// FR metrics on (sr, gt), NR metrics on sr only. Unavailable optional
/// metrics are skipped with a logged reason.
MetricVector run_metric_suite(const ImageTriplet& triplet, const EvalManifest& manifest, const SuiteConfig& cfg,
                              const MetricRegistry& reg);

/// Same, on already-decoded images.
MetricVector run_metric_suite(const std::string& triplet_id, const Image& lr, const Image& sr, const Image& gt,
                              int scale, const SuiteConfig& cfg, const MetricRegistry& reg);

}  // namespace hallucheck::metrics
