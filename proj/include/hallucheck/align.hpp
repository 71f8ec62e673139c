#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hallucheck/autodiff.hpp"
#include "hallucheck/error.hpp"
#include "hallucheck/features.hpp"
#include "hallucheck/image.hpp"
#include "hallucheck/manifest.hpp"
#include "hallucheck/rng.hpp"

namespace hallucheck::align {

using ad::Mat;
using ad::Var;

/// Image <-> (H*W) x 3 matrix, row y*W + x.
Mat to_mat(const Image& img);
Image to_image(const Mat& m, int height, int width);

// --- differentiable reward backends ---------------------------------------------

class DiffBackend {
 public:
  virtual ~DiffBackend() = default;
  virtual std::string id() const = 0;
  virtual int depth() const = 0;
  /// One (tokens x dim) matrix per requested layer; CLS gives a single row.
  virtual std::vector<Var> tokens(ad::Tape& tape, Var img, int height, int width, features::TokenKind kind,
                                  const std::vector<int>& layers) = 0;
  /// Gradient-free path used for the reference image.
  virtual std::vector<Mat> reference_tokens(const Image& img, features::TokenKind kind, const std::vector<int>& layers);
};

/// Small ViT-like token network: non-overlapping patches, linear embedding,
/// residual tanh blocks. Weights are drawn from a seed; no files needed.
class ToyVitBackend : public DiffBackend {
 public:
  struct Options {
    std::string id = "toy-vit";
    int patch = 8;
    int dim = 24;
    int depth = 12;
    std::uint64_t seed = 11;
  };
  explicit ToyVitBackend(Options opts);

  std::string id() const override { return opts_.id; }
  int depth() const override { return opts_.depth; }
  std::vector<Var> tokens(ad::Tape& tape, Var img, int height, int width, features::TokenKind kind,
                          const std::vector<int>& layers) override;

 private:
  Options opts_;
  Mat embed_;
  std::vector<Mat> w_, b_;
  std::map<std::pair<int, int>, ad::Index> patch_index_;
};

class QualityBackend {
 public:
  virtual ~QualityBackend() = default;
  /// Differentiable quality score Q(img) in [0, q_max()].
  virtual Var score(ad::Tape& tape, Var img, int height, int width) = 0;
  virtual double q_max() const = 0;
  double score_value(const Image& img);
};

/// Q = q_max * e / (e + c), e the mean squared Laplacian of luma: a smooth
/// sharpness-driven stand-in for a learned no-reference quality model.
class LaplacianQuality : public QualityBackend {
 public:
  explicit LaplacianQuality(double q_max = 100.0, double c = 0.01) : q_max_(q_max), c_(c) {}
  Var score(ad::Tape& tape, Var img, int height, int width) override;
  double q_max() const override { return q_max_; }

 private:
  double q_max_, c_;
  std::map<std::pair<int, int>, ad::Index> index_;
};

/// Constant score, for tests and dry runs.
class ConstantQuality : public QualityBackend {
 public:
  ConstantQuality(double q, double q_max) : q_(q), q_max_(q_max) {}
  Var score(ad::Tape& tape, Var, int, int) override { return tape.constant(Mat::Constant(1, 1, q_)); }
  double q_max() const override { return q_max_; }

 private:
  double q_, q_max_;
};

// --- reward composition ----------------------------------------------------------

enum class QualityTerm { None, MusiqLike };
/// Normalized: Q(sr)/Q_max. LiteralCosine: cos(Q(sr), Q(gt)) of two scalars,
/// which is +-1 and carries no gradient.
enum class QualityForm { Normalized, LiteralCosine };

struct RewardConfig {
  std::string semantic_backend = "dino";
  features::TokenKind token_kind = features::TokenKind::ST;
  std::vector<int> layers = features::kIntermLayers;
  QualityTerm quality = QualityTerm::MusiqLike;
  QualityForm quality_form = QualityForm::Normalized;
  double lambda = 0.05;

  void validate() const;
};

nlohmann::json to_json(const RewardConfig& c);
RewardConfig reward_config_from_json(const nlohmann::json& j);

struct RewardPreset {
  std::string name;
  RewardConfig config;
};
/// dino-st (lambda 0.05), clip-st (0.1), clip-cls (0.05).
std::vector<RewardPreset> reward_presets();
RewardConfig reward_preset(const std::string& name);

struct RewardModels {
  std::shared_ptr<DiffBackend> semantic;
  std::shared_ptr<QualityBackend> quality;
};

/// Toy stand-ins for the named backend family ("dino" or "clip").
RewardModels toy_reward_models(const RewardConfig& cfg, std::uint64_t seed = 0);

/// Mean over tokens of the cosine similarity of concatenated layer features.
Var semantic_reward(ad::Tape& tape, Var sr, int height, int width, const Image& gt, DiffBackend& backend,
                    const RewardConfig& cfg);
Var quality_reward(ad::Tape& tape, Var sr, int height, int width, const Image& gt, QualityBackend& backend,
                   QualityForm form);
/// semantic + lambda * quality (quality omitted when the term is None).
Var combined_reward(ad::Tape& tape, Var sr, int height, int width, const Image& gt, const RewardModels& models,
                    const RewardConfig& cfg);

// --- adapters ----------------------------------------------------------------------

enum class Sampler { DDIM, UniPC, Toy };
enum class PromptSource { Tags, Caption, None };

std::string to_string(Sampler s);
std::string to_string(PromptSource p);

struct AdapterSpec {
  std::string name;
  Sampler sampler = Sampler::Toy;
  int steps = 4;
  double cfg_weight = 1.0;
  PromptSource prompt_source = PromptSource::None;
  std::string positive_suffix;
  std::string negative_prompt;
  std::string trainable_scope = "lora_unet_only";
  int lora_rank = 4;
  std::vector<std::string> frozen_parts{"controlnet", "vae", "text_encoder"};

  /// steps >= 1, lora_rank >= 1, control branch frozen, LoRA-only scope.
  void validate() const;
};

nlohmann::json to_json(const AdapterSpec& s);

/// seesr-like, pasd-like and toy.
std::vector<AdapterSpec> adapter_presets();
AdapterSpec adapter_preset(const std::string& name);

class MemoryBudgetExceeded : public Error {
 public:
  MemoryBudgetExceeded(const std::string& what, int max_truncation) : Error(what), max_truncation_(max_truncation) {}
  int max_truncation() const { return max_truncation_; }

 private:
  int max_truncation_;
};

struct SampleOptions {
  std::optional<int> truncation;   // keep gradients through the last K steps only
  std::size_t memory_budget = 0;   // bytes of tape activations, 0 = unlimited
};

struct ToyAdapterOptions {
  int size = 32;
  int scale = 4;
  int hidden = 24;
  int control = 12;
  double lora_alpha = 4.0;
  std::uint64_t seed = 1234;
};

/// Conditional denoiser on size x size RGB with a size/scale LR conditioning
/// path. A frozen control branch encodes the upsampled LR; the denoiser
/// predicts x0 as the control image plus a residual from a per-pixel MLP over
/// 3x3 neighbourhoods. LoRA (rank r, B initialized to zero) wraps the three
/// denoiser linears; only those factors are trainable.
class ToyAdapter {
 public:
  using Options = ToyAdapterOptions;
  explicit ToyAdapter(AdapterSpec spec = adapter_preset("toy"), Options opts = {});

  const AdapterSpec& spec() const { return spec_; }
  const Options& options() const { return opts_; }
  std::vector<ad::Param>& base() { return base_; }
  std::vector<ad::Param>& lora() { return lora_; }
  const std::vector<ad::Param>& base() const { return base_; }
  const std::vector<ad::Param>& lora() const { return lora_; }

  /// SHA-256 over every frozen parameter, and per parameter.
  std::string base_hash() const;
  std::map<std::string, std::string> param_hashes() const;

  /// Runs the sampler keeping the graph. Returns the decoded image as a
  /// (size*size) x 3 variable in [0, 1].
  Var sample_differentiable(ad::Tape& tape, const Image& lr, Rng& rng, const SampleOptions& opts = {});
  /// Same sample without gradients.
  Image sample(const Image& lr, Rng& rng);

 private:
  Var denoise_x0(ad::Tape& tape, Var x, const Mat& control_feat, const Mat& control_img, double t, bool grad);
  Mat control_features(const Mat& cond) const;
  Var lora_linear(ad::Tape& tape, Var x, int layer, bool grad);

  AdapterSpec spec_;
  Options opts_;
  std::vector<ad::Param> base_;
  std::vector<ad::Param> lora_;
  ad::Index im2col_;
  std::vector<double> alpha_bar_;
};

// --- training ----------------------------------------------------------------------

struct TrainConfig {
  int total_steps = 200;
  int batch = 8;
  int grad_accum = 4;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::optional<int> truncation;  // empty = full backprop
  std::size_t memory_budget_mb = 0;
  std::uint64_t seed = 0;

  int effective_batch() const { return batch * grad_accum; }
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; "truncation" may be an integer or "full".
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainLogRow {
  int step = 0;
  double reward_mean = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct TrainRun {
  TrainConfig config;
  std::vector<TrainLogRow> log;
  std::string base_hash_before, base_hash_after;
  std::filesystem::path checkpoint;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct TrainData {
  std::vector<std::string> ids;
  std::vector<Image> lr, gt;
};

/// Decodes every pair; sizes must match the adapter.
TrainData load_train_data(const EvalManifest& m, const ToyAdapter& adapter);
/// Oriented sinusoid gratings at the adapter's size, LR by area downsampling.
/// A dataset-free workload for smoke runs and tests.
TrainData synthetic_train_data(int count, const ToyAdapter& adapter, std::uint64_t seed);

struct FinetuneOutputs {
  std::filesystem::path log_csv;     // empty = no log file
  std::filesystem::path checkpoint;  // empty = no checkpoint
  /// Exact optimizer state (double precision) for resuming; written every
  /// `state_every` steps and after the last one.
  std::filesystem::path state;
  int state_every = 0;
  std::function<void(const TrainLogRow&)> on_step;
};

/// Everything needed to continue a run bit-for-bit.
struct TrainState {
  int next_step = 0;
  std::uint64_t cursor = 0;
  std::string base_hash;
  std::vector<TrainLogRow> log;
  std::map<std::string, Mat> lora, m1, m2;
};

void save_train_state(const TrainState& s, const std::filesystem::path& path);
TrainState load_train_state(const std::filesystem::path& path);

/// Maximizes the combined reward with Adam over the LoRA factors. Pairs are
/// visited in order and cycled. Throws TrainingDiverged on a non-finite loss.
/// With `resume`, continues from a saved state; every step draws from its own
/// stream, so the continued log matches an uninterrupted run.
TrainRun finetune(ToyAdapter& adapter, const TrainData& data, const RewardModels& models, const RewardConfig& reward,
                  const TrainConfig& cfg, const FinetuneOutputs& out = {}, const TrainState* resume = nullptr);

/// Mean reward over the window of `window` rows ending at row i.
double smoothed_reward(const std::vector<TrainLogRow>& log, std::size_t i, std::size_t window = 20);

std::string train_log_csv(const std::vector<TrainLogRow>& log);

/// LoRA factors (safetensors) with adapter spec, reward config and base hash in the metadata.
void save_checkpoint(const ToyAdapter& adapter, const RewardConfig& reward, const std::filesystem::path& path);
/// Loads LoRA factors into `adapter`; refuses a checkpoint made for different base weights.
void load_checkpoint(ToyAdapter& adapter, const std::filesystem::path& path);

}  // namespace hallucheck::align
