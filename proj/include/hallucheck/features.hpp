#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hallucheck/image.hpp"

namespace hallucheck::features {

enum class TokenKind { CLS, ST };

std::string to_string(TokenKind k);
TokenKind token_kind_from_string(const std::string& s);

using TokenMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Tokens for one image from one backend: one n_tokens x d matrix per requested layer.
struct FeatureBundle {
  std::string backend_id;
  TokenKind token_kind = TokenKind::ST;
  std::vector<int> layers;           // sorted ascending
  std::vector<TokenMatrix> tokens;   // parallel to layers
  int grid_rows = 1;
  int grid_cols = 1;

  int positions() const { return grid_rows * grid_cols; }
  bool operator==(const FeatureBundle& o) const;
};

/// Intermediate-layer presets (0-based block indices; 11 is the last block of a base ViT).
inline const std::vector<int> kIntermLayers = {1, 3, 5, 7, 9, 11};
inline const std::vector<int> kIntermLayersAlt = {1, 3, 5, 7, 11};
inline const std::vector<int> kLastLayer = {11};

std::vector<int> layer_preset(const std::string& name);

/// A feature extractor. One instance is confined to one thread.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  virtual int depth() const = 0;
  virtual int dim() const = 0;
  /// `layers` is sorted, unique, and within [0, depth).
  virtual FeatureBundle extract(const Image& img, TokenKind kind, const std::vector<int>& layers) = 0;
};

/// Validates and sorts `layers`, then runs the backend.
FeatureBundle embed(Backend& backend, const Image& img, TokenKind kind, std::vector<int> layers);

/// Mean over positions of 1 - cos(a_p, b_p), where a_p concatenates the
/// position's tokens across all layers. Result in [0, 2].
double feature_distance(const FeatureBundle& a, const FeatureBundle& b);

/// Side length the backend resizes to: smallest multiple of `patch` that is >= side.
int patch_aligned(int side, int patch);

/// Weight-free deterministic backend: patch pixels pushed through a stack of
/// fixed random tanh layers, layer-normalized per token. Used for tests and
/// desk-scale runs where pretrained weights are absent.
class ProjectionBackend : public Backend {
 public:
  struct Options {
    std::string id = "projection";
    int patch = 16;
    int dim = 64;
    int depth = 12;
    std::uint64_t seed = 7;
  };
  explicit ProjectionBackend(Options opts);
  ProjectionBackend() : ProjectionBackend(Options{}) {}

  std::string id() const override { return opts_.id; }
  int depth() const override { return opts_.depth; }
  int dim() const override { return opts_.dim; }
  FeatureBundle extract(const Image& img, TokenKind kind, const std::vector<int>& layers) override;

 private:
  Options opts_;
  TokenMatrix embed_;               // (patch*patch*3) x dim
  std::vector<TokenMatrix> blocks_; // dim x dim per layer
};

}  // namespace hallucheck::features
