#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "hallucheck/features.hpp"
#include "hallucheck/safetensors.hpp"

namespace hallucheck::features {

enum class VitFlavor {
  /// DINOv2 with registers: layer-scaled blocks, register tokens, intermediate
  /// outputs passed through the final LayerNorm.
  Dino,
  /// CLIP vision tower: pre-LayerNorm on embeddings, intermediate outputs
  /// divided by their L2 norm along the feature dimension.
  Clip,
};

struct VitConfig {
  VitFlavor flavor = VitFlavor::Dino;
  int dim = 768;
  int depth = 12;
  int heads = 12;
  int patch = 14;
  int registers = 0;
  int pos_grid = 37;  // side of the stored positional-embedding grid
  double ln_eps = 1e-6;
  bool quick_gelu = false;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

/// Vision-transformer feature extractor over HuggingFace-layout weights
/// (Dinov2WithRegistersModel or CLIPVisionModel) stored as safetensors.
/// Inference only; deterministic.
class VitBackend : public Backend {
 public:
  VitBackend(std::string id, const SafeTensors& weights);
  static VitBackend load(std::string id, const std::filesystem::path& weights);

  std::string id() const override { return id_; }
  int depth() const override { return cfg_.depth; }
  int dim() const override { return cfg_.dim; }
  const VitConfig& config() const { return cfg_; }

  /// Input side after resizing: 512 -> 518 for patch 14, 512 -> 512 for patch 16.
  int input_side(int side) const { return patch_aligned(side, cfg_.patch); }

  FeatureBundle extract(const Image& img, TokenKind kind, const std::vector<int>& layers) override;

  /// Runs the network on an already-sized image and returns the post-normalization
  /// tokens of each requested layer including CLS (and register) rows.
  std::vector<TokenMatrix> forward(const Image& sized, const std::vector<int>& layers) const;

 private:
  struct Linear {
    TokenMatrix wt;  // in x out
    Eigen::RowVectorXf b;
  };
  struct Norm {
    Eigen::RowVectorXf w, b;
  };
  struct Block {
    Norm ln1, ln2;
    Linear qkv, proj, fc1, fc2;
    Eigen::RowVectorXf ls1, ls2;  // empty when the flavor has no layer scale
  };

  TokenMatrix layer_norm(const TokenMatrix& x, const Norm& n) const;
  TokenMatrix attention(const TokenMatrix& x, const Block& b) const;
  TokenMatrix position_embedding(int grid_h, int grid_w) const;

  std::string id_;
  VitConfig cfg_;
  Linear patch_embed_;
  Eigen::RowVectorXf cls_;
  TokenMatrix registers_;
  TokenMatrix pos_;  // (1 + pos_grid^2) x dim
  Norm pre_norm_;    // CLIP only
  Norm final_norm_;  // DINO: applied to every returned layer
  std::vector<Block> blocks_;
};

/// Resamples a (gh x gw) grid of row vectors to (oh x ow) like torch bicubic
/// interpolation with align_corners=False; `antialias` selects the
/// separable-filter variant (cubic a=-0.5) used by antialiased resizing.
TokenMatrix resample_grid(const TokenMatrix& grid, int gh, int gw, int oh, int ow, bool antialias);

}  // namespace hallucheck::features
