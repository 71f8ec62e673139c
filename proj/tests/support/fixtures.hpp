#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hallucheck/align.hpp"
#include "hallucheck/hs.hpp"
#include "hallucheck/image.hpp"
#include "hallucheck/manifest.hpp"

namespace hallucheck::fixtures {

/// Fresh empty directory under the system temp dir, unique per process and name.
std::filesystem::path temp_dir(const std::string& name);

/// Smooth multi-frequency texture with a few edges; 8-bit representable.
Image textured_image(int height, int width, std::uint64_t seed);

/// Adds N(0, sigma^2) noise and re-quantizes to 8 bits.
Image add_noise(const Image& img, double sigma, std::uint64_t seed);

struct TripletFixture {
  std::filesystem::path dir;
  std::filesystem::path manifest_path;
  EvalManifest manifest;
};

/// Writes `count` triplets (gt/, sr/, lr/ PNGs + manifest.jsonl). SR is GT
/// plus noise growing with the index so metrics vary monotonically; model
/// tags alternate over `models`.
TripletFixture make_triplets(const std::filesystem::path& dir, int count, int size = 64, int scale = 4,
                             const std::vector<std::string>& models = {"model_a", "model_b"},
                             std::uint64_t seed = 1);

void write_jpeg(const Image& img, const std::filesystem::path& path, int quality);

std::string read_file(const std::filesystem::path& p);

/// HS records whose statistics reproduce the published Swin2SR row: mean
/// 3.38 and level percentages 6.5 / 12.8 / 33.2 / 30.7 / 16.8. 2000 images x
/// 5 runs; per-level counts are chosen inside each percentage's rounding
/// interval so the rendered values are not at a rounding boundary.
std::vector<hs::HSRecord> swin2sr_records();

/// Random HF-layout ViT weights, small enough for unit tests. `clip` picks the
/// CLIP vision-tower naming, otherwise DINOv2-with-registers.
struct TinyVit {
  bool clip = false;
  int dim = 16, depth = 3, heads = 2, patch = 4, pos_grid = 4, registers = 2, mlp = 32;
  std::uint64_t seed = 11;
};
void write_tiny_vit(const std::filesystem::path& path, const TinyVit& spec);

struct GradCheck {
  double rel_error = 0;  // ||g - fd|| / ||fd|| over the probed coordinates
  double fd_norm = 0;
  int coords = 0;
};
/// Reverse-mode gradient of one sampled reward w.r.t. the LoRA factors against
/// central differences on `coords` random coordinates. The sampler stream is
/// re-seeded for every evaluation, so the objective is a fixed function.
GradCheck reward_gradient_check(align::ToyAdapter& adapter, const Image& lr, const Image& gt,
                                const align::RewardModels& models, const align::RewardConfig& reward,
                                std::uint64_t key, int coords = 24, double h = 1e-5);

}  // namespace hallucheck::fixtures
