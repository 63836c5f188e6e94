#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fmbff/tensor.hpp"

namespace fmbff {

struct Sample {
  Tensor<float> image;  // 3 x H x W, [0,1]
  Tensor<float> mask;   // 1 x H x W, {0,1}
  std::string id;
};

// Throws ValidationError if extents disagree or the mask is not binary.
void validate_sample(const Sample& s);

double foreground_fraction(const Tensor<float>& mask);

// 1-3 soft-edged ellipses on a low-contrast textured background.
// Sample i depends only on (seed, i).
std::vector<Sample> generate_synthetic(int n, Index height, Index width, std::uint64_t seed);

inline constexpr int kRotationStep = 30;
inline constexpr double kBrightnessFactors[] = {1.0, 0.8, 1.2};

// Rotation about the image center (bilinear for the image, nearest for the
// mask, zero fill) followed by clamp(v * brightness, 0, 1).
Sample augment(const Sample& s, int rotation_deg, double brightness);

// All 12 rotations x 3 brightness factors.
std::vector<Sample> expand_augmentations(const Sample& s);

// One variant drawn uniformly from the expansion set.
Sample random_augmentation(const Sample& s, std::mt19937_64& rng);

struct SplitPlan {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::vector<std::string>> folds;
};

// Seeded shuffle, then the first round(ratio * n) ids train.
SplitPlan split(const std::vector<std::string>& ids, double ratio, std::uint64_t seed);

// Seeded shuffle, then k contiguous folds; the first n % k folds get one extra.
SplitPlan kfold(const std::vector<std::string>& ids, int k, std::uint64_t seed);

// Train on every fold except `fold`, validate on `fold`.
SplitPlan fold_split(const SplitPlan& plan, int fold);

// <root>/images/<id>.ppm, <root>/masks/<id>_mask.pgm, <root>/manifest.txt
void write_dataset(const std::string& root, const std::vector<Sample>& samples);
std::vector<std::string> read_manifest(const std::string& root);
std::vector<Sample> load_dataset(const std::string& root);

std::vector<Sample> select(const std::vector<Sample>& all, const std::vector<std::string>& ids);

// Stacks into N x 3 x H x W and N x 1 x H x W.
Tensor<float> stack_images(const std::vector<const Sample*>& batch);
Tensor<float> stack_masks(const std::vector<const Sample*>& batch);

}  // namespace fmbff
