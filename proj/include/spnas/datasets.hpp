#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spnas/tensor.hpp"

namespace spnas {

// Images in [0, 1] as [N, C, H, W] with integer labels and a train/valid split.
struct Dataset {
  std::string source;
  int classes = 0;
  Tensor images;
  std::vector<int> labels;
  std::vector<int> train, valid;
  std::uint64_t split_seed = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
  std::vector<int> class_counts() const;

  Tensor batch_images(std::span<const int> indices) const;
  std::vector<int> batch_labels(std::span<const int> indices) const;
  nlohmann::json manifest() const;
};

// Seeded shuffle into train/valid with |valid| = floor(valid_fraction * N).
void split_dataset(Dataset& d, std::uint64_t seed, double valid_fraction = 0.2);

// IDX pair: unsigned-byte images (magic 0x00000803, dims N,H,W) and labels
// (magic 0x00000801, dim N). Pixels are divided by 255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::uint64_t seed);
// Writes single-channel images rounded to bytes.
void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

// Oriented sinusoidal gratings, one orientation per class, random phase and
// frequency, additive Gaussian noise. Label of sample i is i % classes.
Dataset synth_classification(int classes, int n, int image_size, std::uint64_t seed, double noise = 0.5);

// Indices of `base` in a seeded random order.
std::vector<int> shuffled(std::vector<int> base, std::mt19937_64& rng);

}  // namespace spnas
