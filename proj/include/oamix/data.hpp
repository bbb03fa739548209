#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oamix/labels.hpp"
#include "oamix/tensor.hpp"

namespace oamix {

// Synthetic foreground/background benchmark. Each class is a procedural shape
// (disk, ring, cross, bar) drawn over a value-noise texture whose family is
// correlated with the class at train time. Splits follow the
// Background-Challenge naming: original, only_bg, mixed_same, mixed_rand.
struct SyntheticSpec {
  int64_t image = 32;
  int64_t channels = 3;
  int64_t patch = 8;
  int64_t classes = 4;       // number of shape types in play (2..4)
  int64_t bg_families = 4;   // >= 2 texture families
  double bg_correlation = 0.9;  // P(train background family == class family)
  int64_t train_samples = 512;
  int64_t eval_samples = 128;
  uint64_t seed = 7;

  int64_t grid() const { return image / patch; }
  void validate() const;
};

struct Sample {
  Tensor<float> image;      // [C, H, W]
  PixelLabelMap label_map;  // patch-grid resolution foreground coverage, K = 1
  int64_t class_id = 0;
  int64_t bg_family = 0;
  int64_t fg_instance = -1;  // links mixed_same/mixed_rand pairs; -1 when absent
};

struct BenchmarkSplit {
  std::string name;
  std::vector<Sample> samples;
};

struct Dataset {
  SyntheticSpec spec;
  std::map<std::string, BenchmarkSplit> splits;
};

Dataset gen_dataset(const SyntheticSpec& spec);

// Directory layout: <split>/<index>.oat1 images, <split>/<index>.oal1 labels,
// meta.json with the spec, seed and pairing metadata.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

PatchLabels sample_patch_labels(const Sample& s, int64_t grid_h, int64_t grid_w);

// order-independent content digest of a dataset directory (for determinism checks)
uint64_t dir_digest(const std::string& dir);

}  // namespace oamix
