#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace oamix {

enum class LabelKind : uint8_t { BinarySoft = 0, MultiClass = 1 };

// Pixel- or patch-resolution object label map, values in [0, 1].
// Multi-class maps hold a sub-simplex class vector per pixel.
struct PixelLabelMap {
  int64_t height = 0;
  int64_t width = 0;
  int64_t classes = 1;
  LabelKind kind = LabelKind::BinarySoft;
  std::vector<double> values;  // [H, W, K] row-major

  double at(int64_t h, int64_t w, int64_t k) const {
    return values[static_cast<size_t>((h * width + w) * classes + k)];
  }
  void validate() const;
};

// Per-patch object labels y in R^{N x K}.
struct PatchLabels {
  int64_t n_patches = 0;
  int64_t classes = 1;
  LabelKind kind = LabelKind::BinarySoft;
  std::vector<double> y;  // [N, K] row-major

  double at(int64_t n, int64_t k) const { return y[static_cast<size_t>(n * classes + k)]; }
};

// Symmetric pairwise label distances with zero diagonal.
struct DistanceMatrix {
  int64_t n = 0;
  std::vector<double> d;  // [N, N]

  double at(int64_t i, int64_t j) const { return d[static_cast<size_t>(i * n + j)]; }
};

// "OAL1" file: magic, u8 version=1, u8 kind (0 = binary_soft, 1 = multi_class),
// u32 H, u32 W, u32 K, little-endian f32 payload [H, W, K] row-major.
PixelLabelMap load_label_map(const std::string& path);
PixelLabelMap decode_label_map(const std::string& bytes, const std::string& what);
void save_label_map(const std::string& path, const PixelLabelMap& map);
std::string encode_label_map(const PixelLabelMap& map);

// Pool a pixel map down to an (h_patches x w_patches) grid. When the map
// resolution is an integer multiple of the grid, each patch takes the mean of
// its pixel vectors; otherwise the map is first bilinearly resampled to
// (h_patches * 4, w_patches * 4) and then mean-pooled per cell.
PatchLabels pool_to_patches(const PixelLabelMap& map, int64_t h_patches, int64_t w_patches);

double distance_binary_l1(double yi, double yj);
double distance_multiclass_cosine(const double* yi, const double* yj, int64_t k);

DistanceMatrix pairwise_distance_matrix(const PatchLabels& labels);

// test hook: plain bilinear resample with half-pixel centers, [H,W,K] -> [H2,W2,K]
std::vector<double> bilinear_resample(const std::vector<double>& src, int64_t h, int64_t w,
                                      int64_t k, int64_t h2, int64_t w2);

}  // namespace oamix
