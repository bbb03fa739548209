#pragma once

#include <array>
#include <string>
#include <vector>

#include "oamix/errors.hpp"
#include "oamix/labels.hpp"
#include "oamix/tensor.hpp"

namespace oamix {

// Learnable mask scale kappa, one scalar per patch-mixing layer.
// Initialized to exactly zero; nonnegativity is enforced by projection after
// each optimizer step.
template <class T>
struct MaskScale {
  Parameter<T> raw;
  int layer_index = 0;

  static MaskScale make(int layer_index, const std::string& name) {
    MaskScale s;
    s.raw.tensor = Tensor<T>::scalar(T(0), /*requires_grad=*/true);
    s.raw.name = name;
    s.raw.no_weight_decay = true;
    s.layer_index = layer_index;
    return s;
  }

  T value() const { return raw.tensor.values()[0]; }
};

// Per-layer reweighting mask M with entries in (0, 1], unit diagonal;
// index 0 is the [CLS] row/column once augmented.
template <class T>
struct ReweightMask {
  Tensor<T> m;
  bool has_cls = false;
  int source_layer = 0;

  int64_t tokens() const { return m.dim(0); }
};

template <class T>
Tensor<T> distance_tensor(const DistanceMatrix& d) {
  std::vector<T> v(d.d.size());
  for (size_t i = 0; i < d.d.size(); ++i) v[i] = static_cast<T>(d.d[i]);
  return Tensor<T>::from_data({d.n, d.n}, std::move(v));
}

// M_ij = exp(-kappa * d_ij); differentiable with respect to kappa.
template <class T>
ReweightMask<T> build_mask(const Tensor<T>& d_const, MaskScale<T>& kappa) {
  if (kappa.value() < T(0))
    throw ValidationError("build_mask: kappa is negative (" +
                          std::to_string(static_cast<double>(kappa.value())) +
                          "); projection should have run after the optimizer step");
  if (d_const.rank() != 2 || d_const.dim(0) != d_const.dim(1))
    throw DimensionError("build_mask: distance matrix must be square, got " +
                         shape_str(d_const.shape()));
  ReweightMask<T> out;
  out.m = exp_ew(neg(mul(d_const, kappa.raw.tensor)));
  out.has_cls = false;
  out.source_layer = kappa.layer_index;
  return out;
}

template <class T>
ReweightMask<T> build_mask(const DistanceMatrix& d, MaskScale<T>& kappa) {
  return build_mask(distance_tensor<T>(d), kappa);
}

// Extend an N x N mask to (N+1) x (N+1) with the [CLS] token at index 0;
// the mask value between [CLS] and every other token is one.
template <class T>
ReweightMask<T> augment_cls(const ReweightMask<T>& mask) {
  if (mask.has_cls) throw StateError("augment_cls: mask already carries a [CLS] row/column");
  int64_t n = mask.m.dim(0);
  Tensor<T> ones_col = Tensor<T>::full({n, 1}, T(1));
  Tensor<T> ones_row = Tensor<T>::full({1, n + 1}, T(1));
  ReweightMask<T> out;
  out.m = concat(0, ones_row, concat(1, ones_col, mask.m));
  out.has_cls = true;
  out.source_layer = mask.source_layer;
  return out;
}

// Clamp kappa at zero; called after every optimizer step.
template <class T>
void project_kappa(MaskScale<T>& scale) {
  auto v = scale.raw.tensor.values_mut();
  if (v[0] < T(0)) v[0] = T(0);
}

// Partition layers into four contiguous depth groups (earlier groups take the
// extra layers when depth is not divisible by four) and average kappa per group.
template <class T>
std::array<double, 4> quarter_averaged_scales(const std::vector<MaskScale<T>>& scales) {
  const int64_t L = static_cast<int64_t>(scales.size());
  if (L < 4) throw ParameterError("quarter_averaged_scales: need at least 4 layers, got " +
                                  std::to_string(L));
  std::array<double, 4> out{};
  int64_t base = L / 4, rem = L % 4, idx = 0;
  for (int q = 0; q < 4; ++q) {
    int64_t size = base + (q < rem ? 1 : 0);
    double s = 0.0;
    for (int64_t i = 0; i < size; ++i) s += static_cast<double>(scales[static_cast<size_t>(idx++)].value());
    out[static_cast<size_t>(q)] = s / static_cast<double>(size);
  }
  return out;
}

}  // namespace oamix
