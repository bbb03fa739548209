#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "oamix/labels.hpp"
#include "oamix/rng.hpp"
#include "oamix/tensor.hpp"

namespace testutil {

template <class T>
oamix::Tensor<T> random_tensor(oamix::Rng& rng, oamix::Shape shape, double lo = -1.0,
                               double hi = 1.0, bool requires_grad = false) {
  std::vector<T> v(static_cast<size_t>(oamix::numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return oamix::Tensor<T>::from_data(std::move(shape), std::move(v), requires_grad);
}

template <class T>
oamix::Parameter<T> random_param(oamix::Rng& rng, oamix::Shape shape, const std::string& name,
                                 double lo = -1.0, double hi = 1.0) {
  oamix::Parameter<T> p;
  p.tensor = random_tensor<T>(rng, std::move(shape), lo, hi, /*requires_grad=*/true);
  p.name = name;
  return p;
}

template <class T>
double max_abs_diff(const oamix::Tensor<T>& a, const std::vector<double>& expect) {
  double m = 0.0;
  auto v = a.values();
  for (size_t i = 0; i < expect.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(v[i]) - expect[i]));
  return m;
}

template <class T>
double max_abs_diff(const oamix::Tensor<T>& a, const oamix::Tensor<T>& b) {
  double m = 0.0;
  auto va = a.values();
  auto vb = b.values();
  for (size_t i = 0; i < va.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(va[i]) - static_cast<double>(vb[i])));
  return m;
}

template <class T>
bool bit_equal(const oamix::Tensor<T>& a, const oamix::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.values().data(), b.values().data(),
                     sizeof(T) * static_cast<size_t>(a.numel())) == 0;
}

inline oamix::PatchLabels random_binary_labels(oamix::Rng& rng, int64_t n) {
  oamix::PatchLabels labels;
  labels.n_patches = n;
  labels.classes = 1;
  labels.kind = oamix::LabelKind::BinarySoft;
  labels.y.resize(static_cast<size_t>(n));
  for (auto& v : labels.y) v = rng.uniform();
  return labels;
}

inline oamix::PatchLabels random_multiclass_labels(oamix::Rng& rng, int64_t n, int64_t k) {
  oamix::PatchLabels labels;
  labels.n_patches = n;
  labels.classes = k;
  labels.kind = oamix::LabelKind::MultiClass;
  labels.y.resize(static_cast<size_t>(n * k));
  for (auto& v : labels.y) v = rng.uniform();
  return labels;
}

}  // namespace testutil
