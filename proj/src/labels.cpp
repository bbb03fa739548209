#include "oamix/labels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "oamix/errors.hpp"
#include "oamix/tensor_io.hpp"

namespace oamix {

void PixelLabelMap::validate() const {
  if (height <= 0 || width <= 0 || classes < 1)
    throw ValidationError("label map: dimensions must be positive");
  if (kind == LabelKind::BinarySoft && classes != 1)
    throw ValidationError("label map: binary_soft requires K == 1, got K = " +
                          std::to_string(classes));
  if (values.size() != static_cast<size_t>(height * width * classes))
    throw ValidationError("label map: payload size mismatch");
  for (int64_t h = 0; h < height; ++h)
    for (int64_t w = 0; w < width; ++w) {
      double sum = 0.0;
      for (int64_t k = 0; k < classes; ++k) {
        double v = at(h, w, k);
        if (!(v >= 0.0 && v <= 1.0))
          throw ValidationError("label map: value " + std::to_string(v) + " at (" +
                                std::to_string(h) + ", " + std::to_string(w) + ", " +
                                std::to_string(k) + ") outside [0, 1]");
        sum += v;
      }
      if (kind == LabelKind::MultiClass && sum > 1.0 + 1e-4)
        throw ValidationError("label map: class vector at (" + std::to_string(h) + ", " +
                              std::to_string(w) + ") sums to " + std::to_string(sum) +
                              " > 1");
    }
}

std::string encode_label_map(const PixelLabelMap& map) {
  std::string buf;
  buf.reserve(18 + 4 * map.values.size());
  buf += "OAL1";
  buf.push_back(1);  // version
  buf.push_back(static_cast<char>(map.kind));
  detail::put_u32_le(buf, static_cast<uint32_t>(map.height));
  detail::put_u32_le(buf, static_cast<uint32_t>(map.width));
  detail::put_u32_le(buf, static_cast<uint32_t>(map.classes));
  for (double v : map.values) detail::put_scalar_le(buf, static_cast<float>(v));
  return buf;
}

PixelLabelMap decode_label_map(const std::string& bytes, const std::string& what) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 18 || std::memcmp(p, "OAL1", 4) != 0)
    throw FormatError(what + ": bad OAL1 magic");
  if (p[4] != 1) throw FormatError(what + ": unsupported OAL1 version " + std::to_string(p[4]));
  if (p[5] > 1) throw FormatError(what + ": unknown label kind " + std::to_string(p[5]));
  PixelLabelMap map;
  map.kind = static_cast<LabelKind>(p[5]);
  map.height = detail::get_u32_le(p + 6);
  map.width = detail::get_u32_le(p + 10);
  map.classes = detail::get_u32_le(p + 14);
  size_t n = static_cast<size_t>(map.height) * static_cast<size_t>(map.width) *
             static_cast<size_t>(map.classes);
  if (bytes.size() != 18 + 4 * n) throw FormatError(what + ": payload size mismatch");
  map.values.resize(n);
  for (size_t i = 0; i < n; ++i)
    map.values[i] = static_cast<double>(detail::get_scalar_le<float>(p + 18 + 4 * i));
  map.validate();
  return map;
}

PixelLabelMap load_label_map(const std::string& path) {
  return decode_label_map(read_file_bytes(path), path);
}

void save_label_map(const std::string& path, const PixelLabelMap& map) {
  map.validate();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  std::string buf = encode_label_map(map);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw FormatError("write failed for " + path);
}

std::vector<double> bilinear_resample(const std::vector<double>& src, int64_t h, int64_t w,
                                      int64_t k, int64_t h2, int64_t w2) {
  std::vector<double> dst(static_cast<size_t>(h2 * w2 * k));
  double sy = static_cast<double>(h) / static_cast<double>(h2);
  double sx = static_cast<double>(w) / static_cast<double>(w2);
  for (int64_t y = 0; y < h2; ++y) {
    // half-pixel centers, clamped at the borders
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    int64_t y0 = static_cast<int64_t>(std::floor(fy));
    int64_t y1 = std::min(y0 + 1, h - 1);
    double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < w2; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      int64_t x1 = std::min(x0 + 1, w - 1);
      double wx = fx - static_cast<double>(x0);
      for (int64_t c = 0; c < k; ++c) {
        double v00 = src[static_cast<size_t>((y0 * w + x0) * k + c)];
        double v01 = src[static_cast<size_t>((y0 * w + x1) * k + c)];
        double v10 = src[static_cast<size_t>((y1 * w + x0) * k + c)];
        double v11 = src[static_cast<size_t>((y1 * w + x1) * k + c)];
        double top = v00 * (1.0 - wx) + v01 * wx;
        double bot = v10 * (1.0 - wx) + v11 * wx;
        dst[static_cast<size_t>((y * w2 + x) * k + c)] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

PatchLabels pool_to_patches(const PixelLabelMap& map, int64_t h_patches, int64_t w_patches) {
  if (h_patches < 1 || w_patches < 1)
    throw ParameterError("pool_to_patches: grid must be at least 1x1");
  const int64_t k = map.classes;

  const std::vector<double>* src = &map.values;
  int64_t h = map.height, w = map.width;
  std::vector<double> resampled;
  if (h % h_patches != 0 || w % w_patches != 0) {
    constexpr int64_t kResampleFactor = 4;
    int64_t h2 = h_patches * kResampleFactor;
    int64_t w2 = w_patches * kResampleFactor;
    resampled = bilinear_resample(map.values, h, w, k, h2, w2);
    src = &resampled;
    h = h2;
    w = w2;
  }

  int64_t cell_h = h / h_patches;
  int64_t cell_w = w / w_patches;
  PatchLabels out;
  out.n_patches = h_patches * w_patches;
  out.classes = k;
  out.kind = map.kind;
  out.y.assign(static_cast<size_t>(out.n_patches * k), 0.0);
  for (int64_t py = 0; py < h_patches; ++py)
    for (int64_t px = 0; px < w_patches; ++px) {
      double* acc = out.y.data() + (py * w_patches + px) * k;
      for (int64_t y = py * cell_h; y < (py + 1) * cell_h; ++y)
        for (int64_t x = px * cell_w; x < (px + 1) * cell_w; ++x)
          for (int64_t c = 0; c < k; ++c)
            acc[c] += (*src)[static_cast<size_t>((y * w + x) * k + c)];
      double inv = 1.0 / static_cast<double>(cell_h * cell_w);
      for (int64_t c = 0; c < k; ++c) acc[c] *= inv;
    }
  return out;
}

double distance_binary_l1(double yi, double yj) {
  if (!(yi >= 0.0 && yi <= 1.0) || !(yj >= 0.0 && yj <= 1.0))
    throw ValidationError("distance_binary_l1: labels must lie in [0, 1]");
  return std::abs(yi - yj);
}

double distance_multiclass_cosine(const double* yi, const double* yj, int64_t k) {
  double dot = 0.0, ni = 0.0, nj = 0.0;
  for (int64_t c = 0; c < k; ++c) {
    if (yi[c] < 0.0 || yj[c] < 0.0)
      throw ValidationError("distance_multiclass_cosine: labels must be nonnegative");
    dot += yi[c] * yj[c];
    ni += yi[c] * yi[c];
    nj += yj[c] * yj[c];
  }
  bool zi = (ni == 0.0), zj = (nj == 0.0);
  // background-only patches: all-zero labels cluster together and are
  // maximally distant from any object patch
  if (zi && zj) return 0.0;
  if (zi || zj) return 1.0;
  return 1.0 - dot / (std::sqrt(ni) * std::sqrt(nj));
}

DistanceMatrix pairwise_distance_matrix(const PatchLabels& labels) {
  if (labels.n_patches < 1) throw ParameterError("pairwise_distance_matrix: need N >= 1");
  const int64_t n = labels.n_patches;
  const int64_t k = labels.classes;
  DistanceMatrix m;
  m.n = n;
  m.d.assign(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) {
      double dij;
      if (labels.kind == LabelKind::BinarySoft)
        dij = distance_binary_l1(labels.at(i, 0), labels.at(j, 0));
      else
        dij = distance_multiclass_cosine(labels.y.data() + i * k, labels.y.data() + j * k, k);
      m.d[static_cast<size_t>(i * n + j)] = dij;
      m.d[static_cast<size_t>(j * n + i)] = dij;
    }
  }
  return m;
}

}  // namespace oamix
