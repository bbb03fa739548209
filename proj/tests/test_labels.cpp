#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "oamix/labels.hpp"

using namespace oamix;

namespace {

PixelLabelMap make_map(int64_t h, int64_t w, int64_t k, LabelKind kind,
                       std::vector<double> values) {
  PixelLabelMap m;
  m.height = h;
  m.width = w;
  m.classes = k;
  m.kind = kind;
  m.values = std::move(values);
  return m;
}

}  // namespace

TEST_CASE("label map validation and file format") {
  PixelLabelMap ones = make_map(2, 2, 1, LabelKind::BinarySoft, {1, 1, 1, 1});
  std::string bytes = encode_label_map(ones);
  PixelLabelMap back = decode_label_map(bytes, "test");
  CHECK(back.height == 2);
  CHECK(back.width == 2);
  CHECK(back.classes == 1);
  for (double v : back.values) CHECK(v == 1.0);

  PixelLabelMap bad = make_map(2, 2, 1, LabelKind::BinarySoft, {1.5, 0, 0, 0});
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("(0, 0, 0)"), ValidationError);

  std::string nomagic = bytes;
  nomagic[1] = 'X';
  CHECK_THROWS_AS(static_cast<void>(decode_label_map(nomagic, "test")), FormatError);
  std::string badver = bytes;
  badver[4] = 9;
  CHECK_THROWS_AS(static_cast<void>(decode_label_map(badver, "test")), FormatError);
  std::string badkind = bytes;
  badkind[5] = 7;
  CHECK_THROWS_AS(static_cast<void>(decode_label_map(badkind, "test")), FormatError);
  std::string truncated = bytes.substr(0, bytes.size() - 2);
  CHECK_THROWS_AS(static_cast<void>(decode_label_map(truncated, "test")), FormatError);

  // binary_soft demands K == 1
  PixelLabelMap wrongk = make_map(1, 1, 2, LabelKind::BinarySoft, {0.5, 0.5});
  CHECK_THROWS_AS(wrongk.validate(), ValidationError);

  // multi-class vectors must stay in the sub-simplex
  PixelLabelMap oversum = make_map(1, 1, 3, LabelKind::MultiClass, {0.8, 0.4, 0.2});
  CHECK_THROWS_AS(oversum.validate(), ValidationError);
}

TEST_CASE("label map round trip is bit identical") {
  Rng rng(31);
  std::vector<double> vals(8 * 8 * 3);
  // values that originated as f32 survive the f64 staging exactly
  for (auto& v : vals) v = static_cast<double>(static_cast<float>(0.3 * rng.uniform()));
  PixelLabelMap map = make_map(8, 8, 3, LabelKind::MultiClass, std::move(vals));
  std::string b1 = encode_label_map(map);
  std::string b2 = encode_label_map(decode_label_map(b1, "test"));
  CHECK(b1 == b2);

  std::filesystem::create_directories("/tmp/oamix_test_labels");
  save_label_map("/tmp/oamix_test_labels/m.oal1", map);
  PixelLabelMap loaded = load_label_map("/tmp/oamix_test_labels/m.oal1");
  CHECK(encode_label_map(loaded) == b1);
}

TEST_CASE("pool_to_patches on divisible grids") {
  PixelLabelMap ones = make_map(4, 4, 1, LabelKind::BinarySoft, std::vector<double>(16, 1.0));
  PatchLabels p = pool_to_patches(ones, 2, 2);
  CHECK(p.n_patches == 4);
  CHECK(p.kind == LabelKind::BinarySoft);
  for (double v : p.y) CHECK(v == 1.0);

  // left half 1, right half 0
  std::vector<double> half(16, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 2; ++x) half[static_cast<size_t>(y * 4 + x)] = 1.0;
  PatchLabels ph = pool_to_patches(make_map(4, 4, 1, LabelKind::BinarySoft, half), 2, 2);
  CHECK(ph.y[0] == 1.0);
  CHECK(ph.y[1] == 0.0);
  CHECK(ph.y[2] == 1.0);
  CHECK(ph.y[3] == 0.0);
}

TEST_CASE("pool_to_patches non-divisible resolution matches the two-step oracle") {
  Rng rng(32);
  std::vector<double> vals(25);
  for (auto& v : vals) v = rng.uniform();
  PixelLabelMap map = make_map(5, 5, 1, LabelKind::BinarySoft, vals);
  PatchLabels p = pool_to_patches(map, 2, 2);

  // independent float64 oracle: bilinear resample to 8x8 (half-pixel centers,
  // clamped), then mean over 4x4 cells
  auto sample = [&](double fy, double fx) {
    fy = std::clamp(fy, 0.0, 4.0);
    fx = std::clamp(fx, 0.0, 4.0);
    int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
    int y1 = std::min(y0 + 1, 4), x1 = std::min(x0 + 1, 4);
    double wy = fy - y0, wx = fx - x0;
    double top = vals[static_cast<size_t>(y0 * 5 + x0)] * (1 - wx) +
                 vals[static_cast<size_t>(y0 * 5 + x1)] * wx;
    double bot = vals[static_cast<size_t>(y1 * 5 + x0)] * (1 - wx) +
                 vals[static_cast<size_t>(y1 * 5 + x1)] * wx;
    return top * (1 - wy) + bot * wy;
  };
  for (int py = 0; py < 2; ++py)
    for (int px = 0; px < 2; ++px) {
      double acc = 0.0;
      for (int y = py * 4; y < (py + 1) * 4; ++y)
        for (int x = px * 4; x < (px + 1) * 4; ++x)
          acc += sample((y + 0.5) * 5.0 / 8.0 - 0.5, (x + 0.5) * 5.0 / 8.0 - 0.5);
      acc /= 16.0;
      CHECK(std::abs(p.y[static_cast<size_t>(py * 2 + px)] - acc) <= 1e-6);
    }
}

TEST_CASE("pool_to_patches preserves the global mean when divisible") {
  Rng rng(33);
  for (int rep = 0; rep < 10; ++rep) {
    int64_t grid = 2 + static_cast<int64_t>(rng.uniform_int(3));
    int64_t cell = 1 + static_cast<int64_t>(rng.uniform_int(4));
    int64_t hw = grid * cell;
    std::vector<double> vals(static_cast<size_t>(hw * hw));
    double pixel_mean = 0.0;
    for (auto& v : vals) {
      v = rng.uniform();
      pixel_mean += v;
    }
    pixel_mean /= static_cast<double>(vals.size());
    PatchLabels p =
        pool_to_patches(make_map(hw, hw, 1, LabelKind::BinarySoft, vals), grid, grid);
    double patch_mean = 0.0;
    for (double v : p.y) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      patch_mean += v;
    }
    patch_mean /= static_cast<double>(p.y.size());
    CHECK(std::abs(patch_mean - pixel_mean) <= 1e-6);
  }
}

TEST_CASE("pool_to_patches keeps kind and K") {
  Rng rng(34);
  std::vector<double> vals(6 * 6 * 3);
  for (auto& v : vals) v = 0.3 * rng.uniform();
  PatchLabels p = pool_to_patches(make_map(6, 6, 3, LabelKind::MultiClass, vals), 3, 3);
  CHECK(p.kind == LabelKind::MultiClass);
  CHECK(p.classes == 3);
  CHECK(p.n_patches == 9);
}

TEST_CASE("binary l1 distance") {
  CHECK(distance_binary_l1(0.7, 0.7) == 0.0);
  CHECK(distance_binary_l1(0.0, 1.0) == 1.0);
  CHECK(distance_binary_l1(0.2, 0.9) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK_THROWS_AS(static_cast<void>(distance_binary_l1(1.2, 0.5)), ValidationError);
  CHECK_THROWS_AS(static_cast<void>(distance_binary_l1(0.5, -0.1)), ValidationError);
}

TEST_CASE("multi-class cosine distance") {
  double a[2] = {0.4, 0.4};
  CHECK(distance_multiclass_cosine(a, a, 2) <= 1e-15);

  double e1[2] = {1, 0}, e2[2] = {0, 1};
  CHECK(distance_multiclass_cosine(e1, e2, 2) == 1.0);

  double mixed[2] = {0.5, 0.5};
  CHECK(distance_multiclass_cosine(mixed, e1, 2) ==
        doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-12));

  double zero[2] = {0, 0};
  CHECK(distance_multiclass_cosine(zero, zero, 2) == 0.0);
  CHECK(distance_multiclass_cosine(zero, e1, 2) == 1.0);
  CHECK(distance_multiclass_cosine(e1, zero, 2) == 1.0);

  double negv[2] = {-0.1, 0.5};
  CHECK_THROWS_AS(static_cast<void>(distance_multiclass_cosine(negv, e1, 2)), ValidationError);
}

TEST_CASE("cosine distance is scale invariant") {
  Rng rng(35);
  for (int rep = 0; rep < 50; ++rep) {
    double yi[4], yj[4], yis[4];
    double a = rng.uniform(0.01, 50.0);
    for (int k = 0; k < 4; ++k) {
      yi[k] = rng.uniform();
      yj[k] = rng.uniform();
      yis[k] = a * yi[k];
    }
    CHECK(std::abs(distance_multiclass_cosine(yi, yj, 4) -
                   distance_multiclass_cosine(yis, yj, 4)) <= 1e-9);
  }
}

TEST_CASE("pairwise distance matrix") {
  PatchLabels same;
  same.n_patches = 3;
  same.classes = 1;
  same.kind = LabelKind::BinarySoft;
  same.y = {0.4, 0.4, 0.4};
  DistanceMatrix z = pairwise_distance_matrix(same);
  for (double v : z.d) CHECK(v == 0.0);

  PatchLabels binary;
  binary.n_patches = 2;
  binary.classes = 1;
  binary.kind = LabelKind::BinarySoft;
  binary.y = {0, 1};
  DistanceMatrix b = pairwise_distance_matrix(binary);
  CHECK(b.at(0, 0) == 0.0);
  CHECK(b.at(0, 1) == 1.0);
  CHECK(b.at(1, 0) == 1.0);
  CHECK(b.at(1, 1) == 0.0);

  // double-loop float64 oracle on random multi-class labels
  Rng rng(36);
  PatchLabels mc = testutil::random_multiclass_labels(rng, 5, 3);
  DistanceMatrix m = pairwise_distance_matrix(mc);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (int k = 0; k < 3; ++k) {
        double vi = mc.at(i, k), vj = mc.at(j, k);
        dot += vi * vj;
        ni += vi * vi;
        nj += vj * vj;
      }
      double expect = (ni == 0 && nj == 0) ? 0.0
                      : (ni == 0 || nj == 0) ? 1.0
                                             : 1.0 - dot / (std::sqrt(ni) * std::sqrt(nj));
      CHECK(std::abs(m.at(i, j) - expect) <= 1e-7);
    }
}

TEST_CASE("distance matrix symmetry and zero diagonal (property)") {
  Rng rng(37);
  for (int rep = 0; rep < 25; ++rep) {
    int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(8));
    PatchLabels labels = (rep % 2 == 0)
                             ? testutil::random_binary_labels(rng, n)
                             : testutil::random_multiclass_labels(
                                   rng, n, 2 + static_cast<int64_t>(rng.uniform_int(3)));
    DistanceMatrix d = pairwise_distance_matrix(labels);
    for (int64_t i = 0; i < n; ++i) {
      CHECK(d.at(i, i) == 0.0);
      for (int64_t j = 0; j < n; ++j) {
        CHECK(d.at(i, j) >= 0.0);
        CHECK(d.at(i, j) == d.at(j, i));
      }
    }
  }
}
