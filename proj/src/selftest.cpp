#include "oamix/selftest.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "oamix/data.hpp"
#include "oamix/model.hpp"
#include "oamix/rng.hpp"
#include "oamix/tensor_io.hpp"

namespace oamix {

namespace {

PatchLabels random_binary_labels(Rng& rng, int64_t n) {
  PatchLabels labels;
  labels.n_patches = n;
  labels.classes = 1;
  labels.kind = LabelKind::BinarySoft;
  labels.y.resize(static_cast<size_t>(n));
  for (auto& v : labels.y) v = rng.uniform();
  return labels;
}

template <class T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

bool check_vanilla_equivalence(std::string& detail) {
  for (Family fam : {Family::DeitLike, Family::MixerLike, Family::ConvMixerLike}) {
    ModelConfig cfg;
    cfg.family = fam;
    cfg.oamix = false;
    Model<float> vanilla = build_model<float>(cfg, 11);
    cfg.oamix = true;
    Model<float> mixed = build_model<float>(cfg, 11);
    Rng rng(404);
    for (int rep = 0; rep < 3; ++rep) {
      Tensor<float> img = random_tensor<float>(rng, {cfg.channels, cfg.image_h, cfg.image_w}, 0.0, 1.0);
      PatchLabels labels = random_binary_labels(rng, cfg.n_patches());
      NoGradGuard ng;
      Tensor<float> out_v = forward(vanilla, img);
      Tensor<float> out_m = forward(mixed, img, &labels);
      auto a = out_v.values();
      auto b = out_m.values();
      if (std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0) {
        detail = "family " + family_name(fam) + " diverged at kappa=0";
        return false;
      }
    }
  }
  return true;
}

bool check_row_stochastic(std::string& detail) {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    int64_t n = 3 + static_cast<int64_t>(rng.uniform_int(6));
    AttentionLayer<double> layer;
    layer.heads = 2;
    layer.wq.tensor = random_tensor<double>(rng, {8, 8});
    layer.wk.tensor = random_tensor<double>(rng, {8, 8});
    layer.wv.tensor = random_tensor<double>(rng, {8, 8});
    layer.wo.tensor = random_tensor<double>(rng, {8, 8});
    Tensor<double> x = random_tensor<double>(rng, {n, 8});
    PatchLabels labels = random_binary_labels(rng, n);
    MaskScale<double> kappa = MaskScale<double>::make(0, "k");
    kappa.raw.tensor.values_mut()[0] = rng.uniform(0.0, 3.0);
    ReweightMask<double> mask = build_mask(pairwise_distance_matrix(labels), kappa);

    auto pre = detail::attention_logits(x, layer);
    Tensor<double> att = masked_softmax_lastdim(pre.logits, mask.m);
    int64_t rows = att.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += att.values()[static_cast<size_t>(r * n + j)];
      if (std::abs(s - 1.0) > 1e-6) {
        detail = "row sum " + std::to_string(s);
        return false;
      }
    }
  }
  return true;
}

bool check_toeplitz(std::string& detail) {
  Rng rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    int64_t gh = 2 + static_cast<int64_t>(rng.uniform_int(4));
    int64_t gw = 2 + static_cast<int64_t>(rng.uniform_int(4));
    int64_t s = 1 + 2 * static_cast<int64_t>(rng.uniform_int(2));
    ConvMixing<double> conv;
    conv.grid_h = gh;
    conv.grid_w = gw;
    conv.kernel.tensor = random_tensor<double>(rng, {1, s, s});
    Tensor<double> w = toeplitz_from_kernel(conv);
    Tensor<double> xg = random_tensor<double>(rng, {1, gh, gw});
    Tensor<double> direct = depthwise_conv2d(xg, conv.kernel.tensor);
    Tensor<double> flat = reshape(xg, {gh * gw, 1});
    Tensor<double> via = matmul(w, flat);
    for (int64_t i = 0; i < gh * gw; ++i) {
      double a = via.values()[static_cast<size_t>(i)];
      double b = direct.values()[static_cast<size_t>(i)];
      if (std::abs(a - b) > 1e-12) {
        detail = "mismatch " + std::to_string(a - b);
        return false;
      }
    }
  }
  return true;
}

bool check_ffn_decomposition(std::string& detail) {
  Rng rng(33);
  int64_t n = 6, hidden = 5, d = 3;
  TokenMLP<double> mlp;
  mlp.w1.tensor = random_tensor<double>(rng, {hidden, n});
  mlp.w2.tensor = random_tensor<double>(rng, {n, hidden});
  Tensor<double> x = random_tensor<double>(rng, {n, d});
  ReweightMask<double> ones_mask;
  ones_mask.m = Tensor<double>::full({n, n}, 1.0);
  Tensor<double> plain = token_mlp_vanilla(x, mlp);
  Tensor<double> mixed = token_mlp_oamix(x, mlp, ones_mask);
  for (int64_t i = 0; i < plain.numel(); ++i)
    if (std::abs(plain.values()[static_cast<size_t>(i)] - mixed.values()[static_cast<size_t>(i)]) > 1e-12) {
      detail = "all-ones mask deviates";
      return false;
    }
  mlp.act = Activation::Identity;
  PatchLabels labels = random_binary_labels(rng, n);
  MaskScale<double> kappa = MaskScale<double>::make(0, "k");
  kappa.raw.tensor.values_mut()[0] = 0.8;
  ReweightMask<double> mask = build_mask(pairwise_distance_matrix(labels), kappa);
  Tensor<double> lin = matmul(mul(mask.m, linearize_token_mlp(mlp)), x);
  Tensor<double> oam = token_mlp_oamix(x, mlp, mask);
  for (int64_t i = 0; i < lin.numel(); ++i)
    if (lin.values()[static_cast<size_t>(i)] != oam.values()[static_cast<size_t>(i)]) {
      detail = "identity activation residual not exactly zero";
      return false;
    }
  return true;
}

bool check_mask_law(std::string& detail) {
  Rng rng(55);
  PatchLabels labels = random_binary_labels(rng, 8);
  DistanceMatrix dm = pairwise_distance_matrix(labels);
  MaskScale<double> kappa = MaskScale<double>::make(0, "k");
  kappa.raw.tensor.values_mut()[0] = 1.37;
  ReweightMask<double> mask = build_mask(dm, kappa);
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 8; ++j) {
      double expect = std::exp(-1.37 * dm.at(i, j));
      double got = mask.m.values()[static_cast<size_t>(i * 8 + j)];
      if (std::abs(expect - got) > 1e-12) {
        detail = "mask law deviates";
        return false;
      }
      if (i == j && got != 1.0) {
        detail = "diagonal not exactly one";
        return false;
      }
    }
  return true;
}

bool check_gradients(std::string& detail) {
  ModelConfig cfg;
  cfg.family = Family::MixerLike;
  cfg.image_h = cfg.image_w = 8;
  cfg.patch = 4;
  cfg.dim = 6;
  cfg.depth = 1;
  cfg.token_hidden = 5;
  cfg.classes = 2;
  cfg.oamix = true;
  Model<double> model = build_model<double>(cfg, 3);
  // grad-check at an interior point: kappa = 0 sits on the projection boundary
  for (auto* ms : model.mask_scales()) ms->raw.tensor.values_mut()[0] = 0.3;
  Rng rng(9);
  Tensor<double> img = random_tensor<double>(rng, {cfg.channels, 8, 8}, 0.0, 1.0);
  PatchLabels labels = random_binary_labels(rng, cfg.n_patches());
  std::vector<Parameter<double>> params;
  for (auto* p : model.parameters()) params.push_back(*p);
  double err = grad_check<double>(
      [&]() { return cross_entropy_with_logits(forward(model, img, &labels), 1); }, params,
      1e-5);
  if (err > 1e-5) {
    detail = "max relative error " + std::to_string(err);
    return false;
  }
  return true;
}

bool check_serialization(std::string& detail) {
  Rng rng(99);
  Tensor<float> t = random_tensor<float>(rng, {3, 4, 5});
  std::string bytes = encode_oat1(t);
  Tensor<float> back = decode_oat1<float>(bytes, "selftest");
  if (std::memcmp(back.values().data(), t.values().data(), sizeof(float) * 60) != 0) {
    detail = "OAT1 round trip changed payload";
    return false;
  }
  PixelLabelMap map;
  map.height = 4;
  map.width = 4;
  map.classes = 2;
  map.kind = LabelKind::MultiClass;
  map.values.resize(32);
  for (auto& v : map.values) v = 0.4 * rng.uniform();
  std::string b1 = encode_label_map(map);
  std::string b2 = encode_label_map(decode_label_map(b1, "selftest"));
  if (b1 != b2) {
    detail = "OAL1 round trip changed payload";
    return false;
  }
  return true;
}

bool check_dataset_determinism(std::string& detail) {
  SyntheticSpec spec;
  spec.train_samples = 4;
  spec.eval_samples = 4;
  spec.seed = 123;
  Dataset a = gen_dataset(spec);
  Dataset b = gen_dataset(spec);
  for (const auto& [name, split] : a.splits) {
    const auto& other = b.splits.at(name);
    for (size_t i = 0; i < split.samples.size(); ++i) {
      auto va = split.samples[i].image.values();
      auto vb = other.samples[i].image.values();
      if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) != 0) {
        detail = "split " + name + " differs between runs";
        return false;
      }
    }
  }
  return true;
}

}  // namespace

std::vector<CheckResult> run_selftest() {
  std::vector<CheckResult> results;
  auto run = [&](const std::string& name, bool (*fn)(std::string&)) {
    CheckResult r;
    r.name = name;
    try {
      r.passed = fn(r.detail);
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = e.what();
    }
    results.push_back(std::move(r));
  };
  run("vanilla equivalence at kappa=0", check_vanilla_equivalence);
  run("attention row stochasticity", check_row_stochastic);
  run("toeplitz matches direct convolution", check_toeplitz);
  run("feed-forward decomposition", check_ffn_decomposition);
  run("mask law exp(-kappa d)", check_mask_law);
  run("end-to-end gradient check", check_gradients);
  run("serialization round trips", check_serialization);
  run("dataset determinism", check_dataset_determinism);
  return results;
}

}  // namespace oamix
