#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "oamix/model.hpp"
#include "oamix/model_io.hpp"

using namespace oamix;
using testutil::bit_equal;
using testutil::max_abs_diff;
using testutil::random_binary_labels;
using testutil::random_tensor;

namespace {

ModelConfig small_cfg(Family fam, bool oamix) {
  ModelConfig cfg;
  cfg.family = fam;
  cfg.image_h = cfg.image_w = 8;
  cfg.patch = 4;  // 2x2 grid, N = 4
  cfg.dim = 8;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.kernel = 3;
  cfg.token_hidden = 6;
  cfg.classes = 2;
  cfg.oamix = oamix;
  return cfg;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = small_cfg(Family::DeitLike, false);
  cfg.patch = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg(Family::DeitLike, false);
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg(Family::ConvMixerLike, false);
  cfg.kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(static_cast<void>(family_from_name("resnet")), ConfigError);
}

TEST_CASE("patch embedding single token") {
  ModelConfig cfg = small_cfg(Family::DeitLike, false);
  cfg.patch = 8;  // P == H == W -> one patch
  cfg.image_h = cfg.image_w = 8;
  Model<float> model = build_model<float>(cfg, 5);
  Rng rng(81);
  Tensor<float> img = random_tensor<float>(rng, {3, 8, 8}, 0.0, 1.0);
  Tensor<float> tokens = patch_embed(model, img);
  CHECK(tokens.shape() == Shape{1, 8});
}

TEST_CASE("zero image with zero position embedding embeds to zero tokens") {
  ModelConfig cfg = small_cfg(Family::DeitLike, false);
  Model<float> model = build_model<float>(cfg, 5);
  auto pos = model.pos.tensor.values_mut();
  std::fill(pos.begin(), pos.end(), 0.0f);
  Tensor<float> img = Tensor<float>::zeros({3, 8, 8});
  Tensor<float> tokens = patch_embed(model, img);
  for (float v : tokens.values()) CHECK(v == 0.0f);
}

TEST_CASE("patch flattening follows the index oracle") {
  // image values encode their own pixel index
  std::vector<float> v(16);
  for (int i = 0; i < 16; ++i) v[static_cast<size_t>(i)] = static_cast<float>(i);
  Tensor<float> img = Tensor<float>::from_data({1, 4, 4}, v);
  Tensor<float> patches = image_to_patches(img, 2);
  CHECK(patches.shape() == Shape{4, 4});
  for (int64_t p = 0; p < 4; ++p) {
    int64_t py = p / 2, px = p % 2;
    for (int64_t iy = 0; iy < 2; ++iy)
      for (int64_t ix = 0; ix < 2; ++ix) {
        float expect = static_cast<float>((py * 2 + iy) * 4 + (px * 2 + ix));
        CHECK(patches.values()[static_cast<size_t>(p * 4 + iy * 2 + ix)] == expect);
      }
  }
}

TEST_CASE("build_model is deterministic in the seed") {
  ModelConfig cfg = small_cfg(Family::MixerLike, false);
  Model<float> a = build_model<float>(cfg, 42);
  Model<float> b = build_model<float>(cfg, 42);
  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(bit_equal(pa[i]->tensor, pb[i]->tensor));
  }
  Model<float> c = build_model<float>(cfg, 43);
  bool any_diff = false;
  auto pc = c.parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    if (!bit_equal(pa[i]->tensor, pc[i]->tensor)) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("oamix adds exactly depth scalar parameters, all zero") {
  for (Family fam : {Family::DeitLike, Family::MixerLike, Family::ConvMixerLike}) {
    ModelConfig cfg = small_cfg(fam, false);
    Model<float> vanilla = build_model<float>(cfg, 9);
    cfg.oamix = true;
    Model<float> mixed = build_model<float>(cfg, 9);
    CHECK(mixed.param_entry_count() == vanilla.param_entry_count() + cfg.depth);

    // weights agree pairwise once kappa entries are skipped
    auto pv = vanilla.parameters();
    auto pm = mixed.parameters();
    size_t iv = 0;
    for (auto* p : pm) {
      if (p->name.find("kappa") != std::string::npos) {
        CHECK(p->tensor.numel() == 1);
        CHECK(p->tensor.values()[0] == 0.0f);
        continue;
      }
      CHECK(p->name == pv[iv]->name);
      CHECK(bit_equal(p->tensor, pv[iv]->tensor));
      ++iv;
    }
    CHECK(iv == pv.size());
  }
}

TEST_CASE("fresh OAMixed models forward bit-identically to vanilla") {
  Rng rng(82);
  for (Family fam : {Family::DeitLike, Family::MixerLike, Family::ConvMixerLike}) {
    ModelConfig cfg = small_cfg(fam, false);
    Model<float> vanilla = build_model<float>(cfg, 17);
    cfg.oamix = true;
    Model<float> mixed = build_model<float>(cfg, 17);
    for (int rep = 0; rep < 10; ++rep) {
      Tensor<float> img = random_tensor<float>(rng, {3, 8, 8}, 0.0, 1.0);
      PatchLabels labels = random_binary_labels(rng, 4);
      NoGradGuard ng;
      Tensor<float> a = forward(vanilla, img);
      Tensor<float> b = forward(mixed, img, &labels);
      CHECK(bit_equal(a, b));
    }
  }
}

TEST_CASE("uniform labels neutralize the mask at any kappa") {
  Rng rng(83);
  ModelConfig cfg = small_cfg(Family::DeitLike, false);
  Model<float> vanilla = build_model<float>(cfg, 23);
  cfg.oamix = true;
  Model<float> mixed = build_model<float>(cfg, 23);
  for (auto* ms : mixed.mask_scales()) ms->raw.tensor.values_mut()[0] = 1.7f;

  PatchLabels uniform;
  uniform.n_patches = 4;
  uniform.classes = 1;
  uniform.kind = LabelKind::BinarySoft;
  uniform.y = {0.6, 0.6, 0.6, 0.6};

  Tensor<float> img = random_tensor<float>(rng, {3, 8, 8}, 0.0, 1.0);
  NoGradGuard ng;
  Tensor<float> a = forward(vanilla, img);
  Tensor<float> b = forward(mixed, img, &uniform);
  CHECK(bit_equal(a, b));
}

TEST_CASE("forward validates labels") {
  Rng rng(84);
  ModelConfig cfg = small_cfg(Family::MixerLike, true);
  Model<float> model = build_model<float>(cfg, 2);
  Tensor<float> img = random_tensor<float>(rng, {3, 8, 8}, 0.0, 1.0);
  CHECK_THROWS_AS(static_cast<void>(forward(model, img)), InputError);
  PatchLabels labels = random_binary_labels(rng, 9);
  CHECK_THROWS_AS(static_cast<void>(forward(model, img, &labels)), InputError);
}

TEST_CASE("zero head yields zero logits; logits stay finite and normalizable") {
  Rng rng(85);
  ModelConfig cfg = small_cfg(Family::ConvMixerLike, true);
  Model<float> model = build_model<float>(cfg, 31);
  {
    auto h = model.head_w.tensor.values_mut();
    std::fill(h.begin(), h.end(), 0.0f);
  }
  Tensor<float> img = random_tensor<float>(rng, {3, 8, 8}, 0.0, 1.0);
  PatchLabels labels = random_binary_labels(rng, 4);
  NoGradGuard ng;
  Tensor<float> logits = forward(model, img, &labels);
  CHECK(logits.shape() == Shape{2});
  for (float v : logits.values()) CHECK(v == 0.0f);

  Model<float> model2 = build_model<float>(cfg, 32);
  Tensor<float> l2 = forward(model2, img, &labels);
  CHECK(l2.all_finite());
  Tensor<float> sm = softmax_lastdim(l2);
  double s = 0.0;
  for (float v : sm.values()) s += v;
  CHECK(std::abs(s - 1.0) <= 1e-6);

  // forward is deterministic given (seed, config, input, labels)
  Tensor<float> l3 = forward(model2, img, &labels);
  CHECK(bit_equal(l2, l3));
}

TEST_CASE("end-to-end gradient checks per family") {
  for (Family fam : {Family::DeitLike, Family::MixerLike, Family::ConvMixerLike}) {
    ModelConfig cfg = small_cfg(fam, true);
    cfg.depth = 1;
    Model<double> model = build_model<double>(cfg, 7);
    for (auto* ms : model.mask_scales()) ms->raw.tensor.values_mut()[0] = 0.4;
    Rng rng(86);
    Tensor<double> img = random_tensor<double>(rng, {3, 8, 8}, 0.0, 1.0);
    PatchLabels labels = random_binary_labels(rng, 4);
    std::vector<Parameter<double>> params;
    for (auto* p : model.parameters()) params.push_back(*p);
    double err = grad_check<double>(
        [&]() { return cross_entropy_with_logits(forward(model, img, &labels), 1); }, params,
        1e-5);
    INFO(family_name(fam));
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("mask scale reporting") {
  ModelConfig cfg = small_cfg(Family::DeitLike, true);
  cfg.depth = 4;
  Model<float> model = build_model<float>(cfg, 3);
  MaskScaleReport rep = report_mask_scales(model);
  CHECK(rep.per_layer.size() == 4);
  for (double v : rep.per_layer) CHECK(v == 0.0);
  for (double v : rep.quarters) CHECK(v == 0.0);

  for (int64_t l = 0; l < 4; ++l)
    model.blocks[static_cast<size_t>(l)].kappa.raw.tensor.values_mut()[0] =
        static_cast<float>(l + 1);
  MaskScaleReport rep2 = report_mask_scales(model);
  CHECK(rep2.quarters[0] == 1.0);
  CHECK(rep2.quarters[1] == 2.0);
  CHECK(rep2.quarters[2] == 3.0);
  CHECK(rep2.quarters[3] == 4.0);

  ModelConfig vcfg = small_cfg(Family::DeitLike, false);
  Model<float> vanilla = build_model<float>(vcfg, 3);
  CHECK_THROWS_AS(static_cast<void>(report_mask_scales(vanilla)), StateError);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig cfg = small_cfg(Family::DeitLike, true);
  Model<float> model = build_model<float>(cfg, 77);
  // perturb a few parameters away from init
  model.blocks[0].kappa.raw.tensor.values_mut()[0] = 0.25f;
  model.head_b.tensor.values_mut()[0] = -1.5f;

  std::string dir = "/tmp/oamix_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, model, 77, 123);

  uint64_t seed = 0;
  int64_t step = 0;
  Model<float> back = load_checkpoint<float>(dir, &seed, &step);
  CHECK(seed == 77);
  CHECK(step == 123);
  CHECK(back.cfg.family == cfg.family);
  CHECK(back.cfg.oamix == cfg.oamix);
  auto pa = model.parameters();
  auto pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(pa[i]->tensor, pb[i]->tensor));

  CHECK_THROWS_AS(static_cast<void>(load_checkpoint<float>("/tmp/oamix_no_such_dir")),
                  FormatError);
}

TEST_CASE("config json round trip") {
  ModelConfig cfg = small_cfg(Family::ConvMixerLike, true);
  cfg.sharing = ConvSharing::Full;
  ModelConfig back = config_from_json(config_to_json(cfg));
  CHECK(back.family == cfg.family);
  CHECK(back.sharing == cfg.sharing);
  CHECK(back.dim == cfg.dim);
  CHECK(back.depth == cfg.depth);
  CHECK(back.oamix == cfg.oamix);
}
