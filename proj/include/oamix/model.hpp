#pragma once

#include <array>
#include <string>
#include <vector>

#include "oamix/errors.hpp"
#include "oamix/labels.hpp"
#include "oamix/layers.hpp"
#include "oamix/mask.hpp"
#include "oamix/rng.hpp"
#include "oamix/tensor.hpp"

namespace oamix {

enum class Family { DeitLike, MixerLike, ConvMixerLike };
enum class ConvSharing { Shared, Full };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::DeitLike: return "deit_like";
    case Family::MixerLike: return "mixer_like";
    case Family::ConvMixerLike: return "convmixer_like";
  }
  return "?";
}

inline Family family_from_name(const std::string& s) {
  if (s == "deit_like") return Family::DeitLike;
  if (s == "mixer_like") return Family::MixerLike;
  if (s == "convmixer_like") return Family::ConvMixerLike;
  throw ConfigError("unknown model family '" + s + "'");
}

struct ModelConfig {
  Family family = Family::DeitLike;
  int64_t image_h = 32, image_w = 32, channels = 3;
  int64_t patch = 8;
  int64_t dim = 64;
  int64_t depth = 4;
  int64_t heads = 4;          // attention families
  int64_t kernel = 3;         // conv families
  int64_t token_hidden = 32;  // mixer families
  int64_t classes = 4;
  bool oamix = false;
  ConvSharing sharing = ConvSharing::Shared;

  int64_t grid_h() const { return image_h / patch; }
  int64_t grid_w() const { return image_w / patch; }
  int64_t n_patches() const { return grid_h() * grid_w(); }
  bool has_cls() const { return family == Family::DeitLike; }

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || channels <= 0 || patch <= 0 || dim <= 0 || depth <= 0 ||
        classes <= 1)
      throw ConfigError("model config: dimensions must be positive and classes >= 2");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("model config: image " + std::to_string(image_h) + "x" +
                        std::to_string(image_w) + " not divisible by patch " +
                        std::to_string(patch));
    if (family == Family::DeitLike && dim % heads != 0)
      throw ConfigError("model config: dim " + std::to_string(dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    if (family == Family::ConvMixerLike) {
      if (kernel % 2 == 0) throw ConfigError("model config: conv kernel size must be odd");
    }
    if (family == Family::MixerLike && token_hidden <= 0)
      throw ConfigError("model config: token_hidden must be positive");
  }
};

template <class T>
struct Model {
  ModelConfig cfg;
  Parameter<T> embed_w;  // [P^2 C, D]
  Parameter<T> embed_b;  // [D]
  Parameter<T> pos;      // [N, D], DeiT-like only
  Parameter<T> cls;      // [1, D], DeiT-like only
  std::vector<Block<T>> blocks;
  LayerNormParams<T> final_norm;
  Parameter<T> head_w;  // [D, classes]
  Parameter<T> head_b;  // [classes]

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    out.push_back(&embed_w);
    out.push_back(&embed_b);
    if (cfg.has_cls()) {
      out.push_back(&pos);
      out.push_back(&cls);
    }
    for (auto& b : blocks) {
      out.push_back(&b.ln1.gamma);
      out.push_back(&b.ln1.beta);
      switch (b.kind) {
        case MixerKind::Attention:
          out.push_back(&b.attn.wq);
          out.push_back(&b.attn.wk);
          out.push_back(&b.attn.wv);
          out.push_back(&b.attn.wo);
          break;
        case MixerKind::TokenMlp:
          out.push_back(&b.token.w1);
          out.push_back(&b.token.w2);
          break;
        case MixerKind::Conv:
          out.push_back(&b.conv.kernel);
          break;
      }
      out.push_back(&b.ln2.gamma);
      out.push_back(&b.ln2.beta);
      out.push_back(&b.channel.wa);
      out.push_back(&b.channel.wb);
      if (cfg.oamix) out.push_back(&b.kappa.raw);
    }
    out.push_back(&final_norm.gamma);
    out.push_back(&final_norm.beta);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
  }

  std::vector<MaskScale<T>*> mask_scales() {
    std::vector<MaskScale<T>*> out;
    if (!cfg.oamix) return out;
    for (auto& b : blocks) out.push_back(&b.kappa);
    return out;
  }

  int64_t param_entry_count() {
    int64_t n = 0;
    for (auto* p : parameters()) n += p->tensor.numel();
    return n;
  }
};

// ---------------------------------------------------------------------------
// patch embedding

// Rearranges [C, H, W] into non-overlapping patches, each flattened row-major
// as a [C, P, P] slice of length P^2 C; patches ordered raster across the grid.
template <class T>
Tensor<T> image_to_patches(const Tensor<T>& image, int64_t patch) {
  if (image.rank() != 3) throw DimensionError("image_to_patches: image must be [C,H,W]");
  int64_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H % patch != 0 || W % patch != 0)
    throw ConfigError("image_to_patches: image " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by patch " + std::to_string(patch));
  int64_t gh = H / patch, gw = W / patch;
  int64_t n = gh * gw, plen = patch * patch * C;
  std::vector<int64_t> gather(static_cast<size_t>(n * plen));
  int64_t o = 0;
  for (int64_t py = 0; py < gh; ++py)
    for (int64_t px = 0; px < gw; ++px)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t iy = 0; iy < patch; ++iy)
          for (int64_t ix = 0; ix < patch; ++ix)
            gather[static_cast<size_t>(o++)] =
                c * H * W + (py * patch + iy) * W + (px * patch + ix);
  std::vector<T> out(static_cast<size_t>(n * plen));
  const T* src = image.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = src[gather[i]];
  return make_op<T>({n, plen}, std::move(out), {image},
                    [gather = std::move(gather)](Node<T>& nd) {
                      auto& p = *nd.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (size_t i = 0; i < gather.size(); ++i)
                        p.grad[static_cast<size_t>(gather[i])] += nd.grad[i];
                    });
}

template <class T>
Tensor<T> patch_embed(Model<T>& model, const Tensor<T>& image) {
  const auto& cfg = model.cfg;
  if (image.rank() != 3 || image.dim(0) != cfg.channels || image.dim(1) != cfg.image_h ||
      image.dim(2) != cfg.image_w)
    throw DimensionError("patch_embed: expected image [" + std::to_string(cfg.channels) + ", " +
                         std::to_string(cfg.image_h) + ", " + std::to_string(cfg.image_w) +
                         "], got " + shape_str(image.shape()));
  Tensor<T> patches = image_to_patches(image, cfg.patch);
  Tensor<T> tokens = add(matmul(patches, model.embed_w.tensor), model.embed_b.tensor);
  if (cfg.has_cls()) tokens = add(tokens, model.pos.tensor);
  return tokens;
}

// ---------------------------------------------------------------------------
// construction

template <class T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> model;
  model.cfg = cfg;
  Rng root(seed);

  auto trunc_normal = [&](const std::string& name, Shape shape) {
    Rng stream = root.fork(name);
    int64_t n = numel_of(shape);
    std::vector<T> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<T>(stream.truncated_normal(0.02));
    Parameter<T> p;
    p.tensor = Tensor<T>::from_data(std::move(shape), std::move(v), /*requires_grad=*/true);
    p.name = name;
    return p;
  };
  auto zeros = [&](const std::string& name, Shape shape) {
    Parameter<T> p;
    p.tensor = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
    p.name = name;
    p.no_weight_decay = true;  // biases and norm offsets
    return p;
  };
  auto ones = [&](const std::string& name, Shape shape) {
    Parameter<T> p;
    p.tensor = Tensor<T>::full(std::move(shape), T(1), /*requires_grad=*/true);
    p.name = name;
    p.no_weight_decay = true;
    return p;
  };

  const int64_t D = cfg.dim, N = cfg.n_patches();
  model.embed_w = trunc_normal("embed.w", {cfg.patch * cfg.patch * cfg.channels, D});
  model.embed_b = zeros("embed.b", {D});
  if (cfg.has_cls()) {
    model.pos = trunc_normal("pos_embed", {N, D});
    model.cls = trunc_normal("cls_token", {1, D});
  }

  model.blocks.resize(static_cast<size_t>(cfg.depth));
  for (int64_t l = 0; l < cfg.depth; ++l) {
    Block<T>& b = model.blocks[static_cast<size_t>(l)];
    std::string pre = "blocks." + std::to_string(l) + ".";
    b.ln1.gamma = ones(pre + "ln1.gamma", {D});
    b.ln1.beta = zeros(pre + "ln1.beta", {D});
    b.ln2.gamma = ones(pre + "ln2.gamma", {D});
    b.ln2.beta = zeros(pre + "ln2.beta", {D});
    switch (cfg.family) {
      case Family::DeitLike:
        b.kind = MixerKind::Attention;
        b.attn.heads = cfg.heads;
        b.attn.wq = trunc_normal(pre + "attn.wq", {D, D});
        b.attn.wk = trunc_normal(pre + "attn.wk", {D, D});
        b.attn.wv = trunc_normal(pre + "attn.wv", {D, D});
        b.attn.wo = trunc_normal(pre + "attn.wo", {D, D});
        break;
      case Family::MixerLike:
        b.kind = MixerKind::TokenMlp;
        b.token.w1 = trunc_normal(pre + "token.w1", {cfg.token_hidden, N});
        b.token.w2 = trunc_normal(pre + "token.w2", {N, cfg.token_hidden});
        break;
      case Family::ConvMixerLike:
        b.kind = MixerKind::Conv;
        b.conv.grid_h = cfg.grid_h();
        b.conv.grid_w = cfg.grid_w();
        b.conv.kernel = trunc_normal(
            pre + "conv.kernel",
            {cfg.sharing == ConvSharing::Shared ? 1 : D, cfg.kernel, cfg.kernel});
        break;
    }
    b.channel.wa = trunc_normal(pre + "channel.wa", {D, 4 * D});
    b.channel.wb = trunc_normal(pre + "channel.wb", {4 * D, D});
    b.oamixed = cfg.oamix;
    b.kappa = MaskScale<T>::make(static_cast<int>(l), pre + "kappa");
  }

  model.final_norm.gamma = ones("final_norm.gamma", {D});
  model.final_norm.beta = zeros("final_norm.beta", {D});
  model.head_w = trunc_normal("head.w", {D, cfg.classes});
  model.head_b = zeros("head.b", {cfg.classes});
  return model;
}

// ---------------------------------------------------------------------------
// forward

template <class T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& image, const PatchLabels* labels = nullptr) {
  const auto& cfg = model.cfg;
  Tensor<T> d_const;
  if (cfg.oamix) {
    if (labels == nullptr)
      throw InputError("forward: OAMixed model requires per-image patch labels");
    if (labels->n_patches != cfg.n_patches())
      throw InputError("forward: labels cover " + std::to_string(labels->n_patches) +
                       " patches but the grid has " + std::to_string(cfg.n_patches()));
    // one distance matrix per image, shared by every layer
    d_const = distance_tensor<T>(pairwise_distance_matrix(*labels));
  }

  Tensor<T> x = patch_embed(model, image);
  if (cfg.has_cls()) x = concat(0, model.cls.tensor, x);

  for (auto& block : model.blocks) {
    if (cfg.oamix) {
      ReweightMask<T> mask = build_mask(d_const, block.kappa);
      if (cfg.has_cls()) mask = augment_cls(mask);
      x = block_forward(block, x, &mask);
    } else {
      x = block_forward(block, x, static_cast<const ReweightMask<T>*>(nullptr));
    }
  }

  x = layer_norm(x, model.final_norm.gamma.tensor, model.final_norm.beta.tensor, T(1e-5));
  Tensor<T> feature;
  if (cfg.has_cls()) {
    feature = slice_rows(x, 0, 1);  // [1, D]
  } else {
    feature = reshape(mean_axis0(x), {1, cfg.dim});
  }
  Tensor<T> logits = add(matmul(feature, model.head_w.tensor), model.head_b.tensor);
  return reshape(logits, {cfg.classes});
}

// ---------------------------------------------------------------------------
// mask scale reporting

struct MaskScaleReport {
  std::vector<double> per_layer;
  std::array<double, 4> quarters{};
};

template <class T>
MaskScaleReport report_mask_scales(Model<T>& model) {
  if (!model.cfg.oamix)
    throw StateError("report_mask_scales: model has no mask scales (vanilla)");
  MaskScaleReport rep;
  std::vector<MaskScale<T>> scales;
  for (auto* s : model.mask_scales()) {
    rep.per_layer.push_back(static_cast<double>(s->value()));
    scales.push_back(*s);
  }
  rep.quarters = quarter_averaged_scales(scales);
  return rep;
}

}  // namespace oamix
