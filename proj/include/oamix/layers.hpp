#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "oamix/errors.hpp"
#include "oamix/mask.hpp"
#include "oamix/tensor.hpp"

namespace oamix {

enum class Activation { Gelu, Identity };

template <class T>
Tensor<T> activate(const Tensor<T>& x, Activation act) {
  return act == Activation::Gelu ? gelu(x) : x;
}

// ---------------------------------------------------------------------------
// self-attention

template <class T>
struct AttentionLayer {
  Parameter<T> wq, wk, wv, wo;  // all [D, D]
  int64_t heads = 1;

  int64_t dim() const { return wq.tensor.dim(0); }
  int64_t head_dim() const { return dim() / heads; }
};

namespace detail {

template <class T>
struct AttentionPre {
  Tensor<T> logits;  // [H, T, head_dim] scaled query-key products -> [H, T, T]
  Tensor<T> vh;      // [H, T, head_dim]
};

template <class T>
AttentionPre<T> attention_logits(const Tensor<T>& x, const AttentionLayer<T>& layer) {
  const int64_t D = layer.dim();
  if (D % layer.heads != 0)
    throw ConfigError("attention: dim " + std::to_string(D) + " not divisible by " +
                      std::to_string(layer.heads) + " heads");
  if (x.rank() != 2 || x.dim(1) != D)
    throw DimensionError("attention: input must be [tokens, " + std::to_string(D) + "], got " +
                         shape_str(x.shape()));
  const int64_t tokens = x.dim(0);
  const int64_t hd = layer.head_dim();
  auto split = [&](const Tensor<T>& proj) {
    return permute(reshape(proj, {tokens, layer.heads, hd}), {1, 0, 2});
  };
  Tensor<T> qh = split(matmul(x, layer.wq.tensor));
  Tensor<T> kh = split(matmul(x, layer.wk.tensor));
  Tensor<T> vh = split(matmul(x, layer.wv.tensor));
  Tensor<T> logits =
      scale(matmul(qh, permute(kh, {0, 2, 1})), T(1) / static_cast<T>(std::sqrt(double(hd))));
  return {logits, vh};
}

template <class T>
Tensor<T> attention_merge(const Tensor<T>& att, const Tensor<T>& vh,
                          const AttentionLayer<T>& layer, int64_t tokens) {
  Tensor<T> oh = matmul(att, vh);  // [H, T, hd]
  Tensor<T> merged = reshape(permute(oh, {1, 0, 2}), {tokens, layer.dim()});
  return matmul(merged, layer.wo.tensor);
}

}  // namespace detail

template <class T>
Tensor<T> attention_vanilla(const Tensor<T>& x, const AttentionLayer<T>& layer) {
  auto pre = detail::attention_logits(x, layer);
  Tensor<T> att = softmax_lastdim(pre.logits);
  return detail::attention_merge(att, pre.vh, layer, x.dim(0));
}

// Masked attention, renormalized so rows sum to one. The mask weights enter
// the softmax normalization directly, which reduces bit-for-bit to the
// vanilla path when the mask is identically one.
template <class T>
Tensor<T> attention_oamix(const Tensor<T>& x, const AttentionLayer<T>& layer,
                          const ReweightMask<T>& mask) {
  if (mask.tokens() != x.dim(0))
    throw DimensionError("attention_oamix: mask covers " + std::to_string(mask.tokens()) +
                         " tokens but input has " + std::to_string(x.dim(0)));
  auto pre = detail::attention_logits(x, layer);
  Tensor<T> att = masked_softmax_lastdim(pre.logits, mask.m);
  return detail::attention_merge(att, pre.vh, layer, x.dim(0));
}

// ---------------------------------------------------------------------------
// token-mixing MLP (applied per channel, i.e. to columns of x)

template <class T>
struct TokenMLP {
  Parameter<T> w1;  // [hidden, N]
  Parameter<T> w2;  // [N, hidden]
  Activation act = Activation::Gelu;

  int64_t tokens() const { return w2.tensor.dim(0); }
};

// L_mix: the token MLP with activations dropped. Recomputed per forward since
// the weights train.
template <class T>
Tensor<T> linearize_token_mlp(const TokenMLP<T>& mlp) {
  return matmul(mlp.w2.tensor, mlp.w1.tensor);
}

template <class T>
Tensor<T> token_mlp_vanilla(const Tensor<T>& x, const TokenMLP<T>& mlp) {
  if (x.rank() != 2 || x.dim(0) != mlp.tokens())
    throw DimensionError("token_mlp: input must be [" + std::to_string(mlp.tokens()) +
                         ", channels], got " + shape_str(x.shape()));
  if (mlp.act == Activation::Identity) {
    // a linear network is exactly its linearization
    return matmul(linearize_token_mlp(mlp), x);
  }
  return matmul(mlp.w2.tensor, activate(matmul(mlp.w1.tensor, x), mlp.act));
}

// Masked linear term plus the nonlinear residual. Grouped as
// ((M (.) L) x - L x) + f(x) so an all-ones mask telescopes exactly to the
// vanilla output; with identity activation the residual is identically zero.
template <class T>
Tensor<T> token_mlp_oamix(const Tensor<T>& x, const TokenMLP<T>& mlp,
                          const ReweightMask<T>& mask) {
  if (mask.has_cls)
    throw DimensionError("token_mlp_oamix: mask must not carry a [CLS] row/column");
  if (mask.tokens() != x.dim(0))
    throw DimensionError("token_mlp_oamix: mask covers " + std::to_string(mask.tokens()) +
                         " tokens but input has " + std::to_string(x.dim(0)));
  Tensor<T> lin = linearize_token_mlp(mlp);
  Tensor<T> masked = matmul(mul(mask.m, lin), x);
  if (mlp.act == Activation::Identity) return masked;
  Tensor<T> plain = matmul(lin, x);
  Tensor<T> full = token_mlp_vanilla(x, mlp);
  return add(sub(masked, plain), full);
}

// ---------------------------------------------------------------------------
// convolutional mixing over the patch grid

template <class T>
struct ConvMixing {
  Parameter<T> kernel;  // [1, S, S] shared or [D, S, S] per channel
  int64_t grid_h = 0, grid_w = 0;

  int64_t tokens() const { return grid_h * grid_w; }
  int64_t size() const { return kernel.tensor.dim(1); }
  bool shared() const { return kernel.tensor.dim(0) == 1; }
};

// W_linear: the matrix whose product with the flattened patch grid reproduces
// the zero-padded stride-1 depthwise convolution. Shared kernels give [N, N];
// the per-channel variant gives one matrix per channel, [C, N, N].
template <class T>
Tensor<T> toeplitz_from_kernel(const ConvMixing<T>& conv) {
  const int64_t S = conv.size();
  const int64_t gh = conv.grid_h, gw = conv.grid_w;
  const int64_t n = gh * gw;
  const int64_t half = S / 2;
  const int64_t kc = conv.kernel.tensor.dim(0);
  if (conv.kernel.tensor.dim(2) != S)
    throw DimensionError("toeplitz_from_kernel: kernel must be square");
  if (S % 2 == 0) throw ParameterError("toeplitz_from_kernel: kernel size must be odd");

  // (position in W, tap index) pairs; identical for every channel
  std::vector<std::pair<int64_t, int64_t>> scatter;
  scatter.reserve(static_cast<size_t>(n * S * S));
  for (int64_t p = 0; p < n; ++p) {
    int64_t py = p / gw, px = p % gw;
    for (int64_t dy = 0; dy < S; ++dy) {
      int64_t qy = py + dy - half;
      if (qy < 0 || qy >= gh) continue;
      for (int64_t dx = 0; dx < S; ++dx) {
        int64_t qx = px + dx - half;
        if (qx < 0 || qx >= gw) continue;
        scatter.emplace_back(p * n + qy * gw + qx, dy * S + dx);
      }
    }
  }

  Shape out_shape = conv.shared() ? Shape{n, n} : Shape{kc, n, n};
  std::vector<T> w(static_cast<size_t>(numel_of(out_shape)), T(0));
  const T* k = conv.kernel.tensor.values().data();
  for (int64_t c = 0; c < kc; ++c)
    for (auto& [pos, tap] : scatter)
      w[static_cast<size_t>(c * n * n + pos)] = k[c * S * S + tap];

  return make_op<T>(out_shape, std::move(w), {conv.kernel.tensor},
                    [kc, n, S, scatter = std::move(scatter)](Node<T>& nd) {
                      auto& pk = *nd.parents[0];
                      if (!pk.requires_grad) return;
                      pk.ensure_grad();
                      for (int64_t c = 0; c < kc; ++c)
                        for (auto& [pos, tap] : scatter)
                          pk.grad[static_cast<size_t>(c * S * S + tap)] +=
                              nd.grad[static_cast<size_t>(c * n * n + pos)];
                    });
}

namespace detail {

template <class T>
Tensor<T> conv_mix_apply(const Tensor<T>& x, const ConvMixing<T>& conv, const Tensor<T>& w) {
  if (x.rank() != 2 || x.dim(0) != conv.tokens())
    throw DimensionError("conv mixing: input must be [" + std::to_string(conv.tokens()) +
                         ", channels], got " + shape_str(x.shape()));
  if (conv.shared()) return matmul(w, x);
  // per-channel matrices: route each channel through its own W
  const int64_t n = conv.tokens(), d = x.dim(1);
  Tensor<T> cols = reshape(permute(x, {1, 0}), {d, n, 1});
  Tensor<T> mixed = matmul(w, cols);  // [D, N, 1]
  return permute(reshape(mixed, {d, n}), {1, 0});
}

}  // namespace detail

template <class T>
Tensor<T> conv_mixing_vanilla(const Tensor<T>& x, const ConvMixing<T>& conv) {
  return detail::conv_mix_apply(x, conv, toeplitz_from_kernel(conv));
}

template <class T>
Tensor<T> conv_mixing_oamix(const Tensor<T>& x, const ConvMixing<T>& conv,
                            const ReweightMask<T>& mask) {
  if (mask.has_cls)
    throw DimensionError("conv_mixing_oamix: mask must not carry a [CLS] row/column");
  if (mask.tokens() != conv.tokens())
    throw DimensionError("conv_mixing_oamix: mask covers " + std::to_string(mask.tokens()) +
                         " tokens but grid has " + std::to_string(conv.tokens()));
  Tensor<T> w = toeplitz_from_kernel(conv);
  return detail::conv_mix_apply(x, conv, mul(w, mask.m));
}

// ---------------------------------------------------------------------------
// channel-mixing MLP (applied per patch, i.e. to rows of x)

template <class T>
struct ChannelMLP {
  Parameter<T> wa;  // [D, hidden]
  Parameter<T> wb;  // [hidden, D]
  Activation act = Activation::Gelu;
};

template <class T>
Tensor<T> channel_mlp(const Tensor<T>& x, const ChannelMLP<T>& mlp) {
  return matmul(activate(matmul(x, mlp.wa.tensor), mlp.act), mlp.wb.tensor);
}

// ---------------------------------------------------------------------------
// full pre-norm residual block

enum class MixerKind { Attention, TokenMlp, Conv };

template <class T>
struct LayerNormParams {
  Parameter<T> gamma, beta;
};

template <class T>
struct Block {
  MixerKind kind = MixerKind::Attention;
  AttentionLayer<T> attn;
  TokenMLP<T> token;
  ConvMixing<T> conv;
  ChannelMLP<T> channel;
  LayerNormParams<T> ln1, ln2;
  MaskScale<T> kappa;
  bool oamixed = false;
  T ln_eps = T(1e-5);
};

template <class T>
Tensor<T> block_forward(Block<T>& block, const Tensor<T>& x, const ReweightMask<T>* mask) {
  if (block.oamixed && mask == nullptr)
    throw ConfigError("block_forward: OAMixed block requires a reweighting mask");
  if (!block.oamixed && mask != nullptr)
    throw ConfigError("block_forward: vanilla block does not take a mask");

  Tensor<T> h = layer_norm(x, block.ln1.gamma.tensor, block.ln1.beta.tensor, block.ln_eps);
  Tensor<T> mixed;
  switch (block.kind) {
    case MixerKind::Attention:
      mixed = mask ? attention_oamix(h, block.attn, *mask) : attention_vanilla(h, block.attn);
      break;
    case MixerKind::TokenMlp:
      mixed = mask ? token_mlp_oamix(h, block.token, *mask) : token_mlp_vanilla(h, block.token);
      break;
    case MixerKind::Conv:
      mixed = mask ? conv_mixing_oamix(h, block.conv, *mask) : conv_mixing_vanilla(h, block.conv);
      break;
  }
  Tensor<T> x1 = add(x, mixed);
  Tensor<T> h2 = layer_norm(x1, block.ln2.gamma.tensor, block.ln2.beta.tensor, block.ln_eps);
  return add(x1, channel_mlp(h2, block.channel));
}

}  // namespace oamix
