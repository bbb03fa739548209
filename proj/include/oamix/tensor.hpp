#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "oamix/errors.hpp"

namespace oamix {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_shape_valid(const Shape& s) {
  for (int64_t d : s)
    if (d <= 0)
      throw DimensionError("tensor dimensions must be positive, got " + shape_str(s));
}

// Grad recording is a per-thread switch; forward-only evaluation runs with it off.
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  bool is_op = false;
  uint64_t epoch = 0;  // tape generation this op was recorded under
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Ordered record of primitive ops applied on this thread. Creation order is
// topological by construction.
template <class T>
struct Tape {
  std::vector<std::shared_ptr<Node<T>>> ops;
  uint64_t epoch = 1;
  void clear() {
    ops.clear();
    ++epoch;
  }
};

template <class T>
Tape<T>& tape() {
  static thread_local Tape<T> t;
  return t;
}

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    check_shape_valid(shape);
    return leaf(std::move(shape), {}, T(0), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    check_shape_valid(shape);
    return leaf(std::move(shape), {}, v, requires_grad);
  }
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check_shape_valid(shape);
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->shape = {};
    n->value = {v};
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return n_->numel(); }
  int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  bool requires_grad() const { return n_->requires_grad; }

  std::span<const T> values() const { return {n_->value.data(), n_->value.size()}; }
  // Mutation is only legal on leaf tensors (parameters, buffers); op outputs
  // belong to the tape.
  std::span<T> values_mut() { return {n_->value.data(), n_->value.size()}; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const T> grad() const {
    n_->ensure_grad();
    return {n_->grad.data(), n_->grad.size()};
  }
  void zero_grad() { n_->grad.assign(n_->value.size(), T(0)); }

  T item() const {
    if (numel() != 1) throw DimensionError("item() requires a scalar, got " + shape_str(shape()));
    return n_->value[0];
  }

  bool all_finite() const {
    for (T v : n_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

 private:
  static Tensor leaf(Shape shape, std::vector<T> data, T fill, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(static_cast<size_t>(numel_of(shape)), fill);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    (void)data;
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node<T>> n_;
};

// Named trainable tensor. Names are unique within one model.
template <class T>
struct Parameter {
  Tensor<T> tensor;
  std::string name;
  bool no_weight_decay = false;
};

// -------------------------------------------------------------------------
// op construction

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_op = true;
  for (auto& p : parents) {
    n->parents.push_back(p.node());
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (g_grad_enabled) {
    n->epoch = tape<T>().epoch;
    if (n->requires_grad) n->backprop = std::move(backprop);
    tape<T>().ops.push_back(n);
  } else {
    n->requires_grad = false;
  }
  return Tensor<T>(std::move(n));
}

// -------------------------------------------------------------------------
// backward

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  auto ln = loss.node();
  auto& tp = tape<T>();
  if (!ln->is_op || ln->epoch != tp.epoch)
    throw StateError("backward: loss was not produced on the current tape");

  ln->ensure_grad();
  ln->grad[0] += T(1);

  std::unordered_set<const Node<T>*> needed;
  needed.insert(ln.get());
  for (auto it = tp.ops.rbegin(); it != tp.ops.rend(); ++it) {
    Node<T>* n = it->get();
    if (!needed.count(n)) continue;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
    for (auto& p : n->parents) needed.insert(p.get());
  }
}

// -------------------------------------------------------------------------
// kernels shared by forward/backward (fixed left-to-right accumulation order)

namespace detail {

template <class T>
void mm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  // c += a[m,k] * b[k,n]
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      T av = ai[p];
      const T* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T>
void mm_tn(const T* a, const T* g, T* out, int64_t m, int64_t k, int64_t n) {
  // out[k,n] += a^T[k,m] * g[m,n]  with a stored [m,k]
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* gi = g + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = ai[p];
      T* op = out + p * n;
      for (int64_t j = 0; j < n; ++j) op[j] += av * gi[j];
    }
  }
}

template <class T>
void mm_nt(const T* g, const T* b, T* out, int64_t m, int64_t k, int64_t n) {
  // out[m,k] += g[m,n] * b^T[n,k]  with b stored [k,n]
  for (int64_t i = 0; i < m; ++i) {
    const T* gi = g + i * n;
    T* oi = out + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      T s = T(0);
      for (int64_t j = 0; j < n; ++j) s += gi[j] * bp[j];
      oi[p] += s;
    }
  }
}

inline int64_t batch_count(const Shape& s) {
  int64_t b = 1;
  for (size_t i = 0; i + 2 < s.size(); ++i) b *= s[i];
  return b;
}

}  // namespace detail

// -------------------------------------------------------------------------
// matmul: a [.., m, k] x b [.., k, n] -> [.., m, n]
// Leading batch dims must be equal, or absent on one side (that operand is
// then shared across batches).

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  int64_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(sa) + " vs " +
                         shape_str(sb));
  Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b)
    throw DimensionError("matmul: batch dimensions disagree, " + shape_str(sa) + " vs " +
                         shape_str(sb));
  Shape batch = batch_a.empty() ? batch_b : batch_a;
  int64_t nb = 1;
  for (int64_t d : batch) nb *= d;

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<size_t>(nb * m * n), T(0));
  const bool a_batched = !batch_a.empty();
  const bool b_batched = !batch_b.empty();
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (int64_t bi = 0; bi < nb; ++bi) {
    detail::mm_nn(pa + (a_batched ? bi * m * k : 0), pb + (b_batched ? bi * k * n : 0),
                  out.data() + bi * m * n, m, k, n);
  }

  return make_op<T>(
      std::move(out_shape), std::move(out), {a, b},
      [m, k, n, nb, a_batched, b_batched](Node<T>& nd) {
        auto& pa_n = *nd.parents[0];
        auto& pb_n = *nd.parents[1];
        const T* g = nd.grad.data();
        if (pa_n.requires_grad) {
          pa_n.ensure_grad();
          for (int64_t bi = 0; bi < nb; ++bi)
            detail::mm_nt(g + bi * m * n, pb_n.value.data() + (b_batched ? bi * k * n : 0),
                          pa_n.grad.data() + (a_batched ? bi * m * k : 0), m, k, n);
        }
        if (pb_n.requires_grad) {
          pb_n.ensure_grad();
          for (int64_t bi = 0; bi < nb; ++bi)
            detail::mm_tn(pa_n.value.data() + (a_batched ? bi * m * k : 0), g + bi * m * n,
                          pb_n.grad.data() + (b_batched ? bi * k * n : 0), m, k, n);
        }
      });
}

// -------------------------------------------------------------------------
// softmax over the last dimension, computed with max-subtraction

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& t) {
  if (t.rank() < 1) throw DimensionError("softmax_lastdim: rank must be >= 1");
  int64_t d = t.shape().back();
  int64_t rows = t.numel() / d;
  std::vector<T> out(static_cast<size_t>(t.numel()));
  const T* x = t.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    T* yr = out.data() + r * d;
    T mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    T s = T(0);
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (int64_t j = 0; j < d; ++j) yr[j] /= s;
  }
  std::vector<T> saved = out;
  return make_op<T>(
      t.shape(), std::move(out), {t}, [d, rows, saved = std::move(saved)](Node<T>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* g = nd.grad.data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = saved.data() + r * d;
          const T* gr = g + r * d;
          T dot = T(0);
          for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
          T* pg = p.grad.data() + r * d;
          for (int64_t j = 0; j < d; ++j) pg[j] += yr[j] * (gr[j] - dot);
        }
      });
}

// Softmax with per-entry multiplicative weights and renormalization:
//   out_ij = w_ij * e_ij / (sum_j w_ij * e_ij + guard),  e_ij = exp(x_ij - max_i x)
// w must have the shape of the trailing two dims of x (shared across leading
// batch dims) or exactly x's shape. With w identically one this reproduces
// softmax_lastdim bit-for-bit in float32 (the guard is absorbed by rounding).
template <class T>
Tensor<T> masked_softmax_lastdim(const Tensor<T>& t, const Tensor<T>& w) {
  if (t.rank() < 2) throw DimensionError("masked_softmax_lastdim: rank must be >= 2");
  int64_t d = t.shape().back();
  int64_t rows_per_mat = t.shape()[t.shape().size() - 2];
  const bool full = w.shape() == t.shape();
  if (!full) {
    Shape tail(t.shape().end() - 2, t.shape().end());
    if (w.shape() != tail)
      throw DimensionError("masked_softmax_lastdim: weight shape " + shape_str(w.shape()) +
                           " does not match " + shape_str(t.shape()));
  }
  const T guard = T(1e-12);
  int64_t rows = t.numel() / d;
  int64_t wsz = w.numel();
  std::vector<T> out(static_cast<size_t>(t.numel()));
  std::vector<T> exps(static_cast<size_t>(t.numel()));
  std::vector<T> inv_denom(static_cast<size_t>(rows));
  const T* x = t.values().data();
  const T* wv = w.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    const T* wr = wv + (full ? r * d : (r * d) % wsz);
    T* er = exps.data() + r * d;
    T* yr = out.data() + r * d;
    T mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    T s = T(0);
    for (int64_t j = 0; j < d; ++j) {
      er[j] = std::exp(xr[j] - mx);
      s += wr[j] * er[j];
    }
    s += guard;
    for (int64_t j = 0; j < d; ++j) yr[j] = wr[j] * er[j] / s;
    inv_denom[r] = T(1) / s;
  }
  std::vector<T> saved_out = out;
  return make_op<T>(
      t.shape(), std::move(out), {t, w},
      [d, rows, rows_per_mat, full, wsz, exps = std::move(exps),
       inv_denom = std::move(inv_denom), saved_out = std::move(saved_out)](Node<T>& nd) {
        (void)rows_per_mat;
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        const T* g = nd.grad.data();
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = saved_out.data() + r * d;
          const T* gr = g + r * d;
          const T* er = exps.data() + r * d;
          T dot = T(0);
          for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
          if (px.requires_grad) {
            T* pg = px.grad.data() + r * d;
            for (int64_t j = 0; j < d; ++j) pg[j] += yr[j] * (gr[j] - dot);
          }
          if (pw.requires_grad) {
            T* wg = pw.grad.data() + (full ? r * d : (r * d) % wsz);
            T inv = inv_denom[r];
            for (int64_t j = 0; j < d; ++j) wg[j] += er[j] * (gr[j] - dot) * inv;
          }
        }
      });
}

// -------------------------------------------------------------------------
// elementwise ops
//
// Binary ops accept equal shapes, a scalar operand (numel == 1), or one
// operand whose shape equals the trailing suffix of the other (leading batch
// dim broadcast).

namespace detail {

enum class Bcast { None, ScalarA, ScalarB, SuffixA, SuffixB };

template <class T>
Bcast classify(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return Bcast::None;
  if (b.numel() == 1) return Bcast::ScalarB;
  if (a.numel() == 1) return Bcast::ScalarA;
  auto suffix_of = [](const Shape& small, const Shape& big) {
    if (small.size() >= big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (suffix_of(b.shape(), a.shape())) return Bcast::SuffixB;
  if (suffix_of(a.shape(), b.shape())) return Bcast::SuffixA;
  throw DimensionError("elementwise: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// accumulate src (shape of the larger operand) into dst (broadcast operand)
template <class T>
void reduce_into(const T* src, int64_t n_src, T* dst, int64_t n_dst) {
  for (int64_t i = 0; i < n_src; ++i) dst[i % n_dst] += src[i];
}

}  // namespace detail

template <class T, class FwdFn, class BwdFn>
Tensor<T> binary_ew(const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd, BwdFn bwd_pair) {
  using detail::Bcast;
  Bcast bc = detail::classify(a, b);
  bool a_small = (bc == Bcast::ScalarA || bc == Bcast::SuffixA);
  const Tensor<T>& big = a_small ? b : a;
  int64_t n = big.numel();
  int64_t na = a.numel(), nb = b.numel();
  std::vector<T> out(static_cast<size_t>(n));
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(pa[i % na], pb[i % nb]);

  return make_op<T>(
      big.shape(), std::move(out), {a, b}, [n, na, nb, bwd_pair](Node<T>& nd) {
        auto& A = *nd.parents[0];
        auto& B = *nd.parents[1];
        const T* g = nd.grad.data();
        const T* va = A.value.data();
        const T* vb = B.value.data();
        if (A.requires_grad) {
          A.ensure_grad();
          T* ga = A.grad.data();
          for (int64_t i = 0; i < n; ++i)
            ga[i % na] += bwd_pair(g[i], va[i % na], vb[i % nb], true);
        }
        if (B.requires_grad) {
          B.ensure_grad();
          T* gb = B.grad.data();
          for (int64_t i = 0; i < n; ++i)
            gb[i % nb] += bwd_pair(g[i], va[i % na], vb[i % nb], false);
        }
      });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew(
      a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, bool) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew(
      a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, bool is_a) { return is_a ? g : -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew(
      a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, bool is_a) { return is_a ? g * y : g * x; });
}

template <class T>
Tensor<T> exp_ew(const Tensor<T>& t) {
  std::vector<T> out(t.values().begin(), t.values().end());
  for (T& v : out) v = std::exp(v);
  std::vector<T> saved = out;
  return make_op<T>(t.shape(), std::move(out), {t}, [saved = std::move(saved)](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < saved.size(); ++i) p.grad[i] += nd.grad[i] * saved[i];
  });
}

template <class T>
Tensor<T> neg(const Tensor<T>& t) {
  std::vector<T> out(t.values().begin(), t.values().end());
  for (T& v : out) v = -v;
  return make_op<T>(t.shape(), std::move(out), {t}, [](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] -= nd.grad[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& t, T c) {
  std::vector<T> out(t.values().begin(), t.values().end());
  for (T& v : out) v *= c;
  return make_op<T>(t.shape(), std::move(out), {t}, [c](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += c * nd.grad[i];
  });
}

// tanh-approximation GELU
template <class T>
Tensor<T> gelu(const Tensor<T>& t) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<T> out(static_cast<size_t>(t.numel()));
  const T* x = t.values().data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    double xv = static_cast<double>(x[i]);
    double u = kC * (xv + kA * xv * xv * xv);
    out[static_cast<size_t>(i)] = static_cast<T>(0.5 * xv * (1.0 + std::tanh(u)));
  }
  return make_op<T>(t.shape(), std::move(out), {t}, [](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    constexpr double c = 0.7978845608028654;
    constexpr double a = 0.044715;
    for (size_t i = 0; i < nd.grad.size(); ++i) {
      double xv = static_cast<double>(p.value[i]);
      double u = c * (xv + a * xv * xv * xv);
      double th = std::tanh(u);
      double du = c * (1.0 + 3.0 * a * xv * xv);
      double dydx = 0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * du;
      p.grad[i] += nd.grad[i] * static_cast<T>(dydx);
    }
  });
}

// -------------------------------------------------------------------------
// layer normalization over the last dimension

template <class T>
Tensor<T> layer_norm(const Tensor<T>& t, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  if (eps <= T(0)) throw ParameterError("layer_norm: eps must be positive");
  int64_t d = t.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: gamma/beta must match last dim " + std::to_string(d));
  int64_t rows = t.numel() / d;
  std::vector<T> out(static_cast<size_t>(t.numel()));
  std::vector<T> xhat(static_cast<size_t>(t.numel()));
  std::vector<T> inv(static_cast<size_t>(rows));
  const T* x = t.values().data();
  const T* g = gamma.values().data();
  const T* b = beta.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= T(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = xr[j] - mu;
      var += c * c;
    }
    var /= T(d);
    T iv = T(1) / std::sqrt(var + eps);
    inv[static_cast<size_t>(r)] = iv;
    for (int64_t j = 0; j < d; ++j) {
      T xh = (xr[j] - mu) * iv;
      xhat[static_cast<size_t>(r * d + j)] = xh;
      out[static_cast<size_t>(r * d + j)] = g[j] * xh + b[j];
    }
  }
  return make_op<T>(
      t.shape(), std::move(out), {t, gamma, beta},
      [d, rows, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pg = *nd.parents[1];
        auto& pb = *nd.parents[2];
        const T* gr = nd.grad.data();
        const T* gv = pg.value.data();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* go = gr + r * d;
          const T* xh = xhat.data() + r * d;
          if (pg.requires_grad)
            for (int64_t j = 0; j < d; ++j) pg.grad[static_cast<size_t>(j)] += go[j] * xh[j];
          if (pb.requires_grad)
            for (int64_t j = 0; j < d; ++j) pb.grad[static_cast<size_t>(j)] += go[j];
          if (px.requires_grad) {
            T m1 = T(0), m2 = T(0);
            for (int64_t j = 0; j < d; ++j) {
              T dg = go[j] * gv[j];
              m1 += dg;
              m2 += dg * xh[j];
            }
            m1 /= T(d);
            m2 /= T(d);
            T iv = inv[static_cast<size_t>(r)];
            T* pxg = px.grad.data() + r * d;
            for (int64_t j = 0; j < d; ++j)
              pxg[j] += (go[j] * gv[j] - m1 - xh[j] * m2) * iv;
          }
        }
      });
}

// -------------------------------------------------------------------------
// depthwise 2D convolution, stride 1, zero padding, same output size.
// kernel is [1,S,S] (shared across channels) or [C,S,S] (per channel).

template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel) {
  if (x.rank() != 3) throw DimensionError("depthwise_conv2d: input must be [C,H,W]");
  if (kernel.rank() != 3) throw DimensionError("depthwise_conv2d: kernel must be [1|C,S,S]");
  int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int64_t KC = kernel.dim(0), S = kernel.dim(1);
  if (kernel.dim(2) != S) throw DimensionError("depthwise_conv2d: kernel must be square");
  if (S % 2 == 0) throw ParameterError("depthwise_conv2d: kernel size must be odd");
  if (KC != 1 && KC != C)
    throw DimensionError("depthwise_conv2d: kernel channels must be 1 or match input (" +
                         std::to_string(C) + "), got " + std::to_string(KC));
  int64_t half = S / 2;
  std::vector<T> out(static_cast<size_t>(C * H * W), T(0));
  const T* xv = x.values().data();
  const T* kv = kernel.values().data();
  for (int64_t c = 0; c < C; ++c) {
    const T* kc = kv + (KC == 1 ? 0 : c * S * S);
    const T* xc = xv + c * H * W;
    T* oc = out.data() + c * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xi = 0; xi < W; ++xi) {
        T s = T(0);
        for (int64_t dy = 0; dy < S; ++dy) {
          int64_t yy = y + dy - half;
          if (yy < 0 || yy >= H) continue;
          for (int64_t dx = 0; dx < S; ++dx) {
            int64_t xx = xi + dx - half;
            if (xx < 0 || xx >= W) continue;
            s += kc[dy * S + dx] * xc[yy * W + xx];
          }
        }
        oc[y * W + xi] = s;
      }
  }
  return make_op<T>(
      x.shape(), std::move(out), {x, kernel}, [C, H, W, KC, S, half](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pk = *nd.parents[1];
        const T* g = nd.grad.data();
        if (px.requires_grad) px.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
          const T* kc = pk.value.data() + (KC == 1 ? 0 : c * S * S);
          const T* xc = px.value.data() + c * H * W;
          const T* gc = g + c * H * W;
          T* xg = px.requires_grad ? px.grad.data() + c * H * W : nullptr;
          T* kg = pk.requires_grad ? pk.grad.data() + (KC == 1 ? 0 : c * S * S) : nullptr;
          for (int64_t y = 0; y < H; ++y)
            for (int64_t xi = 0; xi < W; ++xi) {
              T go = gc[y * W + xi];
              for (int64_t dy = 0; dy < S; ++dy) {
                int64_t yy = y + dy - half;
                if (yy < 0 || yy >= H) continue;
                for (int64_t dx = 0; dx < S; ++dx) {
                  int64_t xx = xi + dx - half;
                  if (xx < 0 || xx >= W) continue;
                  if (xg) xg[yy * W + xx] += kc[dy * S + dx] * go;
                  if (kg) kg[dy * S + dx] += xc[yy * W + xx] * go;
                }
              }
            }
        }
      });
}

// -------------------------------------------------------------------------
// structural ops

template <class T>
Tensor<T> concat(int axis, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank()) throw DimensionError("concat: ranks disagree");
  int r = a.rank();
  if (axis < 0 || axis >= r) throw DimensionError("concat: axis out of range");
  for (int i = 0; i < r; ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw DimensionError("concat: shapes disagree off-axis, " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] += b.dim(axis);

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
  int64_t wa = a.dim(axis) * inner, wb = b.dim(axis) * inner;

  std::vector<T> out(static_cast<size_t>(numel_of(out_shape)));
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(pa + o * wa, pa + (o + 1) * wa, out.data() + o * (wa + wb));
    std::copy(pb + o * wb, pb + (o + 1) * wb, out.data() + o * (wa + wb) + wa);
  }
  return make_op<T>(
      std::move(out_shape), std::move(out), {a, b}, [outer, wa, wb](Node<T>& nd) {
        auto& A = *nd.parents[0];
        auto& B = *nd.parents[1];
        const T* g = nd.grad.data();
        if (A.requires_grad) {
          A.ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < wa; ++i) A.grad[static_cast<size_t>(o * wa + i)] += g[o * (wa + wb) + i];
        }
        if (B.requires_grad) {
          B.ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < wb; ++i)
              B.grad[static_cast<size_t>(o * wb + i)] += g[o * (wa + wb) + wa + i];
        }
      });
}

template <class T>
Tensor<T> permute(const Tensor<T>& t, const std::vector<int>& perm) {
  int r = t.rank();
  if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: order size mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
      throw DimensionError("permute: invalid axis order");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = t.dim(perm[static_cast<size_t>(i)]);

  // strides of input, then output linear index -> input linear index
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * t.dim(i + 1);
  std::vector<int64_t> gather(static_cast<size_t>(t.numel()));
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const int64_t n = t.numel();
  for (int64_t li = 0; li < n; ++li) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    gather[static_cast<size_t>(li)] = src;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  std::vector<T> out(static_cast<size_t>(n));
  const T* src = t.values().data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = src[gather[static_cast<size_t>(i)]];
  return make_op<T>(std::move(out_shape), std::move(out), {t},
                    [gather = std::move(gather)](Node<T>& nd) {
                      auto& p = *nd.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (size_t i = 0; i < gather.size(); ++i)
                        p.grad[static_cast<size_t>(gather[i])] += nd.grad[i];
                    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& t, Shape new_shape) {
  check_shape_valid(new_shape);
  if (numel_of(new_shape) != t.numel())
    throw DimensionError("reshape: element count mismatch, " + shape_str(t.shape()) + " -> " +
                         shape_str(new_shape));
  std::vector<T> out(t.values().begin(), t.values().end());
  return make_op<T>(std::move(new_shape), std::move(out), {t}, [](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += nd.grad[i];
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& t, int64_t start, int64_t len) {
  if (t.rank() < 1) throw DimensionError("slice_rows: rank must be >= 1");
  int64_t n0 = t.dim(0);
  if (start < 0 || len <= 0 || start + len > n0)
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for dim " +
                         std::to_string(n0));
  int64_t stride = t.numel() / n0;
  Shape out_shape = t.shape();
  out_shape[0] = len;
  std::vector<T> out(t.values().begin() + start * stride,
                     t.values().begin() + (start + len) * stride);
  return make_op<T>(std::move(out_shape), std::move(out), {t}, [start, stride](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i)
      p.grad[static_cast<size_t>(start * stride) + i] += nd.grad[i];
  });
}

template <class T>
Tensor<T> reduce_sum_all(const Tensor<T>& t) {
  T s = T(0);
  for (T v : t.values()) s += v;
  return make_op<T>({}, {s}, {t}, [](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    T g = nd.grad[0];
    for (auto& pg : p.grad) pg += g;
  });
}

template <class T>
Tensor<T> mean_axis0(const Tensor<T>& t) {
  if (t.rank() < 1) throw DimensionError("mean_axis0: rank must be >= 1");
  int64_t n0 = t.dim(0);
  int64_t stride = t.numel() / n0;
  Shape out_shape(t.shape().begin() + 1, t.shape().end());
  std::vector<T> out(static_cast<size_t>(stride), T(0));
  const T* x = t.values().data();
  for (int64_t r = 0; r < n0; ++r)
    for (int64_t j = 0; j < stride; ++j) out[static_cast<size_t>(j)] += x[r * stride + j];
  T invn = T(1) / T(n0);
  for (T& v : out) v *= invn;
  return make_op<T>(std::move(out_shape), std::move(out), {t}, [n0, stride, invn](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t r = 0; r < n0; ++r)
      for (int64_t j = 0; j < stride; ++j)
        p.grad[static_cast<size_t>(r * stride + j)] += nd.grad[static_cast<size_t>(j)] * invn;
  });
}

// softmax cross entropy against an integer class target; logits rank 1
template <class T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, int64_t target) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy_with_logits: logits must be rank 1");
  int64_t n = logits.numel();
  if (target < 0 || target >= n)
    throw InputError("cross_entropy_with_logits: target " + std::to_string(target) +
                     " out of range for " + std::to_string(n) + " classes");
  const T* x = logits.values().data();
  T mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T s = T(0);
  std::vector<T> p(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) {
    p[static_cast<size_t>(j)] = std::exp(x[j] - mx);
    s += p[static_cast<size_t>(j)];
  }
  for (auto& v : p) v /= s;
  T loss = -(x[target] - mx - std::log(s));
  return make_op<T>({}, {loss}, {logits}, [target, p = std::move(p)](Node<T>& nd) {
    auto& pl = *nd.parents[0];
    if (!pl.requires_grad) return;
    pl.ensure_grad();
    T g = nd.grad[0];
    for (size_t j = 0; j < p.size(); ++j)
      pl.grad[j] += g * (p[j] - (static_cast<int64_t>(j) == target ? T(1) : T(0)));
  });
}

// -------------------------------------------------------------------------
// gradient verification against central finite differences

template <class T>
double grad_check(const std::function<Tensor<T>()>& f, std::vector<Parameter<T>>& params,
                  double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw ParameterError("grad_check: eps must be in [1e-7, 1e-3]");

  auto eval = [&]() -> T {
    NoGradGuard ng;
    return f().item();
  };
  T base1 = eval();
  T base2 = eval();
  if (base1 != base2)
    throw DeterminismError("grad_check: function is not deterministic (" +
                           std::to_string(static_cast<double>(base1)) + " vs " +
                           std::to_string(static_cast<double>(base2)) + ")");

  for (auto& p : params) p.tensor.zero_grad();
  tape<T>().clear();
  Tensor<T> loss = f();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
  tape<T>().clear();

  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].tensor.values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      T keep = vals[i];
      vals[i] = keep + static_cast<T>(eps);
      double fp = static_cast<double>(eval());
      vals[i] = keep - static_cast<T>(eps);
      double fm = static_cast<double>(eval());
      vals[i] = keep;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = static_cast<double>(analytic[pi][i]);
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace oamix
