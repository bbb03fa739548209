#pragma once

#include <cmath>
#include <vector>

#include "oamix/errors.hpp"
#include "oamix/tensor.hpp"

namespace oamix {

// AdamW with decoupled weight decay. Parameters flagged no_weight_decay
// (kappa, norm scales/offsets, biases) skip the decay term.
template <class T>
class AdamW {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
  };

  AdamW(std::vector<Parameter<T>*> params, Config cfg) : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.lr < 0.0) throw ParameterError("AdamW: learning rate must be nonnegative");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params_[i]->tensor.numel()), T(0));
      v_[i].assign(static_cast<size_t>(params_[i]->tensor.numel()), T(0));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto vals = p.tensor.values_mut();
      auto grads = p.tensor.grad();
      const double wd = p.no_weight_decay ? 0.0 : cfg_.weight_decay;
      for (size_t j = 0; j < vals.size(); ++j) {
        double g = static_cast<double>(grads[j]);
        double m = cfg_.beta1 * static_cast<double>(m_[i][j]) + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * static_cast<double>(v_[i][j]) + (1.0 - cfg_.beta2) * g * g;
        m_[i][j] = static_cast<T>(m);
        v_[i][j] = static_cast<T>(v);
        double mhat = m / bc1;
        double vhat = v / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + wd * static_cast<double>(vals[j]);
        vals[j] = static_cast<T>(static_cast<double>(vals[j]) - cfg_.lr * upd);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter<T>*> params_;
  Config cfg_;
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace oamix
