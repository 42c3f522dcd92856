#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <vector>

#include "mfm/autograd.hpp"

namespace mfm {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

/// Cosine annealing from base_lr at step 0 to 0 at step `total`.
inline double cosine_lr(double base_lr, std::size_t step, std::size_t total) {
  if (total == 0) return base_lr;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

/// Adam with decoupled weight decay over a fixed list of parameters.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = static_cast<T>(opt_.beta1 * m[i] + (1 - opt_.beta1) * g);
        v[i] = static_cast<T>(opt_.beta2 * v[i] + (1 - opt_.beta2) * g * g);
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        double nv = p.value[i] - lr * mh / (std::sqrt(vh) + opt_.eps);
        if (opt_.weight_decay != 0) nv -= lr * opt_.weight_decay * p.value[i];
        p.value[i] = static_cast<T>(nv);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamOptions opt_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

/// All parameters of a set whose name starts with `prefix` (all when empty).
template <typename T>
std::vector<Parameter<T>*> select_params(ParameterSet<T>& set, const std::string& prefix = "") {
  std::vector<Parameter<T>*> out;
  for (auto& [name, p] : set)
    if (name.rfind(prefix, 0) == 0) out.push_back(&p);
  return out;
}

}  // namespace mfm
