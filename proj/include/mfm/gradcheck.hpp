#pragma once

#include <functional>
#include <random>

#include "mfm/autograd.hpp"

namespace mfm {

inline constexpr double kGradCheckStep = 1e-4;
inline constexpr double kGradCheckTolerance = 1e-4;

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate of x.
inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                       double h = kGradCheckStep) {
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// |analytic - numeric| / max(1, |analytic|).
inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst;  // "<param>[<index>]"
  bool passed(double tol = kGradCheckTolerance) const { return max_rel_error <= tol; }
};

/// Compares tape gradients of `loss` against central differences on the
/// parameters of `params`. When `max_coords` is nonzero, that many coordinates
/// are sampled uniformly (seeded) across all parameters instead of checking all.
inline GradCheckResult check_param_grads(ParameterSet<double>& params,
                                         const std::function<Var<double>(Tape<double>&, Bound<double>&)>& loss_fn,
                                         std::size_t max_coords = 0, std::uint64_t seed = 0,
                                         double h = kGradCheckStep) {
  auto eval = [&]() {
    Tape<double> tape;
    Bound<double> bound(tape, params, false);
    return loss_fn(tape, bound).value().item();
  };
  params.zero_grad();
  {
    Tape<double> tape;
    Bound<double> bound(tape, params, true);
    tape.backward(loss_fn(tape, bound));
  }
  std::vector<std::pair<std::string, std::size_t>> coords;
  for (auto& [name, p] : params)
    for (std::size_t i = 0; i < p.value.size(); ++i) coords.emplace_back(name, i);
  if (max_coords != 0 && coords.size() > max_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  GradCheckResult res;
  for (const auto& [name, i] : coords) {
    auto& p = params.get(name);
    const double orig = p.value[i];
    p.value[i] = orig + h;
    const double fp = eval();
    p.value[i] = orig - h;
    const double fm = eval();
    p.value[i] = orig;
    const double err = grad_rel_error(p.grad[i], (fp - fm) / (2 * h));
    ++res.coordinates;
    if (err > res.max_rel_error || res.worst.empty()) {
      res.max_rel_error = std::max(res.max_rel_error, err);
      if (err >= res.max_rel_error) res.worst = name + "[" + std::to_string(i) + "]";
    }
  }
  return res;
}

}  // namespace mfm
