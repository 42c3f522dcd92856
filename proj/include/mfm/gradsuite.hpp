#pragma once

// Named finite-difference checks over every differentiable op the merge and
// fusion paths use. Each case builds a small random instance from a seed; the
// loss is a fixed random projection of the op's output so no coordinate of
// the gradient is trivially zero.

#include <string>
#include <vector>

#include "mfm/encoder.hpp"
#include "mfm/fusion.hpp"
#include "mfm/gradcheck.hpp"
#include "mfm/random.hpp"

namespace mfm {

struct GradCaseResult {
  std::string op;
  std::size_t instance = 0;
  GradCheckResult result;
};

inline const std::vector<std::string>& grad_case_names() {
  static const std::vector<std::string> names{
      "matmul",          "matmul_batched", "layer_norm",      "softmax",         "mean_half",
      "mean_all",        "layerscale",     "lln_layerscale",  "conv_layerscale", "mlp_align",
      "mlp_align_linear", "fuse",          "encoder"};
  return names;
}

namespace detail {

/// sum(y * R) with R drawn once per instance.
inline Var<double> projected(Var<double> y, Rng& rng) {
  auto r = normal_tensor<double>(y.shape(), rng, 1.0);
  return sum(mul(y, y.tape->constant(std::move(r))));
}

inline void add_layers(ParameterSet<double>& ps, std::size_t n, const Shape& shape, Rng& rng) {
  for (std::size_t i = 1; i <= n; ++i) ps.add("z." + std::to_string(i), normal_tensor<double>(shape, rng, 1.0));
}

inline std::vector<Var<double>> bind_layers(Bound<double>& P, std::size_t n) {
  std::vector<Var<double>> out;
  for (std::size_t i = 1; i <= n; ++i) out.push_back(P("z." + std::to_string(i)));
  return out;
}

/// Perturbs every parameter so identity/zero inits do not hide errors.
inline void jitter(ParameterSet<double>& ps, Rng& rng, double s) {
  for (auto& [name, p] : ps) p.value += normal_tensor<double>(p.value.shape(), rng, s);
}

}  // namespace detail

/// Runs one named case on the instance drawn from `seed`. Large cases sample
/// `max_coords` parameter coordinates; small ones check every coordinate.
inline GradCheckResult run_grad_case(const std::string& op, std::uint64_t seed, std::size_t max_coords = 30) {
  using detail::projected;
  Rng rng(split_seed(seed, "gradcheck/" + op));
  ParameterSet<double> ps;
  const std::uint64_t rseed = rng();
  // the projection draws must be identical on every evaluation
  auto proj = [rseed](Var<double> y) {
    Rng r(rseed);
    return projected(y, r);
  };
  constexpr std::size_t kN = 4, kB = 2, kT = 4, kD = 6;
  const TokenGrid grid{2, 2};

  if (op == "matmul" || op == "matmul_batched") {
    ps.add("a", normal_tensor<double>(op == "matmul" ? Shape{3, 4} : Shape{2, 3, 4}, rng, 1.0));
    ps.add("b", normal_tensor<double>({4, 5}, rng, 1.0));
    return check_param_grads(ps, [&](Tape<double>&, Bound<double>& P) { return proj(matmul(P("a"), P("b"))); });
  }
  if (op == "layer_norm") {
    ps.add("x", normal_tensor<double>({3, 5}, rng, 1.0));
    ps.add("gamma", normal_tensor<double>({5}, rng, 1.0));
    ps.add("beta", normal_tensor<double>({5}, rng, 1.0));
    return check_param_grads(
        ps, [&](Tape<double>&, Bound<double>& P) { return proj(layer_norm(P("x"), P("gamma"), P("beta"))); });
  }
  if (op == "softmax") {
    ps.add("x", normal_tensor<double>({3, 5}, rng, 2.0));
    return check_param_grads(ps, [&](Tape<double>&, Bound<double>& P) {
      return add(proj(softmax(P("x"), 1)), proj(softmax(P("x"), 0)));
    });
  }
  if (op == "mean_half" || op == "mean_all" || op == "layerscale" || op == "lln_layerscale" ||
      op == "conv_layerscale") {
    const auto s = *MergeStrategy::parse(op);
    detail::add_layers(ps, kN, {kB, kT, kD}, rng);
    auto extra = init_merge_params<double>(s, kN, kD);
    detail::jitter(extra, rng, 0.3);
    ps.merge(std::move(extra));
    return check_param_grads(ps, [&](Tape<double>&, Bound<double>& P) {
      return proj(merge(s, detail::bind_layers(P, kN), P, MergeContext{grid, Mode::Train, {}}));
    });
  }
  if (op == "mlp_align" || op == "mlp_align_linear") {
    const std::size_t blocks = op == "mlp_align" ? 2 : 0;
    auto cfg = FusionConfig::defaults(kN, kN, kD, kD, 4);
    cfg.mlp_blocks = blocks;
    cfg.mlp_ratio = 2;
    for (auto& [name, p] : init_fusion<double>(cfg, rng()))
      if (name.rfind("mlp.", 0) == 0) ps.add(name, p.value);
    detail::jitter(ps, rng, 0.1);
    ps.add("x", normal_tensor<double>({kB, kT, kD}, rng, 1.0));
    return check_param_grads(ps, [&](Tape<double>&, Bound<double>& P) { return proj(mlp_align(P("x"), blocks, P)); });
  }
  if (op == "fuse") {
    auto cfg = FusionConfig::defaults(kN, kN, kD, kD, 4);
    cfg.mlp_ratio = 2;
    ps = init_fusion<double>(cfg, rng());
    detail::jitter(ps, rng, 0.1);
    ParameterSet<double> z1, z2;
    detail::add_layers(z1, kN, {kB, kT, kD}, rng);
    detail::add_layers(z2, kN, {kB, kT, kD}, rng);
    for (auto& [name, p] : z1) ps.add("a." + name, p.value);
    for (auto& [name, p] : z2) ps.add("b." + name, p.value);
    return check_param_grads(
        ps,
        [&](Tape<double>&, Bound<double>& P) {
          std::vector<Var<double>> a, b;
          for (std::size_t i = 1; i <= kN; ++i) {
            a.push_back(P("a.z." + std::to_string(i)));
            b.push_back(P("b.z." + std::to_string(i)));
          }
          return proj(fuse(a, b, cfg, P));
        },
        max_coords, rng());
  }
  if (op == "encoder") {
    EncoderConfig cfg;
    cfg.depth = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.patch_size = 3;
    cfg.image_h = cfg.image_w = 6;
    cfg.seed = rng();
    ps = init_encoder<double>(cfg);
    detail::jitter(ps, rng, 0.1);
    auto images = normal_tensor<double>({2, cfg.channels, cfg.image_h, cfg.image_w}, rng, 1.0);
    return check_param_grads(
        ps,
        [&](Tape<double>& tape, Bound<double>& P) {
          auto layers = encode(tape, images, cfg, P);
          return add(proj(layers.back()), proj(layers.front()));
        },
        max_coords, rng());
  }
  throw std::invalid_argument("unknown gradient check case: " + op);
}

/// Every case on `instances` seeds derived from `seed`.
inline std::vector<GradCaseResult> run_grad_suite(std::size_t instances, std::uint64_t seed,
                                                  std::size_t max_coords = 30) {
  std::vector<GradCaseResult> out;
  for (const auto& op : grad_case_names())
    for (std::size_t i = 0; i < instances; ++i)
      out.push_back({op, i, run_grad_case(op, seed + i, max_coords)});
  return out;
}

}  // namespace mfm
