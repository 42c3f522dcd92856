#pragma once

// Two-branch fusion of a global-semantic encoder (branch 1) and an
// instance-contrastive encoder (branch 2):
//
//   v1 = sum_{i in clip_layers} alpha_i * Linear(LN(z1_i))     alpha = softmax(clip.alpha)
//   v2 = sum_{j in dino_layers} beta_j  * Linear(LN(z2_j))     beta  = softmax(dino.beta)
//   v  = Linear([v1, MLP(v2)])                                  -> [B, T, out_dim]
//
// MLP layout (the `mlp_block` constant): m = 0 is a single Linear D2->D2;
// m >= 1 stacks m residual-free blocks LN -> Linear(D2, r*D2) -> GELU -> Linear(r*D2, D2).
//
// Parameter names (serialized under the "fusion/" prefix):
//   clip.alpha [|C|], clip.lln.<i>.*, dino.beta [|S|], dino.lln.<j>.*,
//   mlp.linear.{weight,bias} (m = 0) or mlp.<k>.{ln.gamma, ln.beta, fc1.weight, fc1.bias, fc2.weight, fc2.bias},
//   proj.weight [D1+D2, out_dim], proj.bias [out_dim]
//
// Learnable scalar count:
//   |C| (D1^2 + 3 D1 + 1) + |S| (D2^2 + 3 D2 + 1)            (per-layer LLN; shared: one group per branch)
//   + (m == 0 ? D2^2 + D2 : m (2 r D2^2 + r D2 + 3 D2))
//   + (D1 + D2) out_dim + out_dim

#include <set>
#include <string>
#include <vector>

#include "mfm/merge.hpp"

namespace mfm {

inline constexpr const char* kFusionPrefix = "fusion/";
inline constexpr const char* kMlpBlockLayout = "ln-linear-gelu-linear";

struct FusionConfig {
  std::vector<std::size_t> clip_layers;  // 1-based
  std::vector<std::size_t> dino_layers;  // 1-based
  std::size_t clip_depth = 8;
  std::size_t dino_depth = 8;
  std::size_t clip_dim = 32;
  std::size_t dino_dim = 32;
  std::size_t mlp_blocks = 2;
  std::size_t mlp_ratio = 4;
  std::size_t out_dim = 64;
  LlnOrder lln_order = LlnOrder::LnThenLinear;
  bool lln_shared = false;

  /// All layers of branch 1, the last ceil(N2/4) layers of branch 2, m = 2, r = 4.
  static FusionConfig defaults(std::size_t clip_depth, std::size_t dino_depth, std::size_t clip_dim,
                               std::size_t dino_dim, std::size_t out_dim = 64) {
    FusionConfig c;
    c.clip_depth = clip_depth;
    c.dino_depth = dino_depth;
    c.clip_dim = clip_dim;
    c.dino_dim = dino_dim;
    c.out_dim = out_dim;
    for (std::size_t i = 1; i <= clip_depth; ++i) c.clip_layers.push_back(i);
    for (std::size_t j = dino_depth - (dino_depth + 3) / 4 + 1; j <= dino_depth; ++j) c.dino_layers.push_back(j);
    return c;
  }

  void validate() const {
    auto check = [](const std::vector<std::size_t>& s, std::size_t depth, const char* what) {
      if (s.empty()) throw DimensionError(std::string(what) + " layer set is empty");
      std::set<std::size_t> seen;
      for (auto i : s) {
        if (i < 1 || i > depth)
          throw DimensionError(std::string(what) + " layer " + std::to_string(i) + " outside 1.." +
                               std::to_string(depth));
        if (!seen.insert(i).second) throw DimensionError(std::string(what) + " layer set has duplicates");
      }
    };
    check(clip_layers, clip_depth, "clip");
    check(dino_layers, dino_depth, "dino");
    if (mlp_ratio == 0 || out_dim == 0 || clip_dim == 0 || dino_dim == 0)
      throw DimensionError("fusion dims and mlp ratio must be positive");
  }

  /// Warnings for settings outside the validated ablation grid.
  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    const std::set<std::size_t> blocks{0, 1, 2, 4, 8}, ratios{4, 8, 16};
    if (!blocks.count(mlp_blocks)) w.push_back("mlp_blocks " + std::to_string(mlp_blocks) + " is outside {0,1,2,4,8}");
    if (mlp_blocks > 0 && !ratios.count(mlp_ratio))
      w.push_back("mlp_ratio " + std::to_string(mlp_ratio) + " is outside {4,8,16}");
    return w;
  }
};

template <typename T>
ParameterSet<T> init_fusion(const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(split_seed(seed, "fusion.init"));
  ParameterSet<T> ps;
  auto branch = [&](const std::string& base, const std::vector<std::size_t>& ids, std::size_t dim,
                    const std::string& logits) {
    ps.add(base + logits, Tensor<T>::zeros({ids.size()}));
    if (cfg.lln_shared)
      add_lln_params(ps, lln_prefix(base + "lln.", 0, true), dim, dim);
    else
      for (auto i : ids) add_lln_params(ps, lln_prefix(base + "lln.", i, false), dim, dim);
  };
  branch("clip.", cfg.clip_layers, cfg.clip_dim, "alpha");
  branch("dino.", cfg.dino_layers, cfg.dino_dim, "beta");
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
    ps.add(name + ".weight", normal_tensor<T>({in, out}, rng, 1.0 / std::sqrt(double(in))));
    ps.add(name + ".bias", Tensor<T>::zeros({out}));
  };
  const std::size_t D2 = cfg.dino_dim, hidden = cfg.mlp_ratio * D2;
  if (cfg.mlp_blocks == 0) {
    dense("mlp.linear", D2, D2);
  } else {
    for (std::size_t k = 0; k < cfg.mlp_blocks; ++k) {
      const std::string p = "mlp." + std::to_string(k) + ".";
      ps.add(p + "ln.gamma", Tensor<T>::ones({D2}));
      ps.add(p + "ln.beta", Tensor<T>::zeros({D2}));
      dense(p + "fc1", D2, hidden);
      dense(p + "fc2", hidden, D2);
    }
  }
  dense("proj", cfg.clip_dim + cfg.dino_dim, cfg.out_dim);
  return ps;
}

inline std::size_t count_params(const FusionConfig& cfg) {
  auto lln = [](std::size_t d) { return d * d + 3 * d; };
  const std::size_t C = cfg.clip_layers.size(), S = cfg.dino_layers.size();
  const std::size_t D1 = cfg.clip_dim, D2 = cfg.dino_dim, r = cfg.mlp_ratio, m = cfg.mlp_blocks;
  std::size_t n = C + S;
  n += (cfg.lln_shared ? 1 : C) * lln(D1) + (cfg.lln_shared ? 1 : S) * lln(D2);
  n += m == 0 ? D2 * D2 + D2 : m * (2 * r * D2 * D2 + r * D2 + 3 * D2);
  n += (D1 + D2) * cfg.out_dim + cfg.out_dim;
  return n;
}

/// One branch: softmax-weighted Linear(LN(.)) over a layer subset.
template <typename T>
Var<T> branch_merge(const std::vector<Var<T>>& layers, std::span<const std::size_t> layer_set, Bound<T>& P,
                    const std::string& base, const std::string& logits_name, const MergeOptions& opt) {
  if (layer_set.empty()) throw DimensionError("branch_merge: empty layer set");
  std::vector<Var<T>> selected;
  for (auto i : layer_set) {
    if (i < 1 || i > layers.size())
      throw DimensionError("branch_merge: layer " + std::to_string(i) + " outside 1.." + std::to_string(layers.size()));
    selected.push_back(layers[i - 1]);
  }
  return merge_lln_layerscale(selected, layer_set, P, base + "lln.", P(base + logits_name), opt);
}

/// Aligns branch-2 features: single linear (m = 0) or m stacked MLP blocks.
template <typename T>
Var<T> mlp_align(Var<T> x, std::size_t blocks, Bound<T>& P) {
  if (blocks == 0) return linear(x, P("mlp.linear.weight"), P("mlp.linear.bias"));
  for (std::size_t k = 0; k < blocks; ++k) {
    const std::string p = "mlp." + std::to_string(k) + ".";
    auto h = layer_norm(x, P(p + "ln.gamma"), P(p + "ln.beta"));
    h = gelu(linear(h, P(p + "fc1.weight"), P(p + "fc1.bias")));
    x = linear(h, P(p + "fc2.weight"), P(p + "fc2.bias"));
  }
  return x;
}

template <typename T>
Var<T> fuse(const std::vector<Var<T>>& branch1, const std::vector<Var<T>>& branch2, const FusionConfig& cfg,
            Bound<T>& P) {
  if (branch1.empty() || branch2.empty()) throw DimensionError("fuse: empty layer stack");
  const std::size_t t1 = branch1.front().dim(1), t2 = branch2.front().dim(1);
  if (t1 != t2)
    throw DimensionError("fuse: token count mismatch between branches (" + std::to_string(t1) + " vs " +
                         std::to_string(t2) + ")");
  if (branch1.front().dim(0) != branch2.front().dim(0)) throw DimensionError("fuse: batch size mismatch");
  const MergeOptions opt{.lln_order = cfg.lln_order, .lln_shared = cfg.lln_shared};
  auto v1 = branch_merge(branch1, cfg.clip_layers, P, "clip.", "alpha", opt);
  auto v2 = branch_merge(branch2, cfg.dino_layers, P, "dino.", "beta", opt);
  auto v = concat_last(v1, mlp_align(v2, cfg.mlp_blocks, P));
  return linear(v, P("proj.weight"), P("proj.bias"));
}

/// Tensor-level convenience with frozen fusion parameters.
template <typename T>
Tensor<T> fuse_features(const LayerFeatures<T>& lf1, const LayerFeatures<T>& lf2, const FusionConfig& cfg,
                        const ParameterSet<T>& params) {
  Tape<T> tape;
  std::vector<Var<T>> a, b;
  for (const auto& l : lf1.layers) a.push_back(tape.constant(l));
  for (const auto& l : lf2.layers) b.push_back(tape.constant(l));
  Bound<T> P(tape, params);
  return fuse(a, b, cfg, P).value();
}

}  // namespace mfm
