#pragma once

// Multi-level feature merging: maps the per-layer stack z_1..z_N to one [B,T,D] tensor.
//
//   mean_half       mean of the last ceil(N/2) layers
//   mean_all        mean of all N layers
//   mean_range(a,b) mean of layers a..b (1-based, inclusive)
//   layerscale      sum_i w_i z_i,          w = softmax(logits)
//   lln_layerscale  sum_i w_i Linear(LN(z_i))
//   conv_layerscale sum_i w_i BN(Conv3x3(z_i)) on the token grid
//
// Learnable state lives in a ParameterSet under "merge." names:
//   merge.logits [K]
//   merge.lln.<layer>.{ln.gamma, ln.beta, linear.weight, linear.bias}   (<layer> = "shared" when shared)
//   merge.conv.<layer>.{kernel [D,D,3,3], bn.scale, bn.shift}
// Batch-norm running statistics are not learnable and live in ConvState.

#include <charconv>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mfm/encoder.hpp"

namespace mfm {

enum class MergeKind { MeanHalf, MeanAll, MeanRange, LayerscaleAll, LLNLayerscaleAll, ConvLayerscaleAll };

enum class LlnOrder { LnThenLinear, LinearThenLn };

struct MergeStrategy {
  MergeKind kind = MergeKind::MeanAll;
  std::size_t first = 0;  // MeanRange only, 1-based inclusive
  std::size_t last = 0;

  static MergeStrategy mean_half() { return {MergeKind::MeanHalf}; }
  static MergeStrategy mean_all() { return {MergeKind::MeanAll}; }
  static MergeStrategy mean_range(std::size_t a, std::size_t b) { return {MergeKind::MeanRange, a, b}; }
  static MergeStrategy layerscale() { return {MergeKind::LayerscaleAll}; }
  static MergeStrategy lln_layerscale() { return {MergeKind::LLNLayerscaleAll}; }
  static MergeStrategy conv_layerscale() { return {MergeKind::ConvLayerscaleAll}; }

  bool learnable() const {
    return kind == MergeKind::LayerscaleAll || kind == MergeKind::LLNLayerscaleAll ||
           kind == MergeKind::ConvLayerscaleAll;
  }

  /// Selected 1-based layer indices for a depth-N stack.
  std::vector<std::size_t> layers(std::size_t depth) const {
    std::size_t a = 1, b = depth;
    if (kind == MergeKind::MeanHalf) a = depth - (depth + 1) / 2 + 1;
    if (kind == MergeKind::MeanRange) {
      if (first < 1 || first > last || last > depth)
        throw DimensionError("mean_range(" + std::to_string(first) + "," + std::to_string(last) +
                             ") outside 1.." + std::to_string(depth));
      a = first;
      b = last;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = a; i <= b; ++i) out.push_back(i);
    return out;
  }

  std::string name() const {
    switch (kind) {
      case MergeKind::MeanHalf: return "mean_half";
      case MergeKind::MeanAll: return "mean_all";
      case MergeKind::MeanRange: return "mean_range(" + std::to_string(first) + "," + std::to_string(last) + ")";
      case MergeKind::LayerscaleAll: return "layerscale";
      case MergeKind::LLNLayerscaleAll: return "lln_layerscale";
      case MergeKind::ConvLayerscaleAll: return "conv_layerscale";
    }
    return "?";
  }

  /// Parses the config spelling; returns nullopt on anything unrecognized.
  static std::optional<MergeStrategy> parse(std::string_view s) {
    if (s == "mean_half") return mean_half();
    if (s == "mean_all") return mean_all();
    if (s == "layerscale") return layerscale();
    if (s == "lln_layerscale") return lln_layerscale();
    if (s == "conv_layerscale") return conv_layerscale();
    constexpr std::string_view head = "mean_range(";
    if (s.size() > head.size() + 2 && s.substr(0, head.size()) == head && s.back() == ')') {
      auto body = s.substr(head.size(), s.size() - head.size() - 1);
      auto comma = body.find(',');
      if (comma == std::string_view::npos) return std::nullopt;
      std::size_t a = 0, b = 0;
      auto pa = body.substr(0, comma), pb = body.substr(comma + 1);
      if (std::from_chars(pa.data(), pa.data() + pa.size(), a).ec != std::errc{} ||
          std::from_chars(pb.data(), pb.data() + pb.size(), b).ec != std::errc{})
        return std::nullopt;
      return mean_range(a, b);
    }
    return std::nullopt;
  }

  bool operator==(const MergeStrategy&) const = default;
};

struct MergeOptions {
  LlnOrder lln_order = LlnOrder::LnThenLinear;
  bool lln_shared = false;
  bool batch_norm = true;  // conv_layerscale only
  double bn_momentum = 0.1;
};

enum class Mode { Train, Eval };

/// Per-layer batch-norm running statistics for conv_layerscale.
template <typename T>
struct ConvState {
  std::map<std::size_t, std::vector<T>> running_mean;
  std::map<std::size_t, std::vector<T>> running_var;
};

/// Softmax over layer logits: weights on the probability simplex.
template <typename T>
Tensor<T> weights_from_logits(const Tensor<T>& logits) {
  if (logits.size() < 1) throw DimensionError("weights_from_logits needs at least one logit");
  return softmax(logits.reshaped({logits.size()}), 0);
}

template <typename T>
Var<T> weights_from_logits(Var<T> logits) {
  return softmax(reshape(logits, {logits.value().size()}), 0);
}

/// Mean of 1-based layers a..b inclusive.
template <typename T>
Var<T> merge_mean(const std::vector<Var<T>>& layers, std::size_t a, std::size_t b) {
  if (a < 1 || a > b || b > layers.size())
    throw DimensionError("merge_mean: range " + std::to_string(a) + ".." + std::to_string(b) + " outside 1.." +
                         std::to_string(layers.size()));
  Var<T> acc = layers[a - 1];
  for (std::size_t i = a; i < b; ++i) acc = add(acc, layers[i]);
  return a == b ? acc : scale(acc, T(1) / T(b - a + 1));
}

template <typename T>
Var<T> merge_layerscale(const std::vector<Var<T>>& layers, Var<T> logits) {
  if (logits.value().size() != layers.size())
    throw DimensionError("merge_layerscale: " + std::to_string(layers.size()) + " layers but " +
                         std::to_string(logits.value().size()) + " logits");
  return weighted_sum(layers, weights_from_logits(logits));
}

inline std::string lln_prefix(const std::string& base, std::size_t layer, bool shared) {
  return base + (shared ? std::string("shared") : std::to_string(layer)) + ".";
}

/// Linear+LayerNorm alignment of one layer under names `prefix`{ln.gamma, ln.beta, linear.weight, linear.bias}.
template <typename T>
Var<T> lln_apply(Var<T> x, Bound<T>& P, const std::string& prefix, LlnOrder order) {
  auto ln = [&](Var<T> v) { return layer_norm(v, P(prefix + "ln.gamma"), P(prefix + "ln.beta")); };
  auto lin = [&](Var<T> v) { return linear(v, P(prefix + "linear.weight"), P(prefix + "linear.bias")); };
  return order == LlnOrder::LnThenLinear ? lin(ln(x)) : ln(lin(x));
}

/// Adds one LLN parameter group: LN gain 1, bias 0; Linear identity, bias 0.
template <typename T>
void add_lln_params(ParameterSet<T>& ps, const std::string& prefix, std::size_t in_dim, std::size_t out_dim) {
  ps.add(prefix + "ln.gamma", Tensor<T>::ones({in_dim}));
  ps.add(prefix + "ln.beta", Tensor<T>::zeros({in_dim}));
  Tensor<T> w({in_dim, out_dim});
  for (std::size_t i = 0; i < std::min(in_dim, out_dim); ++i) w.at(i, i) = T(1);
  ps.add(prefix + "linear.weight", std::move(w));
  ps.add(prefix + "linear.bias", Tensor<T>::zeros({out_dim}));
}

/// z = sum_i w_i LLN_i(z_i) over the given layer stack; `layer_ids` name each entry's parameters.
template <typename T>
Var<T> merge_lln_layerscale(const std::vector<Var<T>>& layers, std::span<const std::size_t> layer_ids, Bound<T>& P,
                            const std::string& base, Var<T> logits, const MergeOptions& opt = {}) {
  if (layer_ids.size() != layers.size()) throw DimensionError("merge_lln_layerscale: layer id count mismatch");
  std::vector<Var<T>> aligned;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto prefix = lln_prefix(base, layer_ids[k], opt.lln_shared);
    if (!P.contains(prefix + "linear.weight"))
      throw DimensionError("merge_lln_layerscale: no parameters for layer " + std::to_string(layer_ids[k]));
    aligned.push_back(lln_apply(layers[k], P, prefix, opt.lln_order));
  }
  return merge_layerscale(aligned, logits);
}

/// Grid shape of the patch tokens.
struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// z = sum_i w_i BN_i(Conv_i(z_i)); batch statistics in Train mode (updating
/// `state` with momentum when given), running statistics in Eval mode.
template <typename T>
Var<T> merge_conv_layerscale(const std::vector<Var<T>>& layers, std::span<const std::size_t> layer_ids, Bound<T>& P,
                             Var<T> logits, TokenGrid grid, Mode mode, ConvState<T>* state,
                             const MergeOptions& opt = {}) {
  if (layer_ids.size() != layers.size()) throw DimensionError("merge_conv_layerscale: layer id count mismatch");
  std::vector<Var<T>> aligned;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const std::size_t id = layer_ids[k];
    if (grid.rows * grid.cols != layers[k].dim(1))
      throw DimensionError("merge_conv_layerscale: grid " + std::to_string(grid.rows) + "x" +
                           std::to_string(grid.cols) + " does not cover " + std::to_string(layers[k].dim(1)) +
                           " tokens");
    const std::string prefix = "merge.conv." + std::to_string(id) + ".";
    auto y = conv3x3_grid(layers[k], P(prefix + "kernel"), grid.rows, grid.cols);
    if (opt.batch_norm) {
      auto sc = P(prefix + "bn.scale"), sh = P(prefix + "bn.shift");
      const std::size_t c = y.shape().back();
      if (mode == Mode::Train) {
        if (state) {
          auto [mean, var] = channel_stats(y.value());
          auto& rm = state->running_mean.try_emplace(id, c, T(0)).first->second;
          auto& rv = state->running_var.try_emplace(id, c, T(1)).first->second;
          const T mom = T(opt.bn_momentum);
          for (std::size_t j = 0; j < c; ++j) {
            rm[j] = (T(1) - mom) * rm[j] + mom * mean[j];
            rv[j] = (T(1) - mom) * rv[j] + mom * var[j];
          }
        }
        y = batch_norm_train(y, sc, sh);
      } else {
        std::vector<T> mean(c, T(0)), var(c, T(1));
        if (state && state->running_mean.count(id)) {
          mean = state->running_mean.at(id);
          var = state->running_var.at(id);
        }
        y = batch_norm_eval<T>(y, sc, sh, mean, var);
      }
    }
    aligned.push_back(y);
  }
  return merge_layerscale(aligned, logits);
}

/// Learnable parameters for a strategy over a depth-N, width-D stack.
template <typename T>
ParameterSet<T> init_merge_params(const MergeStrategy& s, std::size_t depth, std::size_t dim,
                                  const MergeOptions& opt = {}) {
  ParameterSet<T> ps;
  if (!s.learnable()) return ps;
  const auto ids = s.layers(depth);
  ps.add("merge.logits", Tensor<T>::zeros({ids.size()}));
  if (s.kind == MergeKind::LLNLayerscaleAll) {
    if (opt.lln_shared)
      add_lln_params(ps, lln_prefix("merge.lln.", 0, true), dim, dim);
    else
      for (auto i : ids) add_lln_params(ps, lln_prefix("merge.lln.", i, false), dim, dim);
  }
  if (s.kind == MergeKind::ConvLayerscaleAll) {
    for (auto i : ids) {
      const std::string prefix = "merge.conv." + std::to_string(i) + ".";
      Tensor<T> k({dim, dim, 3, 3});
      for (std::size_t c = 0; c < dim; ++c) k.at(c, c, 1, 1) = T(1);
      ps.add(prefix + "kernel", std::move(k));
      ps.add(prefix + "bn.scale", Tensor<T>::ones({dim}));
      ps.add(prefix + "bn.shift", Tensor<T>::zeros({dim}));
    }
  }
  return ps;
}

struct MergeContext {
  TokenGrid grid;
  Mode mode = Mode::Eval;
  MergeOptions options;
};

/// Dispatches a strategy over the full layer stack.
template <typename T>
Var<T> merge(const MergeStrategy& s, const std::vector<Var<T>>& layers, Bound<T>& P, const MergeContext& ctx,
             ConvState<T>* state = nullptr) {
  const std::size_t N = layers.size();
  const auto ids = s.layers(N);
  std::vector<Var<T>> selected;
  for (auto i : ids) selected.push_back(layers[i - 1]);
  switch (s.kind) {
    case MergeKind::MeanHalf:
    case MergeKind::MeanAll:
    case MergeKind::MeanRange: return merge_mean(layers, ids.front(), ids.back());
    case MergeKind::LayerscaleAll: return merge_layerscale(selected, P("merge.logits"));
    case MergeKind::LLNLayerscaleAll:
      return merge_lln_layerscale(selected, ids, P, "merge.lln.", P("merge.logits"), ctx.options);
    case MergeKind::ConvLayerscaleAll:
      return merge_conv_layerscale(selected, ids, P, P("merge.logits"), ctx.grid, ctx.mode, state, ctx.options);
  }
  throw std::logic_error("unknown merge kind");
}

/// Tensor-level convenience: merges a LayerFeatures stack with frozen parameters.
template <typename T>
Tensor<T> merge_features(const MergeStrategy& s, const LayerFeatures<T>& lf, const ParameterSet<T>& params,
                         const MergeContext& ctx, ConvState<T>* state = nullptr) {
  Tape<T> tape;
  std::vector<Var<T>> layers;
  for (const auto& l : lf.layers) layers.push_back(tape.constant(l));
  Bound<T> P(tape, params);
  return merge(s, layers, P, ctx, state).value();
}

}  // namespace mfm
