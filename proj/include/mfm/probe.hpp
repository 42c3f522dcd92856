#pragma once

// Probing frozen features with a single linear head.
//
// Tasks:
//   global       classify the global label from token-mean features           metric: accuracy
//   local_cell   one score per token, softmax over tokens, argmax = predicted  metric: accuracy
//                marker cell
//   local_coord  regress the marker's (row, col), normalized to [0,1], from    metric: mse
//                token-mean features
//
// Head inputs are standardized per feature with statistics of the provider's
// initial output on the training split; the map stays affine, so the head is
// still exactly one linear layer. Heads start at zero, so an untrained head
// scores at chance.

#include <cstdio>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mfm/data.hpp"
#include "mfm/fusion.hpp"
#include "mfm/optim.hpp"
#include "mfm/parallel.hpp"

namespace mfm {

enum class ProbeTask { Global, LocalCell, LocalCoord };

inline std::string to_string(ProbeTask t) {
  switch (t) {
    case ProbeTask::Global: return "global";
    case ProbeTask::LocalCell: return "local_cell";
    case ProbeTask::LocalCoord: return "local_coord";
  }
  return "?";
}

inline std::optional<ProbeTask> parse_task(std::string_view s) {
  for (auto t : {ProbeTask::Global, ProbeTask::LocalCell, ProbeTask::LocalCoord})
    if (to_string(t) == s) return t;
  return std::nullopt;
}

inline std::string metric_name(ProbeTask t) { return t == ProbeTask::LocalCoord ? "mse" : "accuracy"; }
inline bool higher_is_better(ProbeTask t) { return t != ProbeTask::LocalCoord; }

/// Produces [B,T,F] features for dataset rows, possibly with trainable alignment parameters.
template <typename T>
struct FeatureProvider {
  using Forward = std::function<Var<T>(Tape<T>&, Bound<T>&, std::span<const std::size_t>, Mode)>;

  std::string name;
  std::size_t dim = 0;
  ParameterSet<T> params;  // alignment parameters (may be empty)
  bool train_params = false;
  Forward forward;
  std::shared_ptr<ConvState<T>> conv_state;  // non-null for conv_layerscale
};

template <typename T>
std::vector<Var<T>> layer_constants(Tape<T>& tape, const LayerFeatures<T>& lf, std::span<const std::size_t> rows) {
  auto sl = lf.slice(rows);
  std::vector<Var<T>> out;
  for (auto& l : sl.layers) out.push_back(tape.constant(std::move(l)));
  return out;
}

/// Features of one 1-based layer.
template <typename T>
FeatureProvider<T> layer_provider(std::shared_ptr<const LayerFeatures<T>> lf, std::size_t layer) {
  if (layer < 1 || layer > lf->depth())
    throw DimensionError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(lf->depth()));
  FeatureProvider<T> p;
  p.name = "layer(" + std::to_string(layer) + ")";
  p.dim = lf->dim();
  p.forward = [lf, layer](Tape<T>& tape, Bound<T>&, std::span<const std::size_t> rows, Mode) {
    const auto& l = lf->layers[layer - 1];
    const std::size_t per = l.size() / l.dim(0);
    Tensor<T> t({rows.size(), l.dim(1), l.dim(2)});
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(l.raw() + rows[i] * per, per, t.raw() + i * per);
    return tape.constant(std::move(t));
  };
  return p;
}

/// Output of a merge strategy; learnable strategies train their parameters
/// with the head unless `train_params` is false.
template <typename T>
FeatureProvider<T> merge_provider(std::shared_ptr<const LayerFeatures<T>> lf, const MergeStrategy& s, TokenGrid grid,
                                  const MergeOptions& opt = {}, bool train_params = true) {
  FeatureProvider<T> p;
  p.name = s.name();
  p.dim = lf->dim();
  p.params = init_merge_params<T>(s, lf->depth(), lf->dim(), opt);
  p.train_params = train_params && s.learnable();
  if (s.kind == MergeKind::ConvLayerscaleAll) p.conv_state = std::make_shared<ConvState<T>>();
  auto state = p.conv_state;
  p.forward = [lf, s, grid, opt, state](Tape<T>& tape, Bound<T>& P, std::span<const std::size_t> rows, Mode mode) {
    auto layers = layer_constants(tape, *lf, rows);
    return merge(s, layers, P, MergeContext{grid, mode, opt}, state.get());
  };
  return p;
}

/// Output of the two-branch fusion module, trained with the head.
template <typename T>
FeatureProvider<T> fusion_provider(std::shared_ptr<const LayerFeatures<T>> lf1,
                                   std::shared_ptr<const LayerFeatures<T>> lf2, const FusionConfig& cfg,
                                   std::uint64_t seed, bool train_params = true) {
  FeatureProvider<T> p;
  p.name = "fusion(m=" + std::to_string(cfg.mlp_blocks) + ",r=" + std::to_string(cfg.mlp_ratio) + ")";
  p.dim = cfg.out_dim;
  p.params = init_fusion<T>(cfg, seed);
  p.train_params = train_params;
  p.forward = [lf1, lf2, cfg](Tape<T>& tape, Bound<T>& P, std::span<const std::size_t> rows, Mode) {
    return fuse(layer_constants(tape, *lf1, rows), layer_constants(tape, *lf2, rows), cfg, P);
  };
  return p;
}

struct ProbeBudget {
  std::size_t steps = 500;
  double lr = 1e-3;
  std::size_t batch = 32;
  bool standardize = true;
};

/// One row of a probe report.
struct ProbeRow {
  std::string objective;
  std::string provider;
  std::string task;
  std::string metric;
  double value = 0;
  std::uint64_t seed = 0;

  bool operator==(const ProbeRow&) const = default;
};

/// Task targets for a set of dataset rows.
template <typename T>
struct ProbeTargets {
  std::vector<int> labels;  // global class or cell index
  Tensor<T> coords;         // [B,2] for local_coord
};

template <typename T>
ProbeTargets<T> probe_targets(ProbeTask task, const Dataset<T>& ds, std::span<const std::size_t> rows) {
  ProbeTargets<T> t;
  if (task == ProbeTask::LocalCoord) {
    t.coords = Tensor<T>({rows.size(), 2});
    const double rm = std::max<double>(1, double(ds.spec.grid_rows() - 1)), cm = std::max<double>(1, double(ds.spec.grid_cols() - 1));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      t.coords.at(i, 0) = static_cast<T>(double(ds.local_labels[rows[i]].cell.row) / rm);
      t.coords.at(i, 1) = static_cast<T>(double(ds.local_labels[rows[i]].cell.col) / cm);
    }
  } else {
    for (auto r : rows) t.labels.push_back(task == ProbeTask::Global ? ds.global_labels[r] : ds.cell_label(r));
  }
  return t;
}

inline std::size_t head_outputs(ProbeTask task, std::size_t classes) {
  switch (task) {
    case ProbeTask::Global: return classes;
    case ProbeTask::LocalCell: return 1;
    case ProbeTask::LocalCoord: return 2;
  }
  return 1;
}

/// Head input: token-mean features for global/coord tasks, per-token for cell.
template <typename T>
Var<T> head_input(ProbeTask task, Var<T> feats) {
  return task == ProbeTask::LocalCell ? feats : mean_axis(feats, 1);
}

template <typename T>
Var<T> head_output(ProbeTask task, Var<T> x, Bound<T>& H) {
  if (H.contains("probe.norm.shift")) x = mul_trailing(add_trailing(x, H("probe.norm.shift")), H("probe.norm.scale"));
  auto y = linear(x, H("probe.weight"), H("probe.bias"));
  if (task == ProbeTask::LocalCell) y = reshape(y, {y.dim(0), y.dim(1)});
  return y;
}

template <typename T>
Var<T> probe_loss(ProbeTask task, Var<T> out, const ProbeTargets<T>& tg) {
  return task == ProbeTask::LocalCoord ? mse(out, tg.coords) : cross_entropy(out, tg.labels);
}

struct ProbeEval {
  double metric = 0;
  double loss = 0;
};

template <typename T>
ProbeEval evaluate_probe(ProbeTask task, FeatureProvider<T>& provider, const ParameterSet<T>& head,
                         const Dataset<T>& ds, std::span<const std::size_t> rows, std::size_t chunk = 100) {
  double correct = 0, sq = 0, loss = 0;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    auto part = rows.subspan(start, std::min(chunk, rows.size() - start));
    Tape<T> tape;
    Bound<T> P(tape, std::as_const(provider.params));
    Bound<T> H(tape, head);
    auto out = head_output(task, head_input(task, provider.forward(tape, P, part, Mode::Eval)), H);
    auto tg = probe_targets(task, ds, part);
    loss += static_cast<double>(probe_loss(task, out, tg).value().item()) * double(part.size());
    const auto& o = out.value();
    if (task == ProbeTask::LocalCoord) {
      for (std::size_t i = 0; i < o.size(); ++i) {
        const double d = double(o[i]) - double(tg.coords[i]);
        sq += d * d;
      }
    } else {
      const std::size_t cls = o.dim(1);
      for (std::size_t i = 0; i < part.size(); ++i) {
        const T* r = o.raw() + i * cls;
        const auto pred = static_cast<int>(std::max_element(r, r + cls) - r);
        correct += pred == tg.labels[i] ? 1 : 0;
      }
    }
  }
  ProbeEval e;
  e.loss = loss / double(rows.size());
  e.metric = task == ProbeTask::LocalCoord ? sq / double(rows.size() * 2) : correct / double(rows.size());
  return e;
}

/// Per-feature standardization constants from the provider's output on `rows`.
template <typename T>
void add_standardization(ProbeTask task, FeatureProvider<T>& provider, ParameterSet<T>& head,
                         std::span<const std::size_t> rows, std::size_t chunk = 100) {
  const std::size_t F = provider.dim;
  std::vector<double> s1(F, 0), s2(F, 0);
  double n = 0;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    auto part = rows.subspan(start, std::min(chunk, rows.size() - start));
    Tape<T> tape;
    Bound<T> P(tape, std::as_const(provider.params));
    const auto& x = head_input(task, provider.forward(tape, P, part, Mode::Eval)).value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      s1[i % F] += double(x[i]);
      s2[i % F] += double(x[i]) * double(x[i]);
    }
    n += double(x.size() / F);
  }
  Tensor<T> shift({F}), sc({F});
  for (std::size_t j = 0; j < F; ++j) {
    const double mean = s1[j] / n, var = std::max(0.0, s2[j] / n - mean * mean);
    shift[j] = static_cast<T>(-mean);
    sc[j] = static_cast<T>(1.0 / std::sqrt(var + 1e-8));
  }
  head.add("probe.norm.shift", std::move(shift));
  head.add("probe.norm.scale", std::move(sc));
}

template <typename T>
struct ProbeRun {
  ProbeRow row;
  ProbeEval eval;
  std::vector<double> losses;
  ParameterSet<T> head;
};

/// Trains a zero-initialized linear head (and the provider's alignment
/// parameters when trainable) with Adam and cosine-annealed LR, then scores
/// the eval split.
template <typename T>
ProbeRun<T> train_probe(FeatureProvider<T>& provider, ProbeTask task, const Dataset<T>& ds, const Split& split,
                        const ProbeBudget& budget, std::uint64_t seed, const std::string& objective,
                        const std::function<void(const ParameterSet<T>&)>& after_step = {}) {
  if (ds.size() == 0 || split.train.empty() || split.eval.empty()) throw DimensionError("train_probe: empty dataset");
  ProbeRun<T> run;
  const std::size_t out = head_outputs(task, ds.spec.global_classes);
  run.head.add("probe.weight", Tensor<T>::zeros({provider.dim, out}));
  run.head.add("probe.bias", Tensor<T>::zeros({out}));
  // regression starts from the train-split mean; a zero bias takes most of the budget to reach it
  if (task == ProbeTask::LocalCoord) {
    auto tg = probe_targets(task, ds, split.train);
    auto& b = run.head.get("probe.bias").value;
    for (std::size_t j = 0; j < 2; ++j) {
      double m = 0;
      for (std::size_t i = 0; i < split.train.size(); ++i) m += double(tg.coords.at(i, j));
      b[j] = static_cast<T>(m / double(split.train.size()));
    }
  }
  if (budget.standardize) add_standardization(task, provider, run.head, split.train);

  std::vector<Parameter<T>*> trainable{&run.head.get("probe.weight"), &run.head.get("probe.bias")};
  if (provider.train_params)
    for (auto* p : select_params(provider.params)) trainable.push_back(p);
  Adam<T> adam(trainable, AdamOptions{.lr = budget.lr});
  // batches depend only on seed and task, so every provider sees the same sequence
  Rng rng(split_seed(seed, "probe/" + to_string(task)));
  std::uniform_int_distribution<std::size_t> pick(0, split.train.size() - 1);
  std::vector<std::size_t> rows(budget.batch);
  for (std::size_t step = 0; step < budget.steps; ++step) {
    for (auto& r : rows) r = split.train[pick(rng)];
    adam.zero_grad();
    Tape<T> tape;
    Bound<T> P(tape, provider.params, provider.train_params);
    Bound<T> H(tape, run.head, true);
    auto pred = head_output(task, head_input(task, provider.forward(tape, P, rows, Mode::Train)), H);
    auto loss = probe_loss(task, pred, probe_targets(task, ds, rows));
    const double lv = static_cast<double>(loss.value().item());
    if (!std::isfinite(lv))
      throw NumericError("non-finite probe loss at step " + std::to_string(step) + " for " + provider.name + "/" +
                         to_string(task));
    run.losses.push_back(lv);
    tape.backward(loss);
    adam.step(cosine_lr(budget.lr, step, budget.steps));
    if (after_step) after_step(provider.params);
  }
  run.eval = evaluate_probe(task, provider, run.head, ds, split.eval);
  run.row = ProbeRow{objective, provider.name, to_string(task), metric_name(task), run.eval.metric, seed};
  return run;
}

struct ProbeReport {
  std::vector<ProbeRow> rows;

  static constexpr const char* kHeader = "objective,provider,task,metric,value,seed";

  /// Six significant digits; everything downstream reads these strings back.
  static std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
  }

  std::string to_csv() const {
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : rows) {
      // provider names may contain commas, e.g. mean_range(1,2)
      const bool quote = r.provider.find(',') != std::string::npos;
      out += r.objective + "," + (quote ? "\"" + r.provider + "\"" : r.provider) + "," + r.task + "," + r.metric +
             "," + format_value(r.value) + "," + std::to_string(r.seed) + "\n";
    }
    return out;
  }

  void append(const ProbeReport& o) { rows.insert(rows.end(), o.rows.begin(), o.rows.end()); }
};

/// Index of the best row for a task among `rows` (ties go to the earliest).
inline std::optional<std::size_t> best_row(const std::vector<ProbeRow>& rows, ProbeTask task) {
  std::optional<std::size_t> best;
  const auto name = to_string(task);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].task != name) continue;
    if (!best) {
      best = i;
      continue;
    }
    const double a = rows[i].value, b = rows[*best].value;
    if (higher_is_better(task) ? a > b : a < b) best = i;
  }
  return best;
}

struct LayerSweepResult {
  ProbeReport report;
  std::map<std::string, std::size_t> best_layer;  // task -> 1-based layer
};

/// One probe per (layer, task) on a frozen layer stack.
template <typename T>
LayerSweepResult layer_sweep(std::shared_ptr<const LayerFeatures<T>> lf, std::span<const ProbeTask> tasks,
                             const Dataset<T>& ds, const Split& split, const ProbeBudget& budget, std::uint64_t seed,
                             const std::string& objective) {
  const std::size_t N = lf->depth();
  std::vector<ProbeRow> rows(N * tasks.size());
  parallel_for(rows.size(), [&](std::size_t cell) {
    const std::size_t k = cell / N, layer = cell % N + 1;
    auto provider = layer_provider(lf, layer);
    rows[cell] = train_probe(provider, tasks[k], ds, split, budget, seed, objective).row;
  });
  LayerSweepResult res;
  res.report.rows = rows;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    std::vector<ProbeRow> sub(rows.begin() + std::ptrdiff_t(k * N), rows.begin() + std::ptrdiff_t((k + 1) * N));
    res.best_layer[to_string(tasks[k])] = *best_row(sub, tasks[k]) + 1;
  }
  return res;
}

/// Builds providers lazily per sweep cell so each run owns its parameters.
template <typename T>
using ProviderFactory = std::function<FeatureProvider<T>()>;

template <typename T>
ProbeReport strategy_sweep(const std::vector<ProviderFactory<T>>& providers, std::span<const ProbeTask> tasks,
                           const Dataset<T>& ds, const Split& split, const ProbeBudget& budget, std::uint64_t seed,
                           const std::string& objective) {
  std::vector<ProbeRow> rows(providers.size() * tasks.size());
  parallel_for(rows.size(), [&](std::size_t cell) {
    const std::size_t pi = cell / tasks.size(), k = cell % tasks.size();
    auto provider = providers[pi]();
    rows[cell] = train_probe(provider, tasks[k], ds, split, budget, seed, objective).row;
  });
  return ProbeReport{rows};
}

/// The MLP ablation grid: m in {0,1,2,4,8} at r = 4, then r in {8,16} at m = 1.
inline std::vector<std::pair<std::size_t, std::size_t>> mlp_ablation_grid() {
  return {{0, 4}, {1, 4}, {2, 4}, {4, 4}, {8, 4}, {1, 8}, {1, 16}};
}

struct CorrespondenceMap {
  Tensor<double> sim;                   // [T,T], entry (i,j) = cos(a_i, b_j)
  std::vector<std::size_t> zero_rows;   // tokens of a with zero norm
  std::vector<std::size_t> zero_cols;   // tokens of b with zero norm
};

/// Cosine similarity between every token of a [T,D] and every token of b [T,D].
/// Zero-norm tokens get similarity 0 and are listed in the result.
template <typename T>
CorrespondenceMap correspondence_map(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("correspondence_map expects [T,D] inputs with matching D, got " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  const std::size_t ta = a.dim(0), tb = b.dim(0), d = a.dim(1);
  auto norms = [d](const Tensor<T>& x, std::size_t n) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += double(x[i * d + k]) * double(x[i * d + k]);
      out[i] = std::sqrt(s);
    }
    return out;
  };
  const auto na = norms(a, ta), nb = norms(b, tb);
  CorrespondenceMap m{Tensor<double>({ta, tb}), {}, {}};
  for (std::size_t i = 0; i < ta; ++i)
    if (na[i] == 0) m.zero_rows.push_back(i);
  for (std::size_t j = 0; j < tb; ++j)
    if (nb[j] == 0) m.zero_cols.push_back(j);
  for (std::size_t i = 0; i < ta; ++i)
    for (std::size_t j = 0; j < tb; ++j) {
      if (na[i] == 0 || nb[j] == 0) continue;
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += double(a[i * d + k]) * double(b[j * d + k]);
      m.sim.at(i, j) = std::clamp(dot / (na[i] * nb[j]), -1.0, 1.0);
    }
  return m;
}

/// Binary 8-bit PGM, values mapped [-1,1] -> [0,255].
inline std::string to_pgm(const Tensor<double>& sim) {
  const std::size_t h = sim.dim(0), w = sim.dim(1);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (auto v : sim.data()) {
    const double u = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(u))));
  }
  return out;
}

inline std::string to_csv(const Tensor<double>& sim) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < sim.dim(0); ++i) {
    for (std::size_t j = 0; j < sim.dim(1); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", sim.at(i, j));
      out += (j ? "," : "") + std::string(buf);
    }
    out += "\n";
  }
  return out;
}

}  // namespace mfm
