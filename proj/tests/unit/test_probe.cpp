#include <gtest/gtest.h>

#include "mfm/probe.hpp"

using namespace mfm;

namespace {

struct Small {
  DatasetSpec spec;
  EncoderConfig enc;
  Dataset<float> ds;
  Split split;
  ParameterSet<float> params;
  std::shared_ptr<const LayerFeatures<float>> lf;

  Small() {
    spec.image_h = spec.image_w = 18;
    enc.depth = 3;
    enc.dim = 8;
    enc.heads = 2;
    enc.image_h = enc.image_w = 18;
    enc.seed = 3;
    ds = gen_dataset<float>(1, 200, spec);
    split = split_dataset(ds);
    params = init_encoder<float>(enc);
    lf = std::make_shared<const LayerFeatures<float>>(encode_dataset(ds.images, enc, params));
  }
  TokenGrid grid() const { return {spec.grid_rows(), spec.grid_cols()}; }
};

ProbeBudget budget(std::size_t steps) {
  ProbeBudget b;
  b.steps = steps;
  return b;
}

}  // namespace

TEST(Probe, ZeroStepsIsChance) {
  Small s;
  auto provider = layer_provider(s.lf, 2);
  auto run = train_probe(provider, ProbeTask::Global, s.ds, s.split, budget(0), 1, "random");
  // equal logits everywhere: argmax is class 0
  double zeros = 0;
  for (auto r : s.split.eval) zeros += s.ds.global_labels[r] == 0 ? 1 : 0;
  EXPECT_DOUBLE_EQ(run.row.value, zeros / double(s.split.eval.size()));
  EXPECT_NEAR(run.row.value, 1.0 / 3, 0.12);
  EXPECT_NEAR(run.eval.loss, std::log(3.0), 1e-5);
  EXPECT_TRUE(run.losses.empty());
}

TEST(Probe, ZeroStepsCoordIsTheTrainMeanBaseline) {
  Small s;
  auto provider = layer_provider(s.lf, 2);
  auto run = train_probe(provider, ProbeTask::LocalCoord, s.ds, s.split, budget(0), 1, "random");
  const double rm = double(s.spec.grid_rows() - 1), cm = double(s.spec.grid_cols() - 1);
  double mr = 0, mc = 0;
  for (auto r : s.split.train) {
    mr += s.ds.local_labels[r].cell.row / rm;
    mc += s.ds.local_labels[r].cell.col / cm;
  }
  mr /= double(s.split.train.size());
  mc /= double(s.split.train.size());
  double sq = 0;
  for (auto r : s.split.eval) {
    sq += std::pow(s.ds.local_labels[r].cell.row / rm - mr, 2);
    sq += std::pow(s.ds.local_labels[r].cell.col / cm - mc, 2);
  }
  EXPECT_NEAR(run.row.value, sq / double(2 * s.split.eval.size()), 1e-6);
}

TEST(Probe, IdenticalSeedAndConfigGiveIdenticalRows) {
  Small s;
  for (auto task : {ProbeTask::Global, ProbeTask::LocalCell, ProbeTask::LocalCoord}) {
    auto p1 = layer_provider(s.lf, 3), p2 = layer_provider(s.lf, 3);
    auto a = train_probe(p1, task, s.ds, s.split, budget(20), 5, "random");
    auto b = train_probe(p2, task, s.ds, s.split, budget(20), 5, "random");
    EXPECT_EQ(a.row, b.row);
    EXPECT_EQ(a.losses, b.losses);
  }
}

TEST(Probe, TaskMetricsAndRanges) {
  Small s;
  for (auto task : {ProbeTask::Global, ProbeTask::LocalCell, ProbeTask::LocalCoord}) {
    auto p = layer_provider(s.lf, 1);
    auto run = train_probe(p, task, s.ds, s.split, budget(30), 2, "random");
    EXPECT_EQ(run.row.metric, metric_name(task));
    EXPECT_GE(run.row.value, 0.0);
    if (higher_is_better(task)) {
      EXPECT_LE(run.row.value, 1.0);
    }
    EXPECT_EQ(run.losses.size(), 30u);
    for (auto l : run.losses) EXPECT_TRUE(std::isfinite(l));
  }
}

TEST(Probe, HeadIsOneLinearLayer) {
  Small s;
  auto p = layer_provider(s.lf, 1);
  auto run = train_probe(p, ProbeTask::Global, s.ds, s.split, budget(5), 2, "random");
  EXPECT_EQ(run.head.get("probe.weight").value.shape(), (Shape{8, 3}));
  EXPECT_EQ(run.head.get("probe.bias").value.shape(), (Shape{3}));
  // the remaining entries are the fixed standardization affine
  EXPECT_EQ(run.head.size(), 4u);
  EXPECT_TRUE(run.head.contains("probe.norm.shift"));
  ProbeBudget raw = budget(5);
  raw.standardize = false;
  EXPECT_EQ(train_probe(p, ProbeTask::Global, s.ds, s.split, raw, 2, "random").head.size(), 2u);
}

TEST(Probe, LearnsAnEasyLocalTask) {
  // the marker is written into raw pixels, so even the first random layer shows it per token
  Small s;
  auto p = layer_provider(s.lf, 1);
  auto run = train_probe(p, ProbeTask::LocalCell, s.ds, s.split, budget(300), 3, "random");
  EXPECT_GT(run.row.value, 1.0 / 9 + 0.2);
}

TEST(Probe, FrozenEncoderAndFrozenMergeUntouched) {
  Small s;
  const auto enc_sum = s.params.checksum();
  auto lf_copy = *s.lf;
  auto frozen = merge_provider(s.lf, MergeStrategy::lln_layerscale(), s.grid(), {}, false);
  const auto merge_sum = frozen.params.checksum();
  train_probe(frozen, ProbeTask::LocalCell, s.ds, s.split, budget(10), 1, "random");
  EXPECT_EQ(frozen.params.checksum(), merge_sum);
  EXPECT_EQ(s.params.checksum(), enc_sum);
  for (std::size_t i = 0; i < lf_copy.depth(); ++i) EXPECT_EQ(lf_copy.layers[i], s.lf->layers[i]);
  auto trained = merge_provider(s.lf, MergeStrategy::lln_layerscale(), s.grid());
  train_probe(trained, ProbeTask::LocalCell, s.ds, s.split, budget(10), 1, "random");
  EXPECT_NE(trained.params.checksum(), merge_sum);
}

TEST(Probe, MeanAllEqualsFrozenUniformLayerscale) {
  Small s;
  for (auto task : {ProbeTask::Global, ProbeTask::LocalCell}) {
    auto mean = merge_provider(s.lf, MergeStrategy::mean_all(), s.grid());
    auto ls = merge_provider(s.lf, MergeStrategy::layerscale(), s.grid(), {}, false);
    auto a = train_probe(mean, task, s.ds, s.split, budget(40), 4, "random");
    auto b = train_probe(ls, task, s.ds, s.split, budget(40), 4, "random");
    EXPECT_NEAR(a.row.value, b.row.value, 1e-6);
    for (std::size_t i = 0; i < a.losses.size(); ++i) EXPECT_NEAR(a.losses[i], b.losses[i], 1e-4);
  }
}

TEST(Probe, SimplexAfterEveryStep) {
  Small s;
  for (auto st : {MergeStrategy::layerscale(), MergeStrategy::lln_layerscale(), MergeStrategy::conv_layerscale()}) {
    auto p = merge_provider(s.lf, st, s.grid());
    std::size_t calls = 0;
    std::function<void(const ParameterSet<float>&)> check = [&](const ParameterSet<float>& ps) {
      ++calls;
      auto w = weights_from_logits(ps.get("merge.logits").value.cast<double>());
      double sum = 0;
      for (auto v : w.data()) {
        EXPECT_GE(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    };
    ProbeBudget b = budget(25);
    b.lr = 0.05;
    train_probe(p, ProbeTask::LocalCell, s.ds, s.split, b, 1, "random", check);
    EXPECT_EQ(calls, 25u);
  }
}

TEST(LayerSweep, RowCountAndBestLayer) {
  Small s;
  const std::vector<ProbeTask> tasks{ProbeTask::Global, ProbeTask::LocalCell};
  auto res = layer_sweep(s.lf, std::span<const ProbeTask>(tasks), s.ds, s.split, budget(10), 1, "random");
  ASSERT_EQ(res.report.rows.size(), 3 * tasks.size());
  for (auto task : tasks) {
    const auto best = res.best_layer.at(to_string(task));
    double top = -1;
    std::size_t arg = 0;
    for (const auto& r : res.report.rows)
      if (r.task == to_string(task) && r.value > top) {
        top = r.value;
        arg = std::size_t(std::stoi(r.provider.substr(6)));
      }
    EXPECT_EQ(best, arg);
  }
}

TEST(LayerSweep, ParallelMatchesSerial) {
  Small s;
  const std::vector<ProbeTask> tasks{ProbeTask::LocalCell};
  setenv("MFM_THREADS", "1", 1);
  auto a = layer_sweep(s.lf, std::span<const ProbeTask>(tasks), s.ds, s.split, budget(10), 1, "random");
  setenv("MFM_THREADS", "3", 1);
  auto b = layer_sweep(s.lf, std::span<const ProbeTask>(tasks), s.ds, s.split, budget(10), 1, "random");
  unsetenv("MFM_THREADS");
  EXPECT_EQ(a.report.rows, b.report.rows);
}

TEST(StrategySweep, MlpGridRows) {
  Small s;
  const auto grid = mlp_ablation_grid();
  ASSERT_EQ(grid.size(), 7u);  // m in {0,1,2,4,8} at r=4, r in {8,16} at m=1
  std::vector<ProviderFactory<float>> factories;
  for (auto [m, r] : grid)
    factories.push_back([&s, m, r] {
      auto cfg = FusionConfig::defaults(3, 3, 8, 8, 8);
      cfg.mlp_blocks = m;
      cfg.mlp_ratio = r;
      return fusion_provider(s.lf, s.lf, cfg, 1);
    });
  const std::vector<ProbeTask> tasks{ProbeTask::Global};
  auto rep = strategy_sweep(factories, std::span<const ProbeTask>(tasks), s.ds, s.split, budget(3), 1, "random");
  ASSERT_EQ(rep.rows.size(), 7u);
  EXPECT_EQ(rep.rows[0].provider, "fusion(m=0,r=4)");
  EXPECT_EQ(rep.rows[4].provider, "fusion(m=8,r=4)");
  EXPECT_EQ(rep.rows[6].provider, "fusion(m=1,r=16)");
  auto again = strategy_sweep(factories, std::span<const ProbeTask>(tasks), s.ds, s.split, budget(3), 1, "random");
  EXPECT_EQ(rep.rows, again.rows);
}

TEST(ProbeReport, CsvFormat) {
  ProbeReport rep;
  rep.rows.push_back({"global_supervised", "layer(3)", "global", "accuracy", 0.123456789, 7});
  rep.rows.push_back({"random", "mean_range(1,2)", "local_coord", "mse", 1e-7, 8});
  EXPECT_EQ(rep.to_csv(),
            "objective,provider,task,metric,value,seed\n"
            "global_supervised,layer(3),global,accuracy,0.123457,7\n"
            "random,\"mean_range(1,2)\",local_coord,mse,1e-07,8\n");
}

TEST(ProbeReport, BestRowTiesGoToEarliest) {
  std::vector<ProbeRow> rows{{"o", "a", "global", "accuracy", 0.5, 1},
                             {"o", "b", "global", "accuracy", 0.7, 1},
                             {"o", "c", "global", "accuracy", 0.7, 1},
                             {"o", "d", "local_coord", "mse", 0.2, 1},
                             {"o", "e", "local_coord", "mse", 0.1, 1}};
  EXPECT_EQ(*best_row(rows, ProbeTask::Global), 1u);
  EXPECT_EQ(*best_row(rows, ProbeTask::LocalCoord), 4u);
  EXPECT_FALSE(best_row(rows, ProbeTask::LocalCell).has_value());
}

TEST(Correspondence, SelfMapDiagonalIsOne) {
  Rng rng(1);
  auto a = normal_tensor<double>({36, 8}, rng, 1.0);
  auto m = correspondence_map(a, a);
  for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(m.sim.at(i, i), 1.0, 1e-6);
  EXPECT_TRUE(m.zero_rows.empty());
}

TEST(Correspondence, OrthogonalOneHotTokens) {
  Tensor<double> a({4, 4});
  for (std::size_t i = 0; i < 4; ++i) a.at(i, i) = 2.0 + double(i);
  auto m = correspondence_map(a, a);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.sim.at(i, j), i == j ? 1.0 : 0.0);
}

TEST(Correspondence, SwapIsTranspose) {
  Rng rng(2);
  auto a = normal_tensor<float>({9, 5}, rng, 1.0), b = normal_tensor<float>({9, 5}, rng, 1.0);
  auto ab = correspondence_map(a, b), ba = correspondence_map(b, a);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(ab.sim.at(i, j), ba.sim.at(j, i), 1e-6);
}

TEST(Correspondence, ZeroNormTokensAreFlagged) {
  Rng rng(3);
  auto a = normal_tensor<double>({4, 3}, rng, 1.0);
  for (std::size_t k = 0; k < 3; ++k) a.at(2, k) = 0;
  auto m = correspondence_map(a, a);
  EXPECT_EQ(m.zero_rows, (std::vector<std::size_t>{2}));
  EXPECT_EQ(m.zero_cols, (std::vector<std::size_t>{2}));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.sim.at(2, j), 0.0);
  EXPECT_THROW(correspondence_map(a, Tensor<double>({4, 2})), DimensionError);
}

TEST(Correspondence, PgmBytes) {
  Tensor<double> sim({2, 3}, {-1.0, 0.0, 1.0, 0.5, -0.5, 2.0});
  const auto pgm = to_pgm(sim);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  const std::vector<unsigned char> px(pgm.begin() + std::ptrdiff_t(header.size()), pgm.end());
  // round((v+1)/2*255): -1 -> 0, 0 -> 128 (127.5 rounds up), 1 -> 255, .5 -> 191, -.5 -> 64, clamp 2 -> 255
  EXPECT_EQ(px, (std::vector<unsigned char>{0, 128, 255, 191, 64, 255}));
  EXPECT_EQ(to_pgm(sim), pgm);
}
