#include <gtest/gtest.h>

#include "mfm/fusion.hpp"
#include "mfm/optim.hpp"

using namespace mfm;

namespace {

constexpr std::size_t kB = 2, kT = 6, kD1 = 5, kD2 = 4;

std::vector<Tensor<double>> random_layers(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor<double>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(normal_tensor<double>({kB, kT, d}, rng, 1.0));
  return out;
}

Tensor<double> ln_rows(const Tensor<double>& x, const Tensor<double>& g, const Tensor<double>& b) {
  const std::size_t d = x.shape().back();
  Tensor<double> out(x.shape());
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < d; ++j) m += x[r * d + j];
    m /= double(d);
    for (std::size_t j = 0; j < d; ++j) v += (x[r * d + j] - m) * (x[r * d + j] - m);
    v /= double(d);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = g[j] * (x[r * d + j] - m) / std::sqrt(v + kLayerNormEps) + b[j];
  }
  return out;
}

Tensor<double> affine(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t k = w.dim(0), n = w.dim(1), rows = x.size() / k;
  Shape s = x.shape();
  s.back() = n;
  Tensor<double> out(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = b[j];
      for (std::size_t i = 0; i < k; ++i) acc += x[r * k + i] * w[i * n + j];
      out[r * n + j] = acc;
    }
  return out;
}

Tensor<double> concat(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t da = a.shape().back(), db = b.shape().back(), rows = a.size() / da;
  Shape s = a.shape();
  s.back() = da + db;
  Tensor<double> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.raw() + r * da, da, out.raw() + r * (da + db));
    std::copy_n(b.raw() + r * db, db, out.raw() + r * (da + db) + da);
  }
  return out;
}

void jitter(ParameterSet<double>& ps, std::uint64_t seed, double s) {
  Rng rng(seed);
  for (auto& [name, p] : ps) p.value += normal_tensor<double>(p.value.shape(), rng, s);
}

struct Fixture {
  FusionConfig cfg;
  ParameterSet<double> params;
  LayerFeatures<double> a, b;
  Fixture(std::size_t blocks = 2, std::size_t ratio = 4) {
    cfg = FusionConfig::defaults(4, 4, kD1, kD2, 3);
    cfg.mlp_blocks = blocks;
    cfg.mlp_ratio = ratio;
    params = init_fusion<double>(cfg, 1);
    a.layers = random_layers(4, kD1, 2);
    b.layers = random_layers(4, kD2, 3);
  }
  Tensor<double> out() const { return fuse_features(a, b, cfg, params); }
};

}  // namespace

TEST(FusionConfig, DefaultLayerSets) {
  auto c = FusionConfig::defaults(24, 24, 8, 8);
  EXPECT_EQ(c.dino_layers, (std::vector<std::size_t>{19, 20, 21, 22, 23, 24}));
  EXPECT_EQ(c.clip_layers.size(), 24u);
  EXPECT_EQ(c.clip_layers.front(), 1u);
  EXPECT_EQ(FusionConfig::defaults(8, 8, 8, 8).dino_layers, (std::vector<std::size_t>{7, 8}));
  EXPECT_EQ(FusionConfig::defaults(8, 6, 8, 8).dino_layers, (std::vector<std::size_t>{5, 6}));
  EXPECT_EQ(c.mlp_blocks, 2u);
  EXPECT_EQ(c.mlp_ratio, 4u);
}

TEST(FusionConfig, Validation) {
  auto c = FusionConfig::defaults(4, 4, 4, 4);
  c.dino_layers = {5};
  EXPECT_THROW(c.validate(), DimensionError);
  c = FusionConfig::defaults(4, 4, 4, 4);
  c.clip_layers = {1, 1};
  EXPECT_THROW(c.validate(), DimensionError);
  c = FusionConfig::defaults(4, 4, 4, 4);
  c.clip_layers.clear();
  EXPECT_THROW(c.validate(), DimensionError);
  c = FusionConfig::defaults(4, 4, 4, 4);
  EXPECT_TRUE(c.warnings().empty());
  c.mlp_blocks = 3;
  EXPECT_EQ(c.warnings().size(), 1u);
}

TEST(BranchMerge, DominantAlphaIsLinearOfNormalizedLayer) {
  Fixture f;
  jitter(f.params, 4, 0.5);
  auto& alpha = f.params.get("clip.alpha").value;
  alpha.fill(0);
  alpha[2] = 40;  // layer 3
  Tape<double> tape;
  Bound<double> P(tape, std::as_const(f.params));
  std::vector<Var<double>> layers;
  for (auto& l : f.a.layers) layers.push_back(tape.constant(l));
  auto y = branch_merge(layers, f.cfg.clip_layers, P, "clip.", "alpha", MergeOptions{});
  const std::string p = "clip.lln.3.";
  auto want = affine(ln_rows(f.a.layers[2], P.value(p + "ln.gamma"), P.value(p + "ln.beta")),
                     P.value(p + "linear.weight"), P.value(p + "linear.bias"));
  EXPECT_LE(max_abs_diff(y.value(), want), 1e-6);
}

TEST(BranchMerge, SingletonSetHasWeightOne) {
  Fixture f;
  f.cfg.dino_layers = {4};
  f.params = init_fusion<double>(f.cfg, 1);
  jitter(f.params, 5, 0.5);
  Tape<double> tape;
  std::vector<Var<double>> layers;
  for (auto& l : f.b.layers) layers.push_back(tape.constant(l));
  Tensor<double> first;
  for (double logit : {-30.0, 0.0, 17.0}) {
    f.params.get("dino.beta").value[0] = logit;
    Bound<double> P(tape, std::as_const(f.params));
    auto y = branch_merge(layers, f.cfg.dino_layers, P, "dino.", "beta", MergeOptions{}).value();
    if (first.empty())
      first = y;
    else
      EXPECT_EQ(y, first);
  }
}

TEST(MlpAlign, LinearWithIdentityIsIdentity) {
  Rng rng(6);
  ParameterSet<double> ps;
  Tensor<double> eye({kD2, kD2});
  for (std::size_t i = 0; i < kD2; ++i) eye.at(i, i) = 1;
  ps.add("mlp.linear.weight", eye);
  ps.add("mlp.linear.bias", Tensor<double>::zeros({kD2}));
  auto x = normal_tensor<double>({kB, kT, kD2}, rng, 1.0);
  Tape<double> tape;
  Bound<double> P(tape, std::as_const(ps));
  EXPECT_LE(max_abs_diff(mlp_align(tape.constant(x), 0, P).value(), x), 1e-6);
}

TEST(MlpAlign, HiddenWidth) {
  auto c = FusionConfig::defaults(4, 4, 16, 16);
  c.mlp_blocks = 1;
  c.mlp_ratio = 4;
  auto ps = init_fusion<double>(c, 0);
  EXPECT_EQ(ps.get("mlp.0.fc1.weight").value.shape(), (Shape{16, 64}));
  EXPECT_EQ(ps.get("mlp.0.fc2.weight").value.shape(), (Shape{64, 16}));
  EXPECT_FALSE(ps.contains("mlp.1.fc1.weight"));
}

TEST(MlpAlign, BlocksAreResidualFree) {
  Fixture f(1, 4);
  Rng rng(7);
  auto x = normal_tensor<double>({kB, kT, kD2}, rng, 1.0);
  Tape<double> tape;
  Bound<double> P(tape, std::as_const(f.params));
  auto h = ln_rows(x, f.params.get("mlp.0.ln.gamma").value, f.params.get("mlp.0.ln.beta").value);
  h = affine(h, f.params.get("mlp.0.fc1.weight").value, f.params.get("mlp.0.fc1.bias").value);
  for (auto& v : h.data()) v = 0.5 * v * (1 + std::erf(v / std::sqrt(2.0)));
  h = affine(h, f.params.get("mlp.0.fc2.weight").value, f.params.get("mlp.0.fc2.bias").value);
  EXPECT_LE(max_abs_diff(mlp_align(tape.constant(x), 1, P).value(), h), 1e-9);
}

TEST(Fuse, ShapeContract) {
  auto cfg = FusionConfig::defaults(8, 8, 32, 32, 64);
  auto ps = init_fusion<double>(cfg, 1);
  LayerFeatures<double> a, b;
  Rng rng(8);
  for (int i = 0; i < 8; ++i) {
    a.layers.push_back(normal_tensor<double>({2, 36, 32}, rng, 1.0));
    b.layers.push_back(normal_tensor<double>({2, 36, 32}, rng, 1.0));
  }
  EXPECT_EQ(fuse_features(a, b, cfg, ps).shape(), (Shape{2, 36, 64}));
}

TEST(Fuse, ZeroProjectionGivesBias) {
  Fixture f;
  f.params.get("proj.weight").value.fill(0);
  f.params.get("proj.bias").value = Tensor<double>({3}, {0.5, -1.0, 2.0});
  auto y = f.out();
  for (std::size_t r = 0; r < kB * kT; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y[r * 3 + j], f.params.get("proj.bias").value[j]);
}

TEST(Fuse, TokenMismatchNamesBothCounts) {
  Fixture f;
  Rng rng(9);
  for (auto& l : f.b.layers) l = normal_tensor<double>({kB, 9, kD2}, rng, 1.0);
  try {
    f.out();
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("6"), std::string::npos) << msg;
    EXPECT_NE(msg.find("9"), std::string::npos) << msg;
  }
}

TEST(Fuse, DegeneratesToClipMergePlusLastDinoLayer) {
  Fixture f(0);
  jitter(f.params, 10, 0.3);
  auto& beta = f.params.get("dino.beta").value;
  beta.fill(0);
  beta[beta.size() - 1] = 40;  // deepest layer
  auto& w = f.params.get("mlp.linear.weight").value;
  w.fill(0);
  for (std::size_t i = 0; i < kD2; ++i) w.at(i, i) = 1;
  f.params.get("mlp.linear.bias").value.fill(0);

  // clip branch composed by hand
  const auto& alpha = f.params.get("clip.alpha").value;
  double zmax = alpha[0], zs = 0;
  for (auto v : alpha.data()) zmax = std::max(zmax, v);
  for (auto v : alpha.data()) zs += std::exp(v - zmax);
  Tensor<double> v1({kB, kT, kD1});
  for (std::size_t i = 1; i <= 4; ++i) {
    const std::string p = "clip.lln." + std::to_string(i) + ".";
    auto t = affine(ln_rows(f.a.layers[i - 1], f.params.get(p + "ln.gamma").value, f.params.get(p + "ln.beta").value),
                    f.params.get(p + "linear.weight").value, f.params.get(p + "linear.bias").value);
    const double wi = std::exp(alpha[i - 1] - zmax) / zs;
    for (std::size_t k = 0; k < t.size(); ++k) v1[k] += wi * t[k];
  }
  const std::string q = "dino.lln.4.";
  auto v2 = affine(ln_rows(f.b.layers[3], f.params.get(q + "ln.gamma").value, f.params.get(q + "ln.beta").value),
                   f.params.get(q + "linear.weight").value, f.params.get(q + "linear.bias").value);
  auto want = affine(concat(v1, v2), f.params.get("proj.weight").value, f.params.get("proj.bias").value);
  EXPECT_LE(max_abs_diff(f.out(), want), 1e-6);
}

TEST(Fuse, TokenPermutationEquivariance) {
  Fixture f;
  jitter(f.params, 11, 0.3);
  std::vector<std::size_t> perm{3, 5, 0, 1, 4, 2};
  auto permute = [&](const Tensor<double>& l) {
    Tensor<double> t(l.shape());
    for (std::size_t b = 0; b < l.dim(0); ++b)
      for (std::size_t i = 0; i < l.dim(1); ++i)
        for (std::size_t d = 0; d < l.dim(2); ++d) t.at(b, i, d) = l.at(b, perm[i], d);
    return t;
  };
  auto base = f.out();
  for (auto& l : f.a.layers) l = permute(l);
  for (auto& l : f.b.layers) l = permute(l);
  EXPECT_LT(max_abs_diff(f.out(), permute(base)), 1e-12);
}

TEST(Fuse, Deterministic) {
  Fixture f, g;
  EXPECT_EQ(f.out(), g.out());
  EXPECT_EQ(init_fusion<double>(f.cfg, 1), init_fusion<double>(f.cfg, 1));
  EXPECT_FALSE(init_fusion<double>(f.cfg, 1) == init_fusion<double>(f.cfg, 2));
}

TEST(Fuse, TrainingFusionLeavesFrozenEncoderInputsUntouched) {
  Fixture f;
  ParameterSet<double> frozen;
  for (std::size_t i = 0; i < 4; ++i) {
    frozen.add("a." + std::to_string(i), f.a.layers[i]);
    frozen.add("b." + std::to_string(i), f.b.layers[i]);
  }
  const auto before = frozen.checksum();
  Adam<double> adam(select_params(f.params), AdamOptions{.lr = 1e-2});
  Rng rng(12);
  const auto target = normal_tensor<double>({kB, kT, 3}, rng, 1.0);
  for (int step = 0; step < 5; ++step) {
    adam.zero_grad();
    Tape<double> tape;
    Bound<double> P(tape, f.params, true);
    Bound<double> E(tape, std::as_const(frozen));
    std::vector<Var<double>> a, b;
    for (std::size_t i = 0; i < 4; ++i) {
      a.push_back(E("a." + std::to_string(i)));
      b.push_back(E("b." + std::to_string(i)));
    }
    auto loss = mse(fuse(a, b, f.cfg, P), target);
    tape.backward(loss);
    adam.step(1e-2);
  }
  EXPECT_EQ(frozen.checksum(), before);
  EXPECT_FALSE(f.params == init_fusion<double>(f.cfg, 1));
}

TEST(CountParams, MatchesConstruction) {
  for (auto [m, r] : std::vector<std::pair<std::size_t, std::size_t>>{{0, 4}, {1, 4}, {2, 4}, {4, 4}, {8, 4}, {1, 8}, {1, 16}})
    for (bool shared : {false, true}) {
      auto c = FusionConfig::defaults(8, 8, 32, 24, 64);
      c.mlp_blocks = m;
      c.mlp_ratio = r;
      c.lln_shared = shared;
      EXPECT_EQ(count_params(c), init_fusion<double>(c, 0).scalar_count()) << m << "," << r << "," << shared;
    }
}

TEST(CountParams, BlockDifference) {
  auto c0 = FusionConfig::defaults(8, 8, 32, 24, 64);
  c0.mlp_blocks = 0;
  auto c2 = c0;
  c2.mlp_blocks = 2;
  const std::size_t r = 4, d2 = 24;
  const std::size_t expected = 2 * (2 * r * d2 * d2 + r * d2 + d2 + 2 * d2) - (d2 * d2 + d2);
  EXPECT_EQ(count_params(c2) - count_params(c0), expected);
}

TEST(CountParams, DoublingOutDim) {
  auto c = FusionConfig::defaults(8, 8, 32, 24, 64);
  auto d = c;
  d.out_dim = 128;
  EXPECT_EQ(count_params(d) - count_params(c), (32 + 24) * 64 + 64u);
}

TEST(CountParams, AlphaCount) {
  auto c = FusionConfig::defaults(8, 8, 32, 24);
  c.clip_layers = {2, 5, 7};
  EXPECT_EQ(init_fusion<double>(c, 0).get("clip.alpha").value.size(), 3u);
}
