#pragma once

// Small pretraining objectives producing frozen encoders with different
// feature biases. Objective-specific heads live under "pretrain/" names in a
// separate set and are discarded by callers that only need the encoder.

#include <iostream>
#include <numeric>
#include <optional>
#include <string>

#include "mfm/data.hpp"
#include "mfm/optim.hpp"

namespace mfm {

enum class PretrainObjective { GlobalSupervised, GlobalContrastive, InstanceContrastive, MaskedReconstruction, Random };

inline std::string to_string(PretrainObjective o) {
  switch (o) {
    case PretrainObjective::GlobalSupervised: return "global_supervised";
    case PretrainObjective::GlobalContrastive: return "global_contrastive";
    case PretrainObjective::InstanceContrastive: return "instance_contrastive";
    case PretrainObjective::MaskedReconstruction: return "masked_reconstruction";
    case PretrainObjective::Random: return "random";
  }
  return "?";
}

inline std::optional<PretrainObjective> parse_objective(std::string_view s) {
  for (auto o : {PretrainObjective::GlobalSupervised, PretrainObjective::GlobalContrastive,
                 PretrainObjective::InstanceContrastive, PretrainObjective::MaskedReconstruction,
                 PretrainObjective::Random})
    if (to_string(o) == s) return o;
  return std::nullopt;
}

inline constexpr double kContrastiveTemperature = 0.07;
inline constexpr double kMaskRatio = 0.5;

struct PretrainOptions {
  std::size_t steps = 500;
  std::size_t batch = 32;
  double lr = 1e-2;
  double temperature = kContrastiveTemperature;
  double mask_ratio = kMaskRatio;
  std::uint64_t seed = 0;
};

template <typename T>
struct PretrainResult {
  ParameterSet<T> encoder;
  ParameterSet<T> head;
  std::vector<double> losses;  // one per step
  std::vector<std::string> warnings;
};

template <typename T>
ParameterSet<T> init_pretrain_head(PretrainObjective obj, const EncoderConfig& cfg, std::size_t classes,
                                   std::uint64_t seed) {
  Rng rng(split_seed(seed, "pretrain.head." + to_string(obj)));
  const std::size_t D = cfg.dim;
  ParameterSet<T> h;
  switch (obj) {
    case PretrainObjective::GlobalSupervised:
      h.add("pretrain/cls.weight", normal_tensor<T>({D, classes}, rng, kInitStd));
      h.add("pretrain/cls.bias", Tensor<T>::zeros({classes}));
      break;
    case PretrainObjective::GlobalContrastive:
      h.add("pretrain/image.proj", normal_tensor<T>({D, D}, rng, 1.0 / std::sqrt(double(D))));
      h.add("pretrain/text.embed", normal_tensor<T>({classes, D}, rng, 1.0));
      break;
    case PretrainObjective::InstanceContrastive:
      h.add("pretrain/image.proj", normal_tensor<T>({D, D}, rng, 1.0 / std::sqrt(double(D))));
      break;
    case PretrainObjective::MaskedReconstruction:
      h.add("pretrain/decoder.weight", normal_tensor<T>({D, cfg.patch_features()}, rng, kInitStd));
      h.add("pretrain/decoder.bias", Tensor<T>::zeros({cfg.patch_features()}));
      break;
    case PretrainObjective::Random: break;
  }
  return h;
}

/// Random flips plus a circular shift (crop analog) applied per image.
template <typename T>
Tensor<T> augment(const Tensor<T>& images, Rng& rng) {
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  Tensor<T> out(images.shape());
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<std::size_t> sy(0, H - 1), sx(0, W - 1);
  for (std::size_t b = 0; b < B; ++b) {
    const bool fh = coin(rng), fv = coin(rng);
    const std::size_t dy = sy(rng), dx = sx(rng);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          std::size_t yy = (y + dy) % H, xx = (x + dx) % W;
          if (fv) yy = H - 1 - yy;
          if (fh) xx = W - 1 - xx;
          out[((b * C + c) * H + y) * W + x] = images[((b * C + c) * H + yy) * W + xx];
        }
  }
  return out;
}

template <typename T>
Var<T> pooled_last(const std::vector<Var<T>>& layers) {
  return mean_axis(layers.back(), 1);
}

/// Projection head for the contrastive objectives: batch-centered pooled
/// features, linear map, unit norm. Without the centering every embedding
/// starts on the shared offset of the pooled tokens and the loss settles at ln B.
template <typename T>
Var<T> contrastive_embedding(const std::vector<Var<T>>& layers, Var<T> proj) {
  auto pooled = pooled_last(layers);
  auto centered = add_trailing(pooled, scale(mean_axis(pooled, 0), T(-1)));
  return l2_normalize(matmul(centered, proj));
}

/// Symmetric InfoNCE between rows of a [B,D] and rows of b [B,D] (both unit-normalized).
template <typename T>
Var<T> symmetric_contrastive(Var<T> a, Var<T> b, double temperature) {
  const std::size_t B = a.dim(0), D = a.dim(1);
  auto logits = reshape(bmm(reshape(a, {1, B, D}), reshape(b, {1, B, D}), true), {B, B});
  logits = scale(logits, T(1.0 / temperature));
  std::vector<int> diag(B);
  std::iota(diag.begin(), diag.end(), 0);
  return scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), T(0.5));
}

/// Masks `ratio` of the patches of every image with zeros; returns masked
/// images and the flat row indices (b*T + t) of masked tokens.
template <typename T>
std::pair<Tensor<T>, std::vector<std::size_t>> mask_patches(const Tensor<T>& images, const EncoderConfig& cfg,
                                                             double ratio, Rng& rng) {
  const std::size_t B = images.dim(0), C = cfg.channels, H = cfg.image_h, W = cfg.image_w, p = cfg.patch_size;
  const std::size_t Tn = cfg.tokens(), cols = cfg.grid_cols();
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ratio * double(Tn))));
  Tensor<T> out = images;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> perm(Tn);
  for (std::size_t b = 0; b < B; ++b) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> chosen(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
    for (auto t : chosen) {
      rows.push_back(b * Tn + t);
      const auto gc = token_coord(t, cols);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx) out[((b * C + c) * H + gc.row * p + dy) * W + gc.col * p + dx] = 0;
    }
  }
  return {std::move(out), std::move(rows)};
}

/// Builds the objective's loss for one batch.
template <typename T>
Var<T> pretrain_loss(PretrainObjective obj, Tape<T>& tape, Bound<T>& enc, Bound<T>& head, const EncoderConfig& cfg,
                     const Tensor<T>& images, std::span<const int> labels, const PretrainOptions& opt, Rng& rng) {
  switch (obj) {
    case PretrainObjective::GlobalSupervised: {
      auto layers = encode(tape, images, cfg, enc);
      auto logits = linear(pooled_last(layers), head("pretrain/cls.weight"), head("pretrain/cls.bias"));
      return cross_entropy(logits, labels);
    }
    case PretrainObjective::GlobalContrastive: {
      auto img = contrastive_embedding(encode(tape, images, cfg, enc), head("pretrain/image.proj"));
      std::vector<std::size_t> idx(labels.begin(), labels.end());
      auto txt = l2_normalize(gather_rows(head("pretrain/text.embed"), idx));
      return symmetric_contrastive(img, txt, opt.temperature);
    }
    case PretrainObjective::InstanceContrastive: {
      auto v1 = augment(images, rng);
      auto v2 = augment(images, rng);
      auto e1 = contrastive_embedding(encode(tape, v1, cfg, enc), head("pretrain/image.proj"));
      auto e2 = contrastive_embedding(encode(tape, v2, cfg, enc), head("pretrain/image.proj"));
      return symmetric_contrastive(e1, e2, opt.temperature);
    }
    case PretrainObjective::MaskedReconstruction: {
      auto [masked, rows] = mask_patches(images, cfg, opt.mask_ratio, rng);
      auto layers = encode(tape, masked, cfg, enc);
      auto picked = gather_rows(layers.back(), rows);
      auto pred = linear(picked, head("pretrain/decoder.weight"), head("pretrain/decoder.bias"));
      auto target = patchify(images, cfg.patch_size);
      const std::size_t F = cfg.patch_features();
      Tensor<T> tgt({rows.size(), F});
      for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(target.raw() + rows[i] * F, F, tgt.raw() + i * F);
      return mse(pred, tgt);
    }
    case PretrainObjective::Random: break;
  }
  throw std::logic_error("pretrain_loss: random objective has no loss");
}

/// Trains the encoder with the chosen objective on rows `train_rows` of `data`.
template <typename T>
PretrainResult<T> pretrain(const ParameterSet<T>& init, const EncoderConfig& cfg, PretrainObjective obj,
                           const Dataset<T>& data, std::span<const std::size_t> train_rows, const PretrainOptions& opt) {
  PretrainResult<T> res;
  res.encoder = init.template cast<T>();
  if (obj == PretrainObjective::Random) return res;
  res.head = init_pretrain_head<T>(obj, cfg, data.spec.global_classes, opt.seed);
  if (opt.steps == 0) {
    res.warnings.push_back("pretrain budget is 0 for objective " + to_string(obj) + "; returning initial parameters");
    return res;
  }
  if (train_rows.empty()) throw DimensionError("pretrain: empty training set");
  std::vector<Parameter<T>*> trainable = select_params(res.encoder);
  for (auto* p : select_params(res.head)) trainable.push_back(p);
  Adam<T> adam(trainable, AdamOptions{.lr = opt.lr});
  Rng rng(split_seed(opt.seed, "pretrain.batches." + to_string(obj)));
  std::uniform_int_distribution<std::size_t> pick(0, train_rows.size() - 1);
  std::vector<std::size_t> rows(opt.batch);
  std::vector<int> labels(opt.batch);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    for (std::size_t i = 0; i < opt.batch; ++i) {
      rows[i] = train_rows[pick(rng)];
      labels[i] = data.global_labels[rows[i]];
    }
    Tensor<T> images = data.gather_images(rows);
    adam.zero_grad();
    Tape<T> tape;
    Bound<T> enc(tape, res.encoder, true), head(tape, res.head, true);
    auto loss = pretrain_loss(obj, tape, enc, head, cfg, images, labels, opt, rng);
    res.losses.push_back(static_cast<double>(loss.value().item()));
    tape.backward(loss);
    adam.step(cosine_lr(opt.lr, step, opt.steps));
  }
  return res;
}

/// Masked-patch reconstruction MSE of an encoder+decoder on `rows`, and the
/// MSE of predicting the mean training pixel value everywhere.
template <typename T>
std::pair<double, double> reconstruction_vs_mean(const ParameterSet<T>& encoder, const ParameterSet<T>& head,
                                                 const EncoderConfig& cfg, const Dataset<T>& data,
                                                 std::span<const std::size_t> rows, double mask_ratio,
                                                 std::uint64_t seed) {
  double pixel_mean = 0;
  for (auto v : data.images.data()) pixel_mean += static_cast<double>(v);
  pixel_mean /= double(data.images.size());
  Rng rng(split_seed(seed, "pretrain.eval_mask"));
  Tensor<T> images = data.gather_images(rows);
  auto [masked, mrows] = mask_patches(images, cfg, mask_ratio, rng);
  Tape<T> tape;
  Bound<T> enc(tape, encoder), hd(tape, head);
  auto layers = encode(tape, masked, cfg, enc);
  auto pred = linear(gather_rows(layers.back(), mrows), hd("pretrain/decoder.weight"), hd("pretrain/decoder.bias"));
  auto target = patchify(images, cfg.patch_size);
  const std::size_t F = cfg.patch_features();
  double model = 0, base = 0;
  for (std::size_t i = 0; i < mrows.size(); ++i)
    for (std::size_t f = 0; f < F; ++f) {
      const double t = static_cast<double>(target[mrows[i] * F + f]);
      const double d = static_cast<double>(pred.value()[i * F + f]) - t;
      model += d * d;
      base += (pixel_mean - t) * (pixel_mean - t);
    }
  const double n = double(mrows.size() * F);
  return {model / n, base / n};
}

}  // namespace mfm
