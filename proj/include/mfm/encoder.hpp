#pragma once

// Toy ViT-style encoder exposing every block's patch-token output.
//
// Parameters (D = dim, F = channels * patch^2, T = tokens, N = depth):
//   patch_embed.weight [F,D], patch_embed.bias [D], pos_embed [T,D]
//   per block i: blocks.i.ln1.{gamma,beta} [D], blocks.i.attn.{q,k,v,out}.{weight [D,D], bias [D]},
//                blocks.i.ln2.{gamma,beta} [D], blocks.i.mlp.fc1.{weight [D,4D], bias [4D]},
//                blocks.i.mlp.fc2.{weight [4D,D], bias [D]}
// Closed-form count: F*D + D + T*D + N * (12*D^2 + 13*D).
// Blocks are pre-norm (x += Attn(LN1 x); x += MLP(LN2 x)); there is no CLS
// token and no final norm, so layer i is exactly block i's residual output.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mfm/ops.hpp"
#include "mfm/random.hpp"

namespace mfm {

inline constexpr std::size_t kMlpRatio = 4;
inline constexpr double kInitStd = 0.02;

struct EncoderConfig {
  std::size_t depth = 8;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t patch_size = 6;
  std::size_t image_h = 36;
  std::size_t image_w = 36;
  std::size_t channels = 3;
  std::uint64_t seed = 0;

  std::size_t grid_rows() const { return image_h / patch_size; }
  std::size_t grid_cols() const { return image_w / patch_size; }
  std::size_t tokens() const { return grid_rows() * grid_cols(); }
  std::size_t patch_features() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (depth == 0 || dim == 0 || heads == 0 || patch_size == 0 || image_h == 0 || image_w == 0 || channels == 0)
      throw DimensionError("encoder config fields must be positive");
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
      throw DimensionError("image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                           " is not divisible by patch size " + std::to_string(patch_size));
    if (dim % heads != 0)
      throw DimensionError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// Spatial position of a patch token in row-major order.
struct GridCoord {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const GridCoord&) const = default;
};

inline GridCoord token_coord(std::size_t token, std::size_t grid_cols) { return {token / grid_cols, token % grid_cols}; }
inline std::size_t token_index(GridCoord c, std::size_t grid_cols) { return c.row * grid_cols + c.col; }

/// [B,C,H,W] -> [B, (H/p)(W/p), C*p*p]; tokens row-major over the grid, features ordered (c, dy, dx).
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t p) {
  if (images.rank() != 4) throw DimensionError("patchify expects [B,C,H,W], got " + to_string(images.shape()));
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (p == 0 || H % p != 0 || W % p != 0)
    throw DimensionError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by patch size " + std::to_string(p));
  const std::size_t rows = H / p, cols = W / p, F = C * p * p;
  Tensor<T> out({B, rows * cols, F});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t q = 0; q < cols; ++q) {
        T* dst = out.raw() + (b * rows * cols + r * cols + q) * F;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
              *dst++ = images[((b * C + c) * H + r * p + dy) * W + q * p + dx];
      }
  return out;
}

inline std::size_t encoder_param_count(const EncoderConfig& c) {
  const std::size_t D = c.dim;
  return c.patch_features() * D + D + c.tokens() * D + c.depth * (12 * D * D + 13 * D);
}

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

template <typename T>
ParameterSet<T> init_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  Rng rng(split_seed(cfg.seed, "encoder.init"));
  const std::size_t D = cfg.dim, H = kMlpRatio * D;
  ParameterSet<T> ps;
  auto weight = [&](const std::string& name, Shape s) { ps.add(name, normal_tensor<T>(std::move(s), rng, kInitStd)); };
  auto zeros = [&](const std::string& name, std::size_t n) { ps.add(name, Tensor<T>::zeros({n})); };
  auto norm = [&](const std::string& name) {
    ps.add(name + ".gamma", Tensor<T>::ones({D}));
    ps.add(name + ".beta", Tensor<T>::zeros({D}));
  };
  weight("patch_embed.weight", {cfg.patch_features(), D});
  zeros("patch_embed.bias", D);
  weight("pos_embed", {cfg.tokens(), D});
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const auto p = block_prefix(i);
    norm(p + "ln1");
    for (const char* proj : {"q", "k", "v", "out"}) {
      weight(p + "attn." + proj + ".weight", {D, D});
      zeros(p + "attn." + proj + ".bias", D);
    }
    norm(p + "ln2");
    weight(p + "mlp.fc1.weight", {D, H});
    zeros(p + "mlp.fc1.bias", H);
    weight(p + "mlp.fc2.weight", {H, D});
    zeros(p + "mlp.fc2.bias", D);
  }
  return ps;
}

/// Multi-head self-attention over x [B,T,D].
template <typename T>
Var<T> self_attention(Var<T> x, Bound<T>& P, const std::string& prefix, std::size_t heads) {
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2), dh = D / heads;
  auto project = [&](const char* name) {
    auto y = linear(x, P(prefix + name + ".weight"), P(prefix + name + ".bias"));
    return reshape(swap_axes_12(reshape(y, {B, Tn, heads, dh})), {B * heads, Tn, dh});
  };
  auto q = project("q"), k = project("k"), v = project("v");
  auto scores = scale(bmm(q, k, true), T(1) / std::sqrt(static_cast<T>(dh)));
  auto attn = softmax(scores, 2);
  auto ctx = bmm(attn, v);
  auto merged = reshape(swap_axes_12(reshape(ctx, {B, heads, Tn, dh})), {B, Tn, D});
  return linear(merged, P(prefix + "out.weight"), P(prefix + "out.bias"));
}

/// One pre-norm transformer block.
template <typename T>
Var<T> encoder_block(Var<T> x, Bound<T>& P, std::size_t i, std::size_t heads) {
  const auto p = block_prefix(i);
  auto h = layer_norm(x, P(p + "ln1.gamma"), P(p + "ln1.beta"));
  x = add(x, self_attention(h, P, p + "attn.", heads));
  auto h2 = layer_norm(x, P(p + "ln2.gamma"), P(p + "ln2.beta"));
  auto m = linear(gelu(linear(h2, P(p + "mlp.fc1.weight"), P(p + "mlp.fc1.bias"))), P(p + "mlp.fc2.weight"),
                  P(p + "mlp.fc2.bias"));
  return add(x, m);
}

/// Token embedding of a batch of images: patchify, linear embedding, positional table.
template <typename T>
Var<T> embed_tokens(Tape<T>& tape, const Tensor<T>& images, const EncoderConfig& cfg, Bound<T>& P) {
  if (images.rank() != 4 || images.dim(1) != cfg.channels || images.dim(2) != cfg.image_h ||
      images.dim(3) != cfg.image_w)
    throw DimensionError("encode: images " + to_string(images.shape()) + " do not match config [B," +
                         std::to_string(cfg.channels) + "," + std::to_string(cfg.image_h) + "," +
                         std::to_string(cfg.image_w) + "]");
  auto patches = tape.constant(patchify(images, cfg.patch_size));
  auto x = linear(patches, P("patch_embed.weight"), P("patch_embed.bias"));
  return add_trailing(x, P("pos_embed"));
}

/// Runs the encoder on the tape and returns the N per-layer outputs, each [B,T,D].
template <typename T>
std::vector<Var<T>> encode(Tape<T>& tape, const Tensor<T>& images, const EncoderConfig& cfg, Bound<T>& P) {
  auto x = embed_tokens(tape, images, cfg, P);
  std::vector<Var<T>> layers;
  layers.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    x = encoder_block(x, P, i, cfg.heads);
    layers.push_back(x);
  }
  return layers;
}

/// Per-layer patch-token features z_1..z_N of one forward pass, each [B,T,D].
template <typename T>
struct LayerFeatures {
  std::vector<Tensor<T>> layers;

  std::size_t depth() const { return layers.size(); }
  std::size_t batch() const { return layers.at(0).dim(0); }
  std::size_t tokens() const { return layers.at(0).dim(1); }
  std::size_t dim() const { return layers.at(0).dim(2); }

  /// Rows [begin, begin+count) of every layer.
  LayerFeatures slice(std::span<const std::size_t> rows) const {
    LayerFeatures out;
    for (const auto& l : layers) {
      const std::size_t per = l.size() / l.dim(0);
      Tensor<T> t({rows.size(), l.dim(1), l.dim(2)});
      for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(l.raw() + rows[i] * per, per, t.raw() + i * per);
      out.layers.push_back(std::move(t));
    }
    return out;
  }
};

/// Frozen forward pass: evaluates the encoder without recording gradients.
template <typename T>
LayerFeatures<T> encode_frozen(const Tensor<T>& images, const EncoderConfig& cfg, const ParameterSet<T>& params) {
  Tape<T> tape;
  Bound<T> P(tape, params);
  LayerFeatures<T> lf;
  for (auto& v : encode(tape, images, cfg, P)) lf.layers.push_back(v.value());
  return lf;
}

/// Encodes a large image stack in chunks of `chunk` images.
template <typename T>
LayerFeatures<T> encode_dataset(const Tensor<T>& images, const EncoderConfig& cfg, const ParameterSet<T>& params,
                                std::size_t chunk = 64) {
  const std::size_t n = images.dim(0), per = images.size() / n;
  LayerFeatures<T> out;
  const std::size_t Tn = cfg.tokens(), D = cfg.dim;
  for (std::size_t i = 0; i < cfg.depth; ++i) out.layers.emplace_back(Shape{n, Tn, D});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    Shape s = images.shape();
    s[0] = m;
    Tensor<T> part(s, std::vector<T>(images.raw() + start * per, images.raw() + (start + m) * per));
    auto lf = encode_frozen(part, cfg, params);
    for (std::size_t i = 0; i < cfg.depth; ++i)
      std::copy_n(lf.layers[i].raw(), lf.layers[i].size(), out.layers[i].raw() + start * Tn * D);
  }
  return out;
}

}  // namespace mfm
