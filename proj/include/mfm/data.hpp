#pragma once

// Synthetic images with one global cue and one local cue, independent of each other.
//
// Global cue: class g in 0..G-1 selects the color channel that carries a
// sinusoidal stripe pattern (period = patch size, random orientation and
// phase per image); every other channel is flat gray plus noise. The class is
// recovered in closed form as argmax_c mean_{y,x} |pixel(c,y,x) - 0.5|. The
// stripes average out within every patch, so a linear map of pooled pixels
// carries no class information; reading the cue needs a nonlinearity.
//
// Local cue: a square marker of side `marker_size` placed fully inside one
// grid cell, chosen uniformly; marker class 0 is white (1,1,1), class 1 is
// yellow (1,1,0).

#include <numbers>
#include <vector>

#include "mfm/encoder.hpp"
#include "mfm/random.hpp"

namespace mfm {

struct DatasetSpec {
  std::size_t image_h = 36;
  std::size_t image_w = 36;
  std::size_t patch_size = 6;
  std::size_t global_classes = 3;
  std::size_t marker_size = 3;
  std::size_t channels = 3;
  double stripe_amplitude = 1.0;
  double noise = 0.05;

  std::size_t grid_rows() const { return image_h / patch_size; }
  std::size_t grid_cols() const { return image_w / patch_size; }
  std::size_t cells() const { return grid_rows() * grid_cols(); }

  void validate() const {
    if (patch_size == 0 || image_h == 0 || image_w == 0 || image_h % patch_size || image_w % patch_size)
      throw DimensionError("dataset: image size must be a positive multiple of the patch size");
    if (marker_size == 0 || marker_size >= patch_size)
      throw DimensionError("dataset: marker size must be in [1, patch_size)");
    if (channels != 3) throw DimensionError("dataset: images have exactly 3 channels");
    if (global_classes < 2 || global_classes > channels)
      throw DimensionError("dataset: global classes must be in [2, channels]");
    if (!(stripe_amplitude > 0) || !(noise >= 0)) throw DimensionError("dataset: amplitude > 0 and noise >= 0 required");
  }

  bool operator==(const DatasetSpec&) const = default;
};

inline constexpr std::size_t kMarkerClasses = 2;

struct LocalLabel {
  GridCoord cell;
  int marker_class = 0;
};

template <typename T>
struct SyntheticSample {
  Tensor<T> image;  // [3,H,W]
  int global_label = 0;
  LocalLabel local;
  std::uint64_t id = 0;
};

/// Column-oriented dataset: one image stack plus per-sample labels.
template <typename T>
struct Dataset {
  DatasetSpec spec;
  Tensor<T> images;  // [n,3,H,W]
  std::vector<int> global_labels;
  std::vector<LocalLabel> local_labels;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return ids.size(); }

  int cell_label(std::size_t i) const {
    return static_cast<int>(token_index(local_labels[i].cell, spec.grid_cols()));
  }

  SyntheticSample<T> sample(std::size_t i) const {
    const std::size_t per = images.size() / size();
    Tensor<T> img({spec.channels, spec.image_h, spec.image_w},
                  std::vector<T>(images.raw() + i * per, images.raw() + (i + 1) * per));
    return {std::move(img), global_labels[i], local_labels[i], ids[i]};
  }

  /// Images for the given rows, stacked [k,3,H,W].
  Tensor<T> gather_images(std::span<const std::size_t> rows) const {
    const std::size_t per = images.size() / size();
    Shape s = images.shape();
    s[0] = rows.size();
    Tensor<T> out(s);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(images.raw() + rows[i] * per, per, out.raw() + i * per);
    return out;
  }
};

/// Closed-form recovery of the global label from an image [3,H,W].
template <typename T>
int recover_global_label(const Tensor<T>& image, std::size_t classes) {
  const std::size_t C = image.dim(0), HW = image.size() / C;
  int best = 0;
  double best_v = -1;
  for (std::size_t c = 0; c < std::min(C, classes); ++c) {
    double s = 0;
    for (std::size_t i = 0; i < HW; ++i) s += std::abs(static_cast<double>(image[c * HW + i]) - 0.5);
    if (s > best_v) {
      best_v = s;
      best = static_cast<int>(c);
    }
  }
  return best;
}

template <typename T>
Dataset<T> gen_dataset(std::uint64_t seed, std::size_t n, const DatasetSpec& spec) {
  spec.validate();
  if (n == 0) throw DimensionError("dataset: n must be positive");
  Rng rng(split_seed(seed, "dataset"));
  std::uniform_int_distribution<std::size_t> cls(0, spec.global_classes - 1), cell(0, spec.cells() - 1),
      offset(0, spec.patch_size - spec.marker_size), marker(0, kMarkerClasses - 1), coin(0, 1);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);

  Dataset<T> ds;
  ds.spec = spec;
  const std::size_t C = spec.channels, H = spec.image_h, W = spec.image_w, p = spec.patch_size;
  ds.images = Tensor<T>({n, C, H, W});
  for (std::size_t i = 0; i < n; ++i) {
    const int g = static_cast<int>(cls(rng));
    const bool horizontal = coin(rng) == 1;
    const double ph = phase(rng);
    const GridCoord mc = token_coord(cell(rng), spec.grid_cols());
    const int mk = static_cast<int>(marker(rng));
    const std::size_t oy = offset(rng), ox = offset(rng);
    T* img = ds.images.raw() + i * C * H * W;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          double v = 0.5 + spec.noise * noise(rng);
          if (static_cast<int>(c) == g) {
            const double pos = static_cast<double>(horizontal ? y : x);
            v += spec.stripe_amplitude * std::cos(2.0 * std::numbers::pi * pos / static_cast<double>(p) + ph);
          }
          img[(c * H + y) * W + x] = static_cast<T>(v);
        }
    const double marker_color[kMarkerClasses][3] = {{1.0, 1.0, 1.0}, {1.0, 1.0, 0.0}};
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t dy = 0; dy < spec.marker_size; ++dy)
        for (std::size_t dx = 0; dx < spec.marker_size; ++dx) {
          const std::size_t y = mc.row * p + oy + dy, x = mc.col * p + ox + dx;
          img[(c * H + y) * W + x] = static_cast<T>(marker_color[mk][c]);
        }
    ds.global_labels.push_back(g);
    ds.local_labels.push_back({mc, mk});
    ds.ids.push_back(stable_hash(std::to_string(seed) + ":" + std::to_string(i)));
  }
  return ds;
}

/// Deterministic 80/20 split by id hash: ids whose mixed hash is 0 mod 5 go to eval.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
};

inline bool is_eval_id(std::uint64_t id) {
  std::uint64_t h = id;
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  return h % 5 == 0;
}

template <typename T>
Split split_dataset(const Dataset<T>& ds) {
  Split s;
  for (std::size_t i = 0; i < ds.size(); ++i) (is_eval_id(ds.ids[i]) ? s.eval : s.train).push_back(i);
  return s;
}

}  // namespace mfm
