#pragma once

// Differentiable operations over tape variables. Each op computes its forward
// value eagerly and records a closure that accumulates input gradients.

#include <memory>
#include <numbers>
#include <span>

#include "mfm/autograd.hpp"

namespace mfm {

namespace detail {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

inline bool is_trailing(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "matmul");
  Tensor<T> out = matmul(a.value(), b.value());
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.value().size() / k;
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, m, k, n](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        if (t.requires_grad(a)) kernel::gemm(g.raw(), t.value(b.id).raw(), t.grad(a.id).raw(), m, n, k, false, true, true);
        if (t.requires_grad(b)) kernel::gemm(t.value(a.id).raw(), g.raw(), t.grad(b.id).raw(), k, m, n, true, false, true);
      },
      "matmul");
}

/// a: [B,M,K]; b: [B,K,N], or [B,N,K] when trans_b.
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_b = false) {
  detail::require_same_tape(a, b, "bmm");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
    throw DimensionError("bmm expects matching rank-3 batches, got " + to_string(av.shape()) + " x " +
                         to_string(bv.shape()));
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = trans_b ? bv.dim(1) : bv.dim(2);
  if ((trans_b ? bv.dim(2) : bv.dim(1)) != k)
    throw DimensionError("bmm inner dimension mismatch: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  Tensor<T> out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i)
    kernel::gemm(av.raw() + i * m * k, bv.raw() + i * k * n, out.raw() + i * m * n, m, k, n, false, trans_b, false);
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, batch, m, k, n, trans_b](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const T* A = t.value(a.id).raw();
        const T* B = t.value(b.id).raw();
        const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
        T* dA = ga ? t.grad(a.id).raw() : nullptr;
        T* dB = gb ? t.grad(b.id).raw() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          const T* G = g.raw() + i * m * n;
          // dA = G * op(B)^T
          if (ga) kernel::gemm(G, B + i * k * n, dA + i * m * k, m, n, k, false, !trans_b, true);
          if (gb) {
            if (trans_b)  // dB[N,K] = G^T A
              kernel::gemm(G, A + i * m * k, dB + i * k * n, n, m, k, true, false, true);
            else  // dB[K,N] = A^T G
              kernel::gemm(A + i * m * k, G, dB + i * k * n, k, m, n, true, false, true);
          }
        }
      },
      "bmm");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "add");
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape<T>& t, std::size_t self) {
        if (t.requires_grad(a)) t.grad(a.id) += t.grad(self);
        if (t.requires_grad(b)) t.grad(b.id) += t.grad(self);
      },
      "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "sub");
  a.value().require_same_shape(b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(a)) t.grad(a.id) += g;
        if (t.requires_grad(b)) {
          auto& gb = t.grad(b.id);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      },
      "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "mul");
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(a)) {
          auto& ga = t.grad(a.id);
          const auto& bv = t.value(b.id);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b)) {
          auto& gb = t.grad(b.id);
          const auto& av = t.value(a.id);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record(
      std::move(out), {a},
      [a, s](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
      },
      "scale");
}

/// x + b where b's shape equals the trailing dimensions of x (bias, positional table).
template <typename T>
Var<T> add_trailing(Var<T> x, Var<T> b) {
  detail::require_same_tape(x, b, "add_trailing");
  if (!detail::is_trailing(x.shape(), b.shape()))
    throw DimensionError("add_trailing: " + to_string(b.shape()) + " is not a trailing shape of " +
                         to_string(x.shape()));
  const std::size_t inner = b.value().size();
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % inner];
  return x.tape->record(
      std::move(out), {x, b},
      [x, b, inner](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(x)) t.grad(x.id) += g;
        if (t.requires_grad(b)) {
          auto& gb = t.grad(b.id);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
        }
      },
      "add_trailing");
}

/// x * s where s's shape equals the trailing dimensions of x.
template <typename T>
Var<T> mul_trailing(Var<T> x, Var<T> s) {
  detail::require_same_tape(x, s, "mul_trailing");
  if (!detail::is_trailing(x.shape(), s.shape()))
    throw DimensionError("mul_trailing: " + to_string(s.shape()) + " is not a trailing shape of " +
                         to_string(x.shape()));
  const std::size_t inner = s.value().size();
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s.value()[i % inner];
  return x.tape->record(
      std::move(out), {x, s},
      [x, s, inner](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(x)) {
          auto& gx = t.grad(x.id);
          const auto& sv = t.value(s.id);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv[i % inner];
        }
        if (t.requires_grad(s)) {
          auto& gs = t.grad(s.id);
          const auto& xv = t.value(x.id);
          for (std::size_t i = 0; i < g.size(); ++i) gs[i % inner] += g[i] * xv[i];
        }
      },
      "mul_trailing");
}

/// x W + b for x [..., In], W [In, Out], b [Out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_trailing(matmul(x, w), b);
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  Tensor<T> out = x.value();
  // derivative is cached at forward time, erf is the hot spot
  auto deriv = std::make_shared<std::vector<T>>();
  const bool need = x.tape->requires_grad(x);
  if (need) deriv->resize(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = out[i];
    const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    if (need) (*deriv)[i] = cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
    out[i] = v * cdf;
  }
  return x.tape->record(
      std::move(out), {x},
      [x, deriv](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad(x.id);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*deriv)[i];
      },
      "gelu");
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(kLayerNormEps)) {
  Tensor<T> out = layer_norm(x.value(), gamma.value(), beta.value(), eps);
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, eps](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& xv = t.value(x.id);
        const auto& gam = t.value(gamma.id);
        const std::size_t d = xv.shape().back(), rows = xv.size() / d;
        const bool gx = t.requires_grad(x), gg = t.requires_grad(gamma), gbeta = t.requires_grad(beta);
        std::vector<T> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = xv.raw() + r * d;
          const T* gr = g.raw() + r * d;
          T mean = 0;
          for (std::size_t j = 0; j < d; ++j) mean += xr[j];
          mean /= T(d);
          T var = 0;
          for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
          var /= T(d);
          const T inv = T(1) / std::sqrt(var + eps);
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mean) * inv;
            dxhat[j] = gr[j] * gam[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
          }
          m1 /= T(d);
          m2 /= T(d);
          if (gx) {
            T* dx = t.grad(x.id).raw() + r * d;
            for (std::size_t j = 0; j < d; ++j) dx[j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
          }
          if (gg) {
            auto& dg = t.grad(gamma.id);
            for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xhat[j];
          }
          if (gbeta) {
            auto& db = t.grad(beta.id);
            for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
          }
        }
      },
      "layer_norm");
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  Tensor<T> out = softmax(x.value(), axis);
  return x.tape->record(
      std::move(out), {x},
      [x, axis](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto [outer, n, inner] = kernel::split_axis(y.shape(), axis);
        auto& gx = t.grad(x.id);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
          }
      },
      "softmax");
}

/// Mean over one axis; the axis is removed from the shape.
template <typename T>
Var<T> mean_axis(Var<T> x, std::size_t axis) {
  auto [outer, n, inner] = kernel::split_axis(x.shape(), axis);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  if (s.empty()) s = {1};
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x.value()[(o * n + j) * inner + i];
  for (auto& v : out.data()) v /= T(n);
  return x.tape->record(
      std::move(out), {x},
      [x, outer, n, inner](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad(x.id);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < inner; ++i) gx[(o * n + j) * inner + i] += g[o * inner + i] / T(n);
      },
      "mean_axis");
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (auto v : x.value().data()) s += v;
  return x.tape->record(
      Tensor<T>::scalar(s), {x},
      [x](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        for (auto& v : t.grad(x.id).data()) v += g;
      },
      "sum");
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(
      std::move(out), {x},
      [x](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad(x.id);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

/// [A,B,C,D] -> [A,C,B,D]; used to split and merge attention heads.
template <typename T>
Var<T> swap_axes_12(Var<T> x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("swap_axes_12 expects rank 4, got " + to_string(s));
  const std::size_t A = s[0], B = s[1], C = s[2], D = s[3];
  Tensor<T> out({A, C, B, D});
  const auto& xv = x.value();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(xv.raw() + ((a * B + b) * C + c) * D, D, out.raw() + ((a * C + c) * B + b) * D);
  return x.tape->record(
      std::move(out), {x},
      [x, A, B, C, D](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad(x.id);
        for (std::size_t a = 0; a < A; ++a)
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const T* src = g.raw() + ((a * C + c) * B + b) * D;
              T* dst = gx.raw() + ((a * B + b) * C + c) * D;
              for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
            }
      },
      "swap_axes_12");
}

/// Transposes the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Var<T> transpose(Var<T> x) {
  const auto& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw DimensionError("transpose expects rank 2 or 3, got " + to_string(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1, m = s[s.size() - 2], n = s.back();
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor<T> out(os);
  const auto& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
  return x.tape->record(
      std::move(out), {x},
      [x, batch, m, n](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad(x.id);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
      },
      "transpose");
}

/// Concatenation along the last dimension; leading dimensions must agree.
template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "concat_last");
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    throw DimensionError("concat_last leading shape mismatch: " + to_string(sa) + " vs " + to_string(sb));
  const std::size_t da = sa.back(), db = sb.back(), rows = a.value().size() / da;
  Shape so = sa;
  so.back() = da + db;
  Tensor<T> out(so);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().raw() + r * da, da, out.raw() + r * (da + db));
    std::copy_n(b.value().raw() + r * db, db, out.raw() + r * (da + db) + da);
  }
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, da, db, rows](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
        for (std::size_t r = 0; r < rows; ++r) {
          if (ga) {
            T* d = t.grad(a.id).raw() + r * da;
            for (std::size_t j = 0; j < da; ++j) d[j] += g[r * (da + db) + j];
          }
          if (gb) {
            T* d = t.grad(b.id).raw() + r * db;
            for (std::size_t j = 0; j < db; ++j) d[j] += g[r * (da + db) + da + j];
          }
        }
      },
      "concat_last");
}

/// sum_k w[k] * xs[k]; all xs share a shape, w has one entry per term.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, Var<T> w) {
  if (xs.empty()) throw DimensionError("weighted_sum needs at least one term");
  if (w.value().size() != xs.size())
    throw DimensionError("weighted_sum: " + std::to_string(xs.size()) + " terms but " +
                         std::to_string(w.value().size()) + " weights");
  Tensor<T> out(xs[0].shape());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    xs[k].value().require_same_shape(out, "weighted_sum");
    const T wk = w.value()[k];
    const auto& xv = xs[k].value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * xv[i];
  }
  std::vector<Var<T>> inputs = xs;
  inputs.push_back(w);
  return w.tape->record(
      std::move(out), inputs,
      [xs, w](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& wv = t.value(w.id);
        const bool gw = t.requires_grad(w);
        for (std::size_t k = 0; k < xs.size(); ++k) {
          if (t.requires_grad(xs[k])) {
            auto& gx = t.grad(xs[k].id);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += wv[k] * g[i];
          }
          if (gw) {
            const auto& xv = t.value(xs[k].id);
            T acc = 0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
            t.grad(w.id)[k] += acc;
          }
        }
      },
      "weighted_sum");
}

/// Mean softmax cross-entropy of logits [R,C] against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size())
    throw DimensionError("cross_entropy expects [R,C] logits with R labels, got " + to_string(lv.shape()) + " and " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t rows = lv.dim(0), cls = lv.dim(1);
  Tensor<T> probs = softmax(lv, 1);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= cls) throw DimensionError("cross_entropy label out of range");
    const T* row = lv.raw() + r * cls;
    const T mx = *std::max_element(row, row + cls);
    T s = 0;
    for (std::size_t c = 0; c < cls; ++c) s += std::exp(row[c] - mx);
    loss -= row[y] - mx - std::log(s);
  }
  loss /= T(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->record(
      Tensor<T>::scalar(loss), {logits},
      [logits, probs = std::move(probs), lab = std::move(lab), rows, cls](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / T(rows);
        auto& gl = t.grad(logits.id);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cls; ++c)
            gl[r * cls + c] += g * (probs[r * cls + c] - (static_cast<int>(c) == lab[r] ? T(1) : T(0)));
      },
      "cross_entropy");
}

/// Mean squared error against a constant target.
template <typename T>
Var<T> mse(Var<T> pred, const Tensor<T>& target) {
  pred.value().require_same_shape(target, "mse");
  const std::size_t n = target.size();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.value()[i] - target[i];
    loss += d * d;
  }
  loss /= T(n);
  return pred.tape->record(
      Tensor<T>::scalar(loss), {pred},
      [pred, target, n](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] * T(2) / T(n);
        auto& gp = t.grad(pred.id);
        const auto& pv = t.value(pred.id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g * (pv[i] - target[i]);
      },
      "mse");
}

/// Scales each vector along the last axis to unit L2 norm.
template <typename T>
Var<T> l2_normalize(Var<T> x, T eps = T(1e-12)) {
  const std::size_t d = x.shape().back(), rows = x.value().size() / d;
  Tensor<T> out = x.value();
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += out[r * d + j] * out[r * d + j];
    norms[r] = std::sqrt(s + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= norms[r];
  }
  return x.tape->record(
      std::move(out), {x},
      [x, d, rows, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& gx = t.grad(x.id);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
        }
      },
      "l2_normalize");
}

/// Selects rows of x viewed as [R, F] (F = last dim), producing [indices.size(), F].
template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> indices) {
  const std::size_t f = x.shape().back(), rows = x.value().size() / f;
  Tensor<T> out({indices.size(), f});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw DimensionError("gather_rows index out of range");
    std::copy_n(x.value().raw() + indices[i] * f, f, out.raw() + i * f);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape->record(
      std::move(out), {x},
      [x, f, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad(x.id);
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < f; ++j) gx[idx[i] * f + j] += g[i * f + j];
      },
      "gather_rows");
}

/// 3x3 stride-1 zero-padded convolution over a token grid.
/// x: [B, rows*cols, Din] (row-major spatial order), kernel: [Dout, Din, 3, 3].
template <typename T>
Var<T> conv3x3_grid(Var<T> x, Var<T> kernel_w, std::size_t rows, std::size_t cols) {
  detail::require_same_tape(x, kernel_w, "conv3x3_grid");
  const auto& xs = x.shape();
  const auto& ks = kernel_w.shape();
  if (xs.size() != 3 || xs[1] != rows * cols)
    throw DimensionError("conv3x3_grid: grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " does not match tokens of " + to_string(xs));
  if (ks.size() != 4 || ks[1] != xs[2] || ks[2] != 3 || ks[3] != 3)
    throw DimensionError("conv3x3_grid: kernel " + to_string(ks) + " incompatible with input " + to_string(xs));
  const std::size_t batch = xs[0], tokens = xs[1], din = xs[2], dout = ks[0], taps = 9;
  // im2col: [B*T, 9*Din], column = tap*Din + i
  Tensor<T> cols_mat({batch * tokens, taps * din});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        T* dst = cols_mat.raw() + ((b * tokens) + r * cols + c) * taps * din;
        for (std::size_t tap = 0; tap < taps; ++tap) {
          const long rr = static_cast<long>(r) + static_cast<long>(tap / 3) - 1;
          const long cc = static_cast<long>(c) + static_cast<long>(tap % 3) - 1;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols)) continue;
          std::copy_n(xv.raw() + (b * tokens + static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)) * din,
                      din, dst + tap * din);
        }
      }
  // W: [9*Din, Dout] with W[tap*Din+i, o] = K[o, i, tap/3, tap%3]
  Tensor<T> wmat({taps * din, dout});
  const auto& kv = kernel_w.value();
  for (std::size_t o = 0; o < dout; ++o)
    for (std::size_t i = 0; i < din; ++i)
      for (std::size_t tap = 0; tap < taps; ++tap) wmat[(tap * din + i) * dout + o] = kv[(o * din + i) * taps + tap];
  Tensor<T> out({batch, tokens, dout});
  kernel::gemm(cols_mat.raw(), wmat.raw(), out.raw(), batch * tokens, taps * din, dout, false, false, false);
  return x.tape->record(
      std::move(out), {x, kernel_w},
      [x, kernel_w, cols_mat = std::move(cols_mat), wmat = std::move(wmat), batch, tokens, din, dout, rows, cols,
       taps](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(kernel_w)) {
          Tensor<T> dw({taps * din, dout});
          kernel::gemm(cols_mat.raw(), g.raw(), dw.raw(), taps * din, batch * tokens, dout, true, false, false);
          auto& gk = t.grad(kernel_w.id);
          for (std::size_t o = 0; o < dout; ++o)
            for (std::size_t i = 0; i < din; ++i)
              for (std::size_t tap = 0; tap < taps; ++tap) gk[(o * din + i) * taps + tap] += dw[(tap * din + i) * dout + o];
        }
        if (t.requires_grad(x)) {
          Tensor<T> dcols({batch * tokens, taps * din});
          kernel::gemm(g.raw(), wmat.raw(), dcols.raw(), batch * tokens, dout, taps * din, false, true, false);
          auto& gx = t.grad(x.id);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c) {
                const T* src = dcols.raw() + ((b * tokens) + r * cols + c) * taps * din;
                for (std::size_t tap = 0; tap < taps; ++tap) {
                  const long rr = static_cast<long>(r) + static_cast<long>(tap / 3) - 1;
                  const long cc = static_cast<long>(c) + static_cast<long>(tap % 3) - 1;
                  if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols)) continue;
                  T* dst = gx.raw() + (b * tokens + static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)) * din;
                  for (std::size_t i = 0; i < din; ++i) dst[i] += src[tap * din + i];
                }
              }
        }
      },
      "conv3x3_grid");
}

/// Batch statistics of x viewed as [R, C] per channel (population variance).
template <typename T>
std::pair<std::vector<T>, std::vector<T>> channel_stats(const Tensor<T>& x) {
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  std::vector<T> mean(c, T(0)), var(c, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) mean[j] += x[r * c + j];
  for (auto& m : mean) m /= T(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const T d = x[r * c + j] - mean[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= T(rows);
  return {mean, var};
}

/// Batch normalization over every axis but the last, using batch statistics.
template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> scale_v, Var<T> shift_v, T eps = T(kLayerNormEps)) {
  const std::size_t c = x.shape().back(), rows = x.value().size() / c;
  if (scale_v.value().size() != c || shift_v.value().size() != c)
    throw DimensionError("batch_norm: channel count mismatch for " + to_string(x.shape()));
  auto [mean, var] = channel_stats(x.value());
  std::vector<T> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = T(1) / std::sqrt(var[j] + eps);
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (x.value()[r * c + j] - mean[j]) * inv[j];
      out[r * c + j] = scale_v.value()[j] * xhat[r * c + j] + shift_v.value()[j];
    }
  return x.tape->record(
      std::move(out), {x, scale_v, shift_v},
      [x, scale_v, shift_v, c, rows, inv = std::move(inv), xhat = std::move(xhat)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& sc = t.value(scale_v.id);
        std::vector<T> sum_d(c, T(0)), sum_dx(c, T(0));
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            sum_d[j] += g[r * c + j];
            sum_dx[j] += g[r * c + j] * xhat[r * c + j];
          }
        if (t.requires_grad(scale_v)) {
          auto& gs = t.grad(scale_v.id);
          for (std::size_t j = 0; j < c; ++j) gs[j] += sum_dx[j];
        }
        if (t.requires_grad(shift_v)) {
          auto& gb = t.grad(shift_v.id);
          for (std::size_t j = 0; j < c; ++j) gb[j] += sum_d[j];
        }
        if (t.requires_grad(x)) {
          auto& gx = t.grad(x.id);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              const T m1 = sc[j] * sum_d[j] / T(rows), m2 = sc[j] * sum_dx[j] / T(rows);
              gx[r * c + j] += inv[j] * (sc[j] * g[r * c + j] - m1 - xhat[r * c + j] * m2);
            }
        }
      },
      "batch_norm_train");
}

/// Batch normalization with fixed (running) statistics: an affine map per channel.
template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> scale_v, Var<T> shift_v, std::span<const T> mean, std::span<const T> var,
                       T eps = T(kLayerNormEps)) {
  const std::size_t c = x.shape().back(), rows = x.value().size() / c;
  if (scale_v.value().size() != c || shift_v.value().size() != c || mean.size() != c || var.size() != c)
    throw DimensionError("batch_norm: channel count mismatch for " + to_string(x.shape()));
  std::vector<T> inv(c), mu(mean.begin(), mean.end());
  for (std::size_t j = 0; j < c; ++j) inv[j] = T(1) / std::sqrt(var[j] + eps);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j)
      out[r * c + j] = scale_v.value()[j] * (x.value()[r * c + j] - mu[j]) * inv[j] + shift_v.value()[j];
  return x.tape->record(
      std::move(out), {x, scale_v, shift_v},
      [x, scale_v, shift_v, c, rows, inv = std::move(inv), mu = std::move(mu)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& xv = t.value(x.id);
        const auto& sc = t.value(scale_v.id);
        const bool gx = t.requires_grad(x), gs = t.requires_grad(scale_v), gb = t.requires_grad(shift_v);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const T gi = g[r * c + j];
            if (gx) t.grad(x.id)[r * c + j] += gi * sc[j] * inv[j];
            if (gs) t.grad(scale_v.id)[j] += gi * (xv[r * c + j] - mu[j]) * inv[j];
            if (gb) t.grad(shift_v.id)[j] += gi;
          }
      },
      "batch_norm_eval");
}

}  // namespace mfm
