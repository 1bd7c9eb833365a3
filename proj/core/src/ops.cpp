#include "tanet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "tanet/gradcheck.hpp"

namespace tanet {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
bool tracks(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

template <typename T, typename... Rest>
bool tracks(const Tensor<T>& t, const Rest&... rest) {
  return tracks(t) || tracks(rest...);
}

template <typename... Ts>
bool recording(const Ts&... ts) {
  return GradMode::enabled() && tracks(ts...);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                " input, got shape " + to_string(t.shape()));
}

struct ConvGeometry {
  std::int64_t batch, cin, h, w, cout, k, ho, wo;
  int stride, pad, groups;
  std::int64_t cin_g() const { return cin / groups; }
  std::int64_t cout_g() const { return cout / groups; }
  std::int64_t patch() const { return cin_g() * k * k; }
  std::int64_t pixels() const { return ho * wo; }
};

// Column buffer for one group over the whole batch: [patch, batch * pixels].
template <typename T>
void im2col(const T* x, const ConvGeometry& g, int group, T* col) {
  const std::int64_t cols = g.batch * g.pixels();
  const std::int64_t c0 = group * g.cin_g();
  for (std::int64_t c = 0; c < g.cin_g(); ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::int64_t b = 0; b < g.batch; ++b) {
          const T* plane = x + (b * g.cin + c0 + c) * g.h * g.w;
          T* dst = row + b * g.pixels();
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            T* drow = dst + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(drow, drow + g.wo, T(0));
              continue;
            }
            const T* srow = plane + iy * g.w;
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, int group, T* dx) {
  const std::int64_t cols = g.batch * g.pixels();
  const std::int64_t c0 = group * g.cin_g();
  for (std::int64_t c = 0; c < g.cin_g(); ++c) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::int64_t b = 0; b < g.batch; ++b) {
          T* plane = dx + (b * g.cin + c0 + c) * g.h * g.w;
          const T* src = row + b * g.pixels();
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            T* drow = plane + iy * g.w;
            const T* srow = src + oy * g.wo;
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// [B, C, P] slice of channels [c0, c0+n) <-> [n, B*P]
template <typename T>
void gather_channels(const T* src, std::int64_t batch, std::int64_t channels, std::int64_t c0,
                     std::int64_t n, std::int64_t pixels, T* dst) {
  for (std::int64_t c = 0; c < n; ++c) {
    for (std::int64_t b = 0; b < batch; ++b) {
      const T* s = src + (b * channels + c0 + c) * pixels;
      std::copy(s, s + pixels, dst + (c * batch + b) * pixels);
    }
  }
}

template <typename T>
void scatter_channels(const T* src, std::int64_t batch, std::int64_t channels, std::int64_t c0,
                      std::int64_t n, std::int64_t pixels, T* dst) {
  for (std::int64_t c = 0; c < n; ++c) {
    for (std::int64_t b = 0; b < batch; ++b) {
      const T* s = src + (c * batch + b) * pixels;
      std::copy(s, s + pixels, dst + (b * channels + c0 + c) * pixels);
    }
  }
}

template <typename T>
bool is_pointwise(const ConvGeometry& g) {
  return g.k == 1 && g.stride == 1 && g.pad == 0;
}

// 1x1 stride-1 convolution: each batch item is already a [C, P] matrix, so
// every (item, group) is one GEMM on the tensor memory.
template <typename T>
Tensor<T> conv2d_pointwise(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           const ConvGeometry& g) {
  Tensor<T> out({g.batch, g.cout, g.ho, g.wo});
  const std::int64_t P = g.pixels();
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (int grp = 0; grp < g.groups; ++grp) {
      CMapR<T> w(weight.ptr() + grp * g.cout_g() * g.cin_g(), g.cout_g(), g.cin_g());
      CMapR<T> x(input.ptr() + (b * g.cin + grp * g.cin_g()) * P, g.cin_g(), P);
      MapR<T> y(out.ptr() + (b * g.cout + grp * g.cout_g()) * P, g.cout_g(), P);
      y.noalias() = w * x;
      if (bias.defined()) {
        for (std::int64_t o = 0; o < g.cout_g(); ++o) y.row(o).array() += bias.ptr()[grp * g.cout_g() + o];
      }
    }
  }
  if (recording(input, weight, bias)) {
    out.set_requires_grad(true);
    Tape::current().record([input, weight, bias, out, g]() mutable {
      if (!out.has_grad()) return;
      const std::int64_t P = g.pixels();
      const T* gy = out.grad().data();
      for (std::int64_t b = 0; b < g.batch; ++b) {
        for (int grp = 0; grp < g.groups; ++grp) {
          CMapR<T> dy(gy + (b * g.cout + grp * g.cout_g()) * P, g.cout_g(), P);
          if (bias.defined() && bias.requires_grad()) {
            auto gb = bias.ensure_grad();
            for (std::int64_t o = 0; o < g.cout_g(); ++o) gb[grp * g.cout_g() + o] += dy.row(o).sum();
          }
          if (weight.requires_grad()) {
            CMapR<T> x(input.ptr() + (b * g.cin + grp * g.cin_g()) * P, g.cin_g(), P);
            MapR<T> dw(weight.ensure_grad().data() + grp * g.cout_g() * g.cin_g(), g.cout_g(), g.cin_g());
            dw.noalias() += dy * x.transpose();
          }
          if (input.requires_grad()) {
            CMapR<T> w(weight.ptr() + grp * g.cout_g() * g.cin_g(), g.cout_g(), g.cin_g());
            MapR<T> dx(input.ensure_grad().data() + (b * g.cin + grp * g.cin_g()) * P, g.cin_g(), P);
            dx.noalias() += w.transpose() * dy;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  require(options.stride >= 1, "conv2d: stride must be positive");
  require(options.padding >= 0, "conv2d: padding must be non-negative");
  require(options.groups >= 1, "conv2d: groups must be positive");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = options.stride;
  g.pad = options.padding;
  g.groups = options.groups;
  require(weight.dim(3) == g.k, "conv2d: only square kernels are supported, got weight " +
                                    to_string(weight.shape()));
  require(g.cin % g.groups == 0 && g.cout % g.groups == 0,
          "conv2d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
              " not divisible by groups " + std::to_string(g.groups));
  require(weight.dim(1) == g.cin_g(), "conv2d: input has " + std::to_string(g.cin) +
                                          " channels but weight " + to_string(weight.shape()) +
                                          " expects " + std::to_string(weight.dim(1) * g.groups));
  require(g.k <= g.h + 2 * g.pad && g.k <= g.w + 2 * g.pad,
          "conv2d: kernel " + std::to_string(g.k) + " larger than padded input " +
              to_string(input.shape()));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == g.cout,
            "conv2d: bias shape " + to_string(bias.shape()) + " does not match Cout " +
                std::to_string(g.cout));
  }
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  require(g.ho >= 1 && g.wo >= 1, "conv2d: zero-sized output");
  if (is_pointwise<T>(g)) return conv2d_pointwise(input, weight, bias, g);

  Tensor<T> out({g.batch, g.cout, g.ho, g.wo});
  const std::int64_t cols = g.batch * g.pixels();
  AlignedVector<T> col(static_cast<std::size_t>(g.patch() * cols));
  AlignedVector<T> res(static_cast<std::size_t>(g.cout_g() * cols));
  for (int grp = 0; grp < g.groups; ++grp) {
    im2col(input.ptr(), g, grp, col.data());
    CMapR<T> w(weight.ptr() + grp * g.cout_g() * g.patch(), g.cout_g(), g.patch());
    CMapR<T> c(col.data(), g.patch(), cols);
    MapR<T> r(res.data(), g.cout_g(), cols);
    r.noalias() = w * c;
    if (bias.defined()) {
      for (std::int64_t o = 0; o < g.cout_g(); ++o) r.row(o).array() += bias.ptr()[grp * g.cout_g() + o];
    }
    scatter_channels(res.data(), g.batch, g.cout, grp * g.cout_g(), g.cout_g(), g.pixels(),
                     out.ptr());
  }

  if (recording(input, weight, bias)) {
    out.set_requires_grad(true);
    Tape::current().record([input, weight, bias, out, g]() mutable {
      if (!out.has_grad()) return;
      const std::int64_t cols = g.batch * g.pixels();
      AlignedVector<T> dres(static_cast<std::size_t>(g.cout_g() * cols));
      AlignedVector<T> col(static_cast<std::size_t>(g.patch() * cols));
      AlignedVector<T> dcol;
      const bool need_dx = input.requires_grad();
      const bool need_dw = weight.requires_grad();
      if (need_dx) dcol.resize(col.size());
      for (int grp = 0; grp < g.groups; ++grp) {
        gather_channels(out.grad().data(), g.batch, g.cout, grp * g.cout_g(), g.cout_g(),
                        g.pixels(), dres.data());
        CMapR<T> dr(dres.data(), g.cout_g(), cols);
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.ensure_grad();
          for (std::int64_t o = 0; o < g.cout_g(); ++o) gb[grp * g.cout_g() + o] += dr.row(o).sum();
        }
        if (need_dw) {
          im2col(input.ptr(), g, grp, col.data());
          CMapR<T> c(col.data(), g.patch(), cols);
          MapR<T> dw(weight.ensure_grad().data() + grp * g.cout_g() * g.patch(), g.cout_g(),
                     g.patch());
          dw.noalias() += dr * c.transpose();
        }
        if (need_dx) {
          CMapR<T> w(weight.ptr() + grp * g.cout_g() * g.patch(), g.cout_g(), g.patch());
          MapR<T> dc(dcol.data(), g.patch(), cols);
          dc.noalias() = w.transpose() * dr;
          auto dx = input.ensure_grad();
          col2im(dcol.data(), g, grp, dx.data());
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (KinkMonitor::active()) {
    std::vector<bool> bits(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) bits[i] = x[i] > T(0);
    KinkMonitor::note_bits(bits);
  }
  if (recording(input)) {
    out.set_requires_grad(true);
    Tape::current().record([input, out]() mutable {
      if (!out.has_grad()) return;
      const auto x = input.data();
      const auto gy = out.grad();
      auto gx = input.ensure_grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > T(0)) gx[i] += gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
  if (recording(input)) {
    out.set_requires_grad(true);
    Tape::current().record([input, out]() mutable {
      if (!out.has_grad()) return;
      const auto y = out.data();
      const auto gy = out.grad();
      auto gx = input.ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(a.shape());
  const auto x = a.data();
  const auto y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tape::current().record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto gz = out.grad();
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gz[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const auto x = a.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * factor;
  if (recording(a)) {
    out.set_requires_grad(true);
    Tape::current().record([a, out, factor]() mutable {
      if (!out.has_grad()) return;
      const auto gz = out.grad();
      auto g = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gz[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_channel_gate(const Tensor<T>& features, const Tensor<T>& gate) {
  require_rank(features, 4, "mul_channel_gate");
  require(gate.shape() == Shape{features.dim(0), features.dim(1), 1, 1},
          "mul_channel_gate: gate " + to_string(gate.shape()) + " does not match features " +
              to_string(features.shape()));
  const std::int64_t planes = features.dim(0) * features.dim(1);
  const std::int64_t pixels = features.dim(2) * features.dim(3);
  Tensor<T> out(features.shape());
  for (std::int64_t p = 0; p < planes; ++p) {
    const T s = gate.ptr()[p];
    const T* x = features.ptr() + p * pixels;
    T* y = out.ptr() + p * pixels;
    for (std::int64_t i = 0; i < pixels; ++i) y[i] = x[i] * s;
  }
  if (recording(features, gate)) {
    out.set_requires_grad(true);
    Tape::current().record([features, gate, out, planes, pixels]() mutable {
      if (!out.has_grad()) return;
      const T* gy = out.grad().data();
      const bool need_f = features.requires_grad();
      const bool need_g = gate.requires_grad();
      T* gf = need_f ? features.ensure_grad().data() : nullptr;
      T* gg = need_g ? gate.ensure_grad().data() : nullptr;
      for (std::int64_t p = 0; p < planes; ++p) {
        const T s = gate.ptr()[p];
        const T* x = features.ptr() + p * pixels;
        const T* g = gy + p * pixels;
        T acc = T(0);
        for (std::int64_t i = 0; i < pixels; ++i) {
          if (need_f) gf[p * pixels + i] += g[i] * s;
          acc += g[i] * x[i];
        }
        if (need_g) gg[p] += acc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  Tensor<T> out({1}, total);
  if (recording(a)) {
    out.set_requires_grad(true);
    Tape::current().record([a, out]() mutable {
      if (!out.has_grad()) return;
      const T g0 = out.grad()[0];
      for (auto& g : a.ensure_grad()) g += g0;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  Tensor<T> out = a.reshaped(std::move(shape));
  if (recording(a)) {
    out.set_requires_grad(true);
    Tape::current().record([a, out]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      auto gx = a.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- batch norm

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool training, T momentum, T eps) {
  require_rank(input, 4, "batch_norm");
  const std::int64_t batch = input.dim(0);
  const std::int64_t channels = input.dim(1);
  const std::int64_t pixels = input.dim(2) * input.dim(3);
  const std::int64_t count = batch * pixels;
  require(gamma.shape() == Shape{channels} && beta.shape() == Shape{channels},
          "batch_norm: gamma/beta must have shape [" + std::to_string(channels) + "]");
  require(stats.running_mean.shape() == Shape{channels} &&
              stats.running_var.shape() == Shape{channels},
          "batch_norm: running stats must have shape [" + std::to_string(channels) + "]");
  if (training && count < 2) {
    throw std::invalid_argument(
        "batch_norm: train mode needs at least 2 values per channel, got " +
        std::to_string(count));
  }

  std::vector<T> mu(channels), inv_std(channels);
  if (training) {
    for (std::int64_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* x = input.ptr() + (b * channels + c) * pixels;
        for (std::int64_t i = 0; i < pixels; ++i) s += x[i];
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* x = input.ptr() + (b * channels + c) * pixels;
        for (std::int64_t i = 0; i < pixels; ++i) {
          const double d = x[i] - m;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mu[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const T unbiased = static_cast<T>(ss / static_cast<double>(count - 1));
      auto rm = stats.running_mean.data();
      auto rv = stats.running_var.data();
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < channels; ++c) {
      mu[c] = stats.running_mean.ptr()[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var.ptr()[c] + eps);
    }
  }

  Tensor<T> out(input.shape());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* x = input.ptr() + (b * channels + c) * pixels;
      T* y = out.ptr() + (b * channels + c) * pixels;
      const T a = gamma.ptr()[c] * inv_std[c];
      const T shift = beta.ptr()[c] - a * mu[c];
      for (std::int64_t i = 0; i < pixels; ++i) y[i] = a * x[i] + shift;
    }
  }

  if (recording(input, gamma, beta)) {
    out.set_requires_grad(true);
    Tape::current().record([input, gamma, beta, out, mu, inv_std, training, batch, channels,
                            pixels, count]() mutable {
      if (!out.has_grad()) return;
      const T* gy = out.grad().data();
      T* gx = input.requires_grad() ? input.ensure_grad().data() : nullptr;
      T* gg = gamma.requires_grad() ? gamma.ensure_grad().data() : nullptr;
      T* gb = beta.requires_grad() ? beta.ensure_grad().data() : nullptr;
      for (std::int64_t c = 0; c < channels; ++c) {
        T sum_g = T(0), sum_gxhat = T(0);
        for (std::int64_t b = 0; b < batch; ++b) {
          const std::int64_t off = (b * channels + c) * pixels;
          for (std::int64_t i = 0; i < pixels; ++i) {
            const T xhat = (input.ptr()[off + i] - mu[c]) * inv_std[c];
            sum_g += gy[off + i];
            sum_gxhat += gy[off + i] * xhat;
          }
        }
        if (gg) gg[c] += sum_gxhat;
        if (gb) gb[c] += sum_g;
        if (!gx) continue;
        const T a = gamma.ptr()[c] * inv_std[c];
        const T n = static_cast<T>(count);
        for (std::int64_t b = 0; b < batch; ++b) {
          const std::int64_t off = (b * channels + c) * pixels;
          for (std::int64_t i = 0; i < pixels; ++i) {
            if (training) {
              const T xhat = (input.ptr()[off + i] - mu[c]) * inv_std[c];
              gx[off + i] += a * (gy[off + i] - sum_g / n - xhat * sum_gxhat / n);
            } else {
              gx[off + i] += a * gy[off + i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- linear

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const std::int64_t batch = input.dim(0), features = input.dim(1), outputs = weight.dim(0);
  require(weight.dim(1) == features, "linear: input features " + std::to_string(features) +
                                         " vs weight " + to_string(weight.shape()));
  require(bias.shape() == Shape{outputs},
          "linear: bias " + to_string(bias.shape()) + " vs " + std::to_string(outputs) + " outputs");
  Tensor<T> out({batch, outputs});
  CMapR<T> x(input.ptr(), batch, features);
  CMapR<T> w(weight.ptr(), outputs, features);
  MapR<T> y(out.ptr(), batch, outputs);
  y.noalias() = x * w.transpose();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t o = 0; o < outputs; ++o) y(b, o) += bias.ptr()[o];
  }
  if (recording(input, weight, bias)) {
    out.set_requires_grad(true);
    Tape::current().record([input, weight, bias, out, batch, features, outputs]() mutable {
      if (!out.has_grad()) return;
      CMapR<T> gy(out.grad().data(), batch, outputs);
      if (input.requires_grad()) {
        MapR<T> gx(input.ensure_grad().data(), batch, features);
        gx.noalias() += gy * CMapR<T>(weight.ptr(), outputs, features);
      }
      if (weight.requires_grad()) {
        MapR<T> gw(weight.ensure_grad().data(), outputs, features);
        gw.noalias() += gy.transpose() * CMapR<T>(input.ptr(), batch, features);
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::int64_t o = 0; o < outputs; ++o) gb[o] += gy.col(o).sum();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- pooling / resizing

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input, 4, "global_avg_pool");
  const std::int64_t planes = input.dim(0) * input.dim(1);
  const std::int64_t pixels = input.dim(2) * input.dim(3);
  Tensor<T> out({input.dim(0), input.dim(1), 1, 1});
  for (std::int64_t p = 0; p < planes; ++p) {
    T s = T(0);
    const T* x = input.ptr() + p * pixels;
    for (std::int64_t i = 0; i < pixels; ++i) s += x[i];
    out.ptr()[p] = s / static_cast<T>(pixels);
  }
  if (recording(input)) {
    out.set_requires_grad(true);
    Tape::current().record([input, out, planes, pixels]() mutable {
      if (!out.has_grad()) return;
      T* gx = input.ensure_grad().data();
      for (std::int64_t p = 0; p < planes; ++p) {
        const T g = out.grad()[p] / static_cast<T>(pixels);
        for (std::int64_t i = 0; i < pixels; ++i) gx[p * pixels + i] += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& input) {
  require_rank(input, 4, "avg_pool2");
  const std::int64_t h = input.dim(2), w = input.dim(3);
  require(h % 2 == 0 && w % 2 == 0,
          "avg_pool2: spatial dims must be even, got " + to_string(input.shape()));
  const std::int64_t planes = input.dim(0) * input.dim(1);
  const std::int64_t ho = h / 2, wo = w / 2;
  Tensor<T> out({input.dim(0), input.dim(1), ho, wo});
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* x = input.ptr() + p * h * w;
    T* y = out.ptr() + p * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const T* r0 = x + (2 * oy) * w;
      const T* r1 = r0 + w;
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        y[oy * wo + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * T(0.25);
      }
    }
  }
  if (recording(input)) {
    out.set_requires_grad(true);
    Tape::current().record([input, out, planes, h, w, ho, wo]() mutable {
      if (!out.has_grad()) return;
      T* gx = input.ensure_grad().data();
      const T* gy = out.grad().data();
      for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const T g = gy[p * ho * wo + oy * wo + ox] * T(0.25);
            T* base = gx + p * h * w + (2 * oy) * w + 2 * ox;
            base[0] += g;
            base[1] += g;
            base[w] += g;
            base[w + 1] += g;
          }
        }
      }
    });
  }
  return out;
}

namespace {
struct LerpTap {
  std::int64_t i0, i1;
  double w1;
};

std::vector<LerpTap> align_corner_taps(std::int64_t in, std::int64_t out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double step = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = static_cast<double>(o) * step;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    i0 = std::clamp<std::int64_t>(i0, 0, in - 1);
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::int64_t out_h, std::int64_t out_w) {
  require_rank(input, 4, "upsample_bilinear");
  require(out_h >= 1 && out_w >= 1, "upsample_bilinear: output dims must be >= 1");
  const std::int64_t h = input.dim(2), w = input.dim(3);
  const std::int64_t planes = input.dim(0) * input.dim(1);
  const auto ty = align_corner_taps(h, out_h);
  const auto tx = align_corner_taps(w, out_w);
  Tensor<T> out({input.dim(0), input.dim(1), out_h, out_w});
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* x = input.ptr() + p * h * w;
    T* y = out.ptr() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& c = tx[static_cast<std::size_t>(ox)];
        const T wx1 = static_cast<T>(c.w1), wx0 = T(1) - wx1;
        T v = wy0 * (wx0 * x[a.i0 * w + c.i0] + wx1 * x[a.i0 * w + c.i1]);
        if (wy1 != T(0)) v += wy1 * (wx0 * x[a.i1 * w + c.i0] + wx1 * x[a.i1 * w + c.i1]);
        y[oy * out_w + ox] = v;
      }
    }
  }
  if (recording(input)) {
    out.set_requires_grad(true);
    Tape::current().record([input, out, planes, h, w, out_h, out_w, ty, tx]() mutable {
      if (!out.has_grad()) return;
      T* gx = input.ensure_grad().data();
      const T* gy = out.grad().data();
      for (std::int64_t p = 0; p < planes; ++p) {
        T* g = gx + p * h * w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const auto& a = ty[static_cast<std::size_t>(oy)];
          const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const auto& c = tx[static_cast<std::size_t>(ox)];
            const T wx1 = static_cast<T>(c.w1), wx0 = T(1) - wx1;
            const T v = gy[p * out_h * out_w + oy * out_w + ox];
            g[a.i0 * w + c.i0] += wy0 * wx0 * v;
            g[a.i0 * w + c.i1] += wy0 * wx1 * v;
            g[a.i1 * w + c.i0] += wy1 * wx0 * v;
            g[a.i1 * w + c.i1] += wy1 * wx1 * v;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- channel plumbing

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const Tensor<T>& first = parts.front();
  require_rank(first, 4, "concat_channels");
  const std::int64_t batch = first.dim(0), h = first.dim(2), w = first.dim(3);
  std::int64_t channels = 0;
  for (const auto& p : parts) {
    require(p.rank() == 4 && p.dim(0) == batch && p.dim(2) == h && p.dim(3) == w,
            "concat_channels: incompatible shapes " + to_string(first.shape()) + " and " +
                to_string(p.shape()));
    channels += p.dim(1);
  }
  const std::int64_t pixels = h * w;
  Tensor<T> out({batch, channels, h, w});
  std::int64_t c0 = 0;
  for (const auto& p : parts) {
    const std::int64_t pc = p.dim(1);
    for (std::int64_t b = 0; b < batch; ++b) {
      std::copy_n(p.ptr() + b * pc * pixels, pc * pixels,
                  out.ptr() + (b * channels + c0) * pixels);
    }
    c0 += pc;
  }
  bool any = false;
  for (const auto& p : parts) any = any || tracks(p);
  if (GradMode::enabled() && any) {
    out.set_requires_grad(true);
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    Tape::current().record([inputs, out, batch, channels, pixels]() mutable {
      if (!out.has_grad()) return;
      std::int64_t c0 = 0;
      for (auto& p : inputs) {
        const std::int64_t pc = p.dim(1);
        if (p.requires_grad()) {
          auto g = p.ensure_grad();
          for (std::int64_t b = 0; b < batch; ++b) {
            const T* src = out.grad().data() + (b * channels + c0) * pixels;
            T* dst = g.data() + b * pc * pixels;
            for (std::int64_t i = 0; i < pc * pixels; ++i) dst[i] += src[i];
          }
        }
        c0 += pc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select_channel_group(const Tensor<T>& input, std::int64_t block,
                               std::span<const int> group) {
  require_rank(input, 4, "select_channel_group");
  const std::int64_t items = input.dim(0), channels = input.dim(1);
  require(block >= 1 && channels % block == 0,
          "select_channel_group: channels " + std::to_string(channels) +
              " not divisible by block " + std::to_string(block));
  require(static_cast<std::int64_t>(group.size()) == items,
          "select_channel_group: need one group index per item");
  const std::int64_t pixels = input.dim(2) * input.dim(3);
  const std::int64_t groups = channels / block;
  Tensor<T> out({items, block, input.dim(2), input.dim(3)});
  std::vector<int> index(group.begin(), group.end());
  for (std::int64_t m = 0; m < items; ++m) {
    require(index[m] >= 0 && index[m] < groups, "select_channel_group: group index out of range");
    std::copy_n(input.ptr() + (m * channels + index[m] * block) * pixels, block * pixels,
                out.ptr() + m * block * pixels);
  }
  if (recording(input)) {
    out.set_requires_grad(true);
    Tape::current().record([input, out, index, items, channels, block, pixels]() mutable {
      if (!out.has_grad()) return;
      auto gx = input.ensure_grad();
      for (std::int64_t m = 0; m < items; ++m) {
        const T* src = out.grad().data() + m * block * pixels;
        T* dst = gx.data() + (m * channels + index[m] * block) * pixels;
        for (std::int64_t i = 0; i < block * pixels; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& input, int pad) {
  require_rank(input, 4, "pad_replicate");
  require(pad >= 0, "pad_replicate: negative padding");
  const std::int64_t planes = input.dim(0) * input.dim(1);
  const std::int64_t h = input.dim(2), w = input.dim(3);
  const std::int64_t ph = h + 2 * pad, pw = w + 2 * pad;
  Tensor<T> out({input.dim(0), input.dim(1), ph, pw});
  auto src_index = [&](std::int64_t y, std::int64_t x) {
    const std::int64_t sy = std::clamp<std::int64_t>(y - pad, 0, h - 1);
    const std::int64_t sx = std::clamp<std::int64_t>(x - pad, 0, w - 1);
    return sy * w + sx;
  };
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* x = input.ptr() + p * h * w;
    T* y = out.ptr() + p * ph * pw;
    for (std::int64_t oy = 0; oy < ph; ++oy) {
      for (std::int64_t ox = 0; ox < pw; ++ox) y[oy * pw + ox] = x[src_index(oy, ox)];
    }
  }
  if (recording(input)) {
    out.set_requires_grad(true);
    Tape::current().record([input, out, planes, h, w, ph, pw, pad]() mutable {
      if (!out.has_grad()) return;
      T* gx = input.ensure_grad().data();
      const T* gy = out.grad().data();
      for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t oy = 0; oy < ph; ++oy) {
          const std::int64_t sy = std::clamp<std::int64_t>(oy - pad, 0, h - 1);
          for (std::int64_t ox = 0; ox < pw; ++ox) {
            const std::int64_t sx = std::clamp<std::int64_t>(ox - pad, 0, w - 1);
            gx[p * h * w + sy * w + sx] += gy[p * ph * pw + oy * pw + ox];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- softmax / losses

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  require_rank(logits, 4, "softmax_channels");
  const std::int64_t batch = logits.dim(0), k = logits.dim(1);
  const std::int64_t pixels = logits.dim(2) * logits.dim(3);
  Tensor<T> out(logits.shape());
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* x = logits.ptr() + b * k * pixels;
    T* y = out.ptr() + b * k * pixels;
    for (std::int64_t p = 0; p < pixels; ++p) {
      T m = x[p];
      for (std::int64_t c = 1; c < k; ++c) m = std::max(m, x[c * pixels + p]);
      T s = T(0);
      for (std::int64_t c = 0; c < k; ++c) {
        const T e = std::exp(x[c * pixels + p] - m);
        y[c * pixels + p] = e;
        s += e;
      }
      for (std::int64_t c = 0; c < k; ++c) y[c * pixels + p] /= s;
    }
  }
  if (recording(logits)) {
    out.set_requires_grad(true);
    Tape::current().record([logits, out, batch, k, pixels]() mutable {
      if (!out.has_grad()) return;
      T* gx = logits.ensure_grad().data();
      const T* gy = out.grad().data();
      const T* y = out.ptr();
      for (std::int64_t b = 0; b < batch; ++b) {
        const std::int64_t off = b * k * pixels;
        for (std::int64_t p = 0; p < pixels; ++p) {
          T dot = T(0);
          for (std::int64_t c = 0; c < k; ++c) dot += gy[off + c * pixels + p] * y[off + c * pixels + p];
          for (std::int64_t c = 0; c < k; ++c) {
            const std::int64_t i = off + c * pixels + p;
            gx[i] += y[i] * (gy[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const IntTensor& labels,
                                std::optional<int> ignore_label) {
  require_rank(logits, 4, "softmax_cross_entropy");
  const std::int64_t batch = logits.dim(0), k = logits.dim(1);
  const std::int64_t pixels = logits.dim(2) * logits.dim(3);
  require(labels.shape == Shape{batch, logits.dim(2), logits.dim(3)},
          "softmax_cross_entropy: labels " + to_string(labels.shape) + " do not match logits " +
              to_string(logits.shape()));
  double total = 0.0;
  std::int64_t valid = 0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* x = logits.ptr() + b * k * pixels;
    for (std::int64_t p = 0; p < pixels; ++p) {
      const int label = labels.data[static_cast<std::size_t>(b * pixels + p)];
      if (ignore_label && label == *ignore_label) continue;
      if (label < 0 || label >= k) {
        throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                                " outside [0," + std::to_string(k) + ")");
      }
      T m = x[p];
      for (std::int64_t c = 1; c < k; ++c) m = std::max(m, x[c * pixels + p]);
      T s = T(0);
      for (std::int64_t c = 0; c < k; ++c) s += std::exp(x[c * pixels + p] - m);
      total += static_cast<double>(std::log(s) + m - x[label * pixels + p]);
      ++valid;
    }
  }
  Tensor<T> out({1}, valid > 0 ? static_cast<T>(total / static_cast<double>(valid)) : T(0));
  if (recording(logits)) {
    out.set_requires_grad(true);
    Tape::current().record([logits, labels, ignore_label, out, batch, k, pixels, valid]() mutable {
      if (!out.has_grad()) return;
      T* gx = logits.ensure_grad().data();
      if (valid == 0) return;
      const T g0 = out.grad()[0] / static_cast<T>(valid);
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* x = logits.ptr() + b * k * pixels;
        T* g = gx + b * k * pixels;
        for (std::int64_t p = 0; p < pixels; ++p) {
          const int label = labels.data[static_cast<std::size_t>(b * pixels + p)];
          if (ignore_label && label == *ignore_label) continue;
          T m = x[p];
          for (std::int64_t c = 1; c < k; ++c) m = std::max(m, x[c * pixels + p]);
          T s = T(0);
          for (std::int64_t c = 0; c < k; ++c) s += std::exp(x[c * pixels + p] - m);
          for (std::int64_t c = 0; c < k; ++c) {
            const T prob = std::exp(x[c * pixels + p] - m) / s;
            g[c * pixels + p] += g0 * (prob - (c == label ? T(1) : T(0)));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, std::span<const T> mask) {
  require(pred.shape() == target.shape(), "smooth_l1: shape mismatch " + to_string(pred.shape()) +
                                              " vs " + to_string(target.shape()));
  require(mask.empty() || mask.size() == pred.numel(),
          "smooth_l1: mask length " + std::to_string(mask.size()) + " vs " +
              std::to_string(pred.numel()) + " elements");
  const auto p = pred.data();
  const auto t = target.data();
  double total = 0.0, weight = 0.0;
  std::vector<bool> regime;
  const bool monitor = KinkMonitor::active();
  if (monitor) regime.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = mask.empty() ? 1.0 : static_cast<double>(mask[i]);
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    const double ad = std::abs(d);
    if (monitor) regime[i] = ad < 1.0;
    total += m * (ad < 1.0 ? 0.5 * d * d : ad - 0.5);
    weight += m;
  }
  if (monitor) KinkMonitor::note_bits(regime);
  Tensor<T> out({1}, weight > 0 ? static_cast<T>(total / weight) : T(0));
  if (recording(pred, target)) {
    out.set_requires_grad(true);
    std::vector<T> m(mask.begin(), mask.end());
    Tape::current().record([pred, target, out, m, weight]() mutable {
      if (!out.has_grad() || weight <= 0) return;
      const T g0 = out.grad()[0] / static_cast<T>(weight);
      const auto p = pred.data();
      const auto t = target.data();
      T* gp = pred.requires_grad() ? pred.ensure_grad().data() : nullptr;
      T* gt = target.requires_grad() ? target.ensure_grad().data() : nullptr;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T w = m.empty() ? T(1) : m[i];
        const T d = p[i] - t[i];
        const T slope = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
        if (gp) gp[i] += g0 * w * slope;
        if (gt) gt[i] -= g0 * w * slope;
      }
    });
  }
  return out;
}

#define TANET_INSTANTIATE_OPS(T)                                                                 \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                            Conv2dOptions);                                                      \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> mul_channel_gate(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                BatchNormStats<T>&, bool, T, T);                                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                          \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                                \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::int64_t, std::int64_t);            \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                                \
  template Tensor<T> select_channel_group(const Tensor<T>&, std::int64_t, std::span<const int>); \
  template Tensor<T> pad_replicate(const Tensor<T>&, int);                                       \
  template Tensor<T> softmax_channels(const Tensor<T>&);                                         \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, const IntTensor&,                   \
                                           std::optional<int>);                                  \
  template Tensor<T> smooth_l1(const Tensor<T>&, const Tensor<T>&, std::span<const T>);

TANET_INSTANTIATE_OPS(float)
TANET_INSTANTIATE_OPS(double)

#undef TANET_INSTANTIATE_OPS

}  // namespace tanet
