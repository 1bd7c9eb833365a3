#include "tanet/lbp.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tanet/ops.hpp"

namespace tanet {

int lbp_nonzeros_per_slice(double sparsity) {
  return static_cast<int>(std::floor(sparsity * 9.0 + 1e-9));
}

LbpFilterBank generate_bank(int m, int cin, double sparsity, std::uint64_t seed) {
  if (m < 1 || cin < 1) throw std::invalid_argument("generate_bank: m and cin must be >= 1");
  if (!(sparsity > 0.0 && sparsity <= 1.0)) {
    throw std::invalid_argument("generate_bank: sparsity must be in (0, 1]");
  }
  const int nz = lbp_nonzeros_per_slice(sparsity);
  if (nz < 2) {
    throw std::invalid_argument("generate_bank: sparsity " + std::to_string(sparsity) +
                                " leaves fewer than 2 nonzeros per 3x3 filter");
  }
  LbpFilterBank bank{m, cin, sparsity, seed, std::vector<std::int8_t>(static_cast<std::size_t>(m) * cin * 9, 0)};
  std::mt19937_64 rng(seed);
  for (int s = 0; s < m * cin; ++s) {
    std::array<int, 9> pos;
    std::iota(pos.begin(), pos.end(), 0);
    for (int i = 0; i < nz; ++i) {
      const int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(9 - i));
      std::swap(pos[i], pos[j]);
      bank.filters[static_cast<std::size_t>(s * 9 + pos[i])] = (i % 2 == 0) ? 1 : -1;
    }
  }
  return bank;
}

template <typename T>
Tensor<T> LbpFilterBank::as_tensor() const {
  std::vector<T> v(filters.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(filters[i]);
  return Tensor<T>({m, cin, 3, 3}, std::move(v));
}

template Tensor<float> LbpFilterBank::as_tensor<float>() const;
template Tensor<double> LbpFilterBank::as_tensor<double>() const;

namespace {

struct SparseTap {
  int c;
  int dy;
  int dx;
  bool positive;
};

std::vector<std::vector<SparseTap>> sparse_taps(const LbpFilterBank& bank) {
  std::vector<std::vector<SparseTap>> taps(static_cast<std::size_t>(bank.m));
  for (int k = 0; k < bank.m; ++k) {
    for (int c = 0; c < bank.cin; ++c) {
      std::vector<SparseTap> pos, neg;
      for (int dy = 0; dy < 3; ++dy) {
        for (int dx = 0; dx < 3; ++dx) {
          const auto v = bank.at(k, c, dy, dx);
          if (v > 0) pos.push_back({c, dy - 1, dx - 1, true});
          else if (v < 0) neg.push_back({c, dy - 1, dx - 1, false});
        }
      }
      // alternate signs so partial sums of a constant stay exact
      for (std::size_t i = 0; i < std::max(pos.size(), neg.size()); ++i) {
        if (i < pos.size()) taps[k].push_back(pos[i]);
        if (i < neg.size()) taps[k].push_back(neg[i]);
      }
    }
  }
  return taps;
}

}  // namespace

namespace {

// Copies plane [h,w] into [h+2,w+2] with replicated borders.
template <typename T>
void pad_plane(const T* src, std::int64_t h, std::int64_t w, T* dst) {
  const std::int64_t pw = w + 2;
  for (std::int64_t i = 0; i < h + 2; ++i) {
    const T* row = src + std::clamp<std::int64_t>(i - 1, 0, h - 1) * w;
    T* out = dst + i * pw;
    out[0] = row[0];
    std::copy_n(row, w, out + 1);
    out[w + 1] = row[w - 1];
  }
}

}  // namespace

template <typename T>
Tensor<T> lbp_difference(const Tensor<T>& x, const LbpFilterBank& bank) {
  if (x.rank() != 4) throw ShapeError("lbp_difference: input must be [B,C,H,W]");
  if (x.dim(1) != bank.cin) {
    throw ShapeError("lbp_difference: input has " + std::to_string(x.dim(1)) +
                     " channels, bank expects " + std::to_string(bank.cin));
  }
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t plane = h * w, pw = w + 2, pplane = (h + 2) * pw;
  // Work in padded-row layout: output pixel (i, j) sits at i*pw + j and tap
  // (dy, dx) reads the padded plane at a fixed offset, so every tap is one
  // contiguous span. Columns j >= w of a span are scratch.
  const std::int64_t span = (h - 1) * pw + w;
  const auto taps = sparse_taps(bank);
  auto offset = [pw](const SparseTap& t) { return (t.dy + 1) * pw + (t.dx + 1); };

  AlignedVector<T> padded(static_cast<std::size_t>(cin * pplane));
  AlignedVector<T> slice(static_cast<std::size_t>(span));
  AlignedVector<T> acc(static_cast<std::size_t>(span));
  Tensor<T> out({batch, bank.m, h, w});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < cin; ++c) {
      pad_plane(x.ptr() + (b * cin + c) * plane, h, w, padded.data() + c * pplane);
    }
    for (int k = 0; k < bank.m; ++k) {
      const auto& kt = taps[static_cast<std::size_t>(k)];
      T* a = acc.data();
      std::fill(acc.begin(), acc.end(), T(0));
      std::size_t t = 0;
      // Each channel slice is summed on its own before joining the total.
      while (t < kt.size()) {
        const int c = kt[t].c;
        T* sl = slice.data();
        {
          const T* src = padded.data() + c * pplane + offset(kt[t]);
          if (kt[t].positive) std::copy_n(src, span, sl);
          else for (std::int64_t q = 0; q < span; ++q) sl[q] = -src[q];
          ++t;
        }
        for (; t < kt.size() && kt[t].c == c; ++t) {
          const T* src = padded.data() + c * pplane + offset(kt[t]);
          if (kt[t].positive) for (std::int64_t q = 0; q < span; ++q) sl[q] += src[q];
          else for (std::int64_t q = 0; q < span; ++q) sl[q] -= src[q];
        }
        for (std::int64_t q = 0; q < span; ++q) a[q] += sl[q];
      }
      T* dst = out.ptr() + (b * bank.m + k) * plane;
      for (std::int64_t i = 0; i < h; ++i) std::copy_n(a + i * pw, w, dst + i * w);
    }
  }

  if (GradMode::enabled() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tape::current().record([x, out, taps, batch, cin, h, w, m = bank.m]() mutable {
      if (!out.has_grad()) return;
      const std::int64_t plane = h * w, pw = w + 2, pplane = (h + 2) * pw;
      const std::int64_t span = (h - 1) * pw + w;
      const T* g = out.grad().data();
      T* gx = x.ensure_grad().data();
      AlignedVector<T> gpad(static_cast<std::size_t>(cin * pplane));
      AlignedVector<T> gk(static_cast<std::size_t>(span), T(0));  // scratch columns stay zero
      for (std::int64_t b = 0; b < batch; ++b) {
        std::fill(gpad.begin(), gpad.end(), T(0));
        for (int k = 0; k < m; ++k) {
          const T* src = g + (b * m + k) * plane;
          for (std::int64_t i = 0; i < h; ++i) std::copy_n(src + i * w, w, gk.data() + i * pw);
          for (const auto& t : taps[static_cast<std::size_t>(k)]) {
            T* d = gpad.data() + t.c * pplane + (t.dy + 1) * pw + (t.dx + 1);
            const T* s = gk.data();
            if (t.positive) for (std::int64_t q = 0; q < span; ++q) d[q] += s[q];
            else for (std::int64_t q = 0; q < span; ++q) d[q] -= s[q];
          }
        }
        // Fold the replicated border back onto the edge pixels.
        for (std::int64_t c = 0; c < cin; ++c) {
          const T* gp = gpad.data() + c * pplane;
          T* dx = gx + (b * cin + c) * plane;
          for (std::int64_t i = 0; i < h + 2; ++i) {
            const std::int64_t yy = std::clamp<std::int64_t>(i - 1, 0, h - 1);
            for (std::int64_t j = 0; j < w + 2; ++j) {
              dx[yy * w + std::clamp<std::int64_t>(j - 1, 0, w - 1)] += gp[i * pw + j];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
LbpLayer<T>::LbpLayer(int cin, int cout, int m, double sparsity, std::uint64_t bank_seed,
                      std::mt19937_64& rng)
    : bank(generate_bank(m, cin, sparsity, bank_seed)),
      combine_weights(Tensor<T>::randn({cout, m}, rng, static_cast<T>(std::sqrt(2.0 / m)))),
      bank_tensor(bank.as_tensor<T>()) {
  combine_weights.set_requires_grad(true);
}

template <typename T>
Tensor<T> LbpLayer<T>::bitmaps(const Tensor<T>& x) const {
  return relu(lbp_difference(x, bank));
}

template <typename T>
Tensor<T> LbpLayer<T>::operator()(const Tensor<T>& x) const {
  const Tensor<T> w = reshape(combine_weights, {combine_weights.dim(0), combine_weights.dim(1), 1, 1});
  return conv2d(bitmaps(x), w, Tensor<T>());
}

template <typename T>
void LbpLayer<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(join_name(prefix, "combine"), combine_weights, ParamRole::kLearnable);
  f(join_name(prefix, "bank"), bank_tensor, ParamRole::kFrozen);
}

template <typename T>
void LbpLayer<T>::sync_bank_from_tensor() {
  if (bank_tensor.shape() != Shape{bank.m, bank.cin, 3, 3}) {
    throw ShapeError("LbpLayer: bank tensor shape " + to_string(bank_tensor.shape()) +
                     " does not match the layer");
  }
  const auto v = bank_tensor.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != T(0) && v[i] != T(1) && v[i] != T(-1)) {
      throw std::invalid_argument("LbpLayer: bank entries must be ternary");
    }
    bank.filters[i] = static_cast<std::int8_t>(v[i]);
  }
}

std::int64_t learnable_param_count(const ConvLayerSpec& spec) {
  return spec.cout * spec.cin * spec.k * spec.k + (spec.bias ? spec.cout : 0);
}

std::int64_t lbp_param_count(std::int64_t cout, std::int64_t m) { return cout * m; }

template Tensor<float> lbp_difference(const Tensor<float>&, const LbpFilterBank&);
template Tensor<double> lbp_difference(const Tensor<double>&, const LbpFilterBank&);
template class LbpLayer<float>;
template class LbpLayer<double>;

}  // namespace tanet
