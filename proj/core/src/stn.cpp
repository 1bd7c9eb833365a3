#include "tanet/stn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "tanet/gradcheck.hpp"
#include "tanet/ops.hpp"

namespace tanet {

RoiSet RoiSet::cardiac() { return {{1, 2, 3, 4, 5}, {"LV", "RV", "LA", "IVS", "PW"}}; }

void RoiSet::validate() const {
  if (labels.empty()) throw std::invalid_argument("RoiSet: need at least one ROI");
  if (names.size() != labels.size()) throw std::invalid_argument("RoiSet: one name per label");
  std::set<int> seen;
  for (int l : labels) {
    if (l <= 0) throw std::invalid_argument("RoiSet: label 0 is reserved for background");
    if (!seen.insert(l).second) throw std::invalid_argument("RoiSet: duplicate label");
  }
}

std::vector<double> identity_raw_theta() {
  const double raw_s = std::log(std::expm1(1.0 - kMinThetaScale));
  return {raw_s, raw_s, 0.0, 0.0};
}

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename T>
std::int64_t theta_count(const Tensor<T>& theta) {
  const auto& s = theta.shape();
  if (s.size() < 3 || s[s.size() - 2] != 2 || s.back() != 3) {
    throw ShapeError("expected transforms of shape [...,2,3], got " + to_string(s));
  }
  return static_cast<std::int64_t>(theta.numel() / 6);
}

double normalized_coord(std::int64_t i, std::int64_t n) {
  return n > 1 ? -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
}

// Pixel coordinate for a normalized one, snapped onto nearby pixel centers so
// that canonical grids reproduce their input exactly.
template <typename T>
T to_pixel(T g, std::int64_t n) {
  if (n <= 1) return T(0);
  T p = (g + T(1)) * static_cast<T>(n - 1) / T(2);
  const T tol = T(16) * std::numeric_limits<T>::epsilon() * static_cast<T>(n);
  const T r = std::round(p);
  if (std::abs(p - r) < tol) p = r;
  return p;
}

}  // namespace

template <typename T>
Tensor<T> build_theta(const Tensor<T>& raw) {
  const auto& s = raw.shape();
  if (s.empty() || s.back() != 4) {
    throw ShapeError("build_theta: expected raw parameters [...,4], got " + to_string(s));
  }
  Shape out_shape(s.begin(), s.end() - 1);
  out_shape.push_back(2);
  out_shape.push_back(3);
  const std::int64_t m = static_cast<std::int64_t>(raw.numel() / 4);
  Tensor<T> out(out_shape);
  const T* r = raw.ptr();
  T* o = out.ptr();
  for (std::int64_t i = 0; i < m; ++i) {
    o[6 * i + 0] = static_cast<T>(softplus(r[4 * i + 0]) + kMinThetaScale);
    o[6 * i + 1] = T(0);
    o[6 * i + 2] = static_cast<T>(std::tanh(static_cast<double>(r[4 * i + 2])));
    o[6 * i + 3] = T(0);
    o[6 * i + 4] = static_cast<T>(softplus(r[4 * i + 1]) + kMinThetaScale);
    o[6 * i + 5] = static_cast<T>(std::tanh(static_cast<double>(r[4 * i + 3])));
  }
  if (GradMode::enabled() && raw.requires_grad()) {
    out.set_requires_grad(true);
    Tape::current().record([raw, out, m]() mutable {
      if (!out.has_grad()) return;
      const T* r = raw.ptr();
      const T* g = out.grad().data();
      T* gr = raw.ensure_grad().data();
      for (std::int64_t i = 0; i < m; ++i) {
        gr[4 * i + 0] += g[6 * i + 0] * static_cast<T>(logistic(r[4 * i + 0]));
        gr[4 * i + 1] += g[6 * i + 4] * static_cast<T>(logistic(r[4 * i + 1]));
        const T tx = out.ptr()[6 * i + 2], ty = out.ptr()[6 * i + 5];
        gr[4 * i + 2] += g[6 * i + 2] * (T(1) - tx * tx);
        gr[4 * i + 3] += g[6 * i + 5] * (T(1) - ty * ty);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> theta_tensor(std::span<const AffineTheta> thetas) {
  const auto m = static_cast<std::int64_t>(thetas.size());
  if (m == 0) throw ShapeError("theta_tensor: no transforms");
  Tensor<T> out({m, 2, 3});
  T* o = out.ptr();
  for (std::int64_t i = 0; i < m; ++i) {
    const auto& th = thetas[static_cast<std::size_t>(i)];
    o[6 * i + 0] = static_cast<T>(th.sx);
    o[6 * i + 2] = static_cast<T>(th.tx);
    o[6 * i + 4] = static_cast<T>(th.sy);
    o[6 * i + 5] = static_cast<T>(th.ty);
  }
  return out;
}

template <typename T>
std::vector<AffineTheta> thetas_from_tensor(const Tensor<T>& theta) {
  const std::int64_t m = theta_count(theta);
  std::vector<AffineTheta> out(static_cast<std::size_t>(m));
  const T* t = theta.ptr();
  for (std::int64_t i = 0; i < m; ++i) {
    out[static_cast<std::size_t>(i)] = {static_cast<double>(t[6 * i + 0]),
                                        static_cast<double>(t[6 * i + 4]),
                                        static_cast<double>(t[6 * i + 2]),
                                        static_cast<double>(t[6 * i + 5])};
  }
  return out;
}

template <typename T>
Tensor<T> affine_grid(const Tensor<T>& theta, std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t m = theta_count(theta);
  if (out_h < 1 || out_w < 1) throw ShapeError("affine_grid: output dims must be >= 1");
  std::vector<T> xs(static_cast<std::size_t>(out_w)), ys(static_cast<std::size_t>(out_h));
  for (std::int64_t j = 0; j < out_w; ++j) xs[j] = static_cast<T>(normalized_coord(j, out_w));
  for (std::int64_t i = 0; i < out_h; ++i) ys[i] = static_cast<T>(normalized_coord(i, out_h));

  Tensor<T> grid({m, out_h, out_w, 2});
  const T* th = theta.ptr();
  T* g = grid.ptr();
  for (std::int64_t k = 0; k < m; ++k) {
    const T* a = th + 6 * k;
    for (std::int64_t i = 0; i < out_h; ++i) {
      for (std::int64_t j = 0; j < out_w; ++j) {
        T* p = g + ((k * out_h + i) * out_w + j) * 2;
        p[0] = a[0] * xs[j] + a[1] * ys[i] + a[2];
        p[1] = a[3] * xs[j] + a[4] * ys[i] + a[5];
      }
    }
  }
  if (GradMode::enabled() && theta.requires_grad()) {
    grid.set_requires_grad(true);
    Tape::current().record([theta, grid, m, out_h, out_w, xs, ys]() mutable {
      if (!grid.has_grad()) return;
      const T* gg = grid.grad().data();
      T* gt = theta.ensure_grad().data();
      for (std::int64_t k = 0; k < m; ++k) {
        T* a = gt + 6 * k;
        for (std::int64_t i = 0; i < out_h; ++i) {
          for (std::int64_t j = 0; j < out_w; ++j) {
            const T* p = gg + ((k * out_h + i) * out_w + j) * 2;
            a[0] += p[0] * xs[j];
            a[1] += p[0] * ys[i];
            a[2] += p[0];
            a[3] += p[1] * xs[j];
            a[4] += p[1] * ys[i];
            a[5] += p[1];
          }
        }
      }
    });
  }
  return grid;
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& input, const Tensor<T>& grid) {
  if (input.rank() != 4) throw ShapeError("bilinear_sample: input must be [B,C,H,W]");
  if (grid.rank() != 4 || grid.dim(3) != 2) {
    throw ShapeError("bilinear_sample: grid must be [M,h,w,2], got " + to_string(grid.shape()));
  }
  const std::int64_t batch = input.dim(0), channels = input.dim(1);
  const std::int64_t h = input.dim(2), w = input.dim(3);
  const std::int64_t m = grid.dim(0), oh = grid.dim(1), ow = grid.dim(2);
  if (m % batch != 0) {
    throw ShapeError("bilinear_sample: grid batch " + std::to_string(m) +
                     " is not a multiple of input batch " + std::to_string(batch));
  }
  for (T v : grid.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw std::domain_error("bilinear_sample: non-finite grid");
  }
  const std::int64_t per_image = m / batch;
  const std::int64_t points = oh * ow;

  struct Tap {
    std::int64_t x0, y0;
    T wx1, wy1;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(m * points));
  const T* gp = grid.ptr();
  for (std::int64_t i = 0; i < m * points; ++i) {
    const T px = to_pixel(gp[2 * i], w);
    const T py = to_pixel(gp[2 * i + 1], h);
    const T fx = std::floor(px), fy = std::floor(py);
    taps[i] = {static_cast<std::int64_t>(fx), static_cast<std::int64_t>(fy), px - fx, py - fy};
  }
  if (KinkMonitor::active()) {
    for (const auto& t : taps) {
      KinkMonitor::note(static_cast<std::uint64_t>(t.x0 * 1000003 + t.y0));
    }
  }

  auto in_range = [h, w](std::int64_t y, std::int64_t x) {
    return y >= 0 && y < h && x >= 0 && x < w;
  };

  Tensor<T> out({m, channels, oh, ow});
  for (std::int64_t k = 0; k < m; ++k) {
    const std::int64_t b = k / per_image;
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* plane = input.ptr() + (b * channels + c) * h * w;
      T* dst = out.ptr() + (k * channels + c) * points;
      for (std::int64_t p = 0; p < points; ++p) {
        const Tap& t = taps[k * points + p];
        const T wx0 = T(1) - t.wx1, wy0 = T(1) - t.wy1;
        T v = T(0);
        if (in_range(t.y0, t.x0)) v += wy0 * wx0 * plane[t.y0 * w + t.x0];
        if (t.wx1 != T(0) && in_range(t.y0, t.x0 + 1)) v += wy0 * t.wx1 * plane[t.y0 * w + t.x0 + 1];
        if (t.wy1 != T(0) && in_range(t.y0 + 1, t.x0)) v += t.wy1 * wx0 * plane[(t.y0 + 1) * w + t.x0];
        if (t.wx1 != T(0) && t.wy1 != T(0) && in_range(t.y0 + 1, t.x0 + 1)) {
          v += t.wy1 * t.wx1 * plane[(t.y0 + 1) * w + t.x0 + 1];
        }
        dst[p] = v;
      }
    }
  }

  if (GradMode::enabled() && (input.requires_grad() || grid.requires_grad())) {
    out.set_requires_grad(true);
    Tape::current().record([input, grid, out, taps, batch, channels, h, w, m, per_image, points,
                            in_range]() mutable {
      if (!out.has_grad()) return;
      const T* gy = out.grad().data();
      T* gin = input.requires_grad() ? input.ensure_grad().data() : nullptr;
      T* ggrid = grid.requires_grad() ? grid.ensure_grad().data() : nullptr;
      const T sx = w > 1 ? static_cast<T>(w - 1) / T(2) : T(0);
      const T sy = h > 1 ? static_cast<T>(h - 1) / T(2) : T(0);
      auto value = [&](const T* plane, std::int64_t y, std::int64_t x) {
        return in_range(y, x) ? plane[y * w + x] : T(0);
      };
      for (std::int64_t k = 0; k < m; ++k) {
        const std::int64_t b = k / per_image;
        for (std::int64_t c = 0; c < channels; ++c) {
          const T* plane = input.ptr() + (b * channels + c) * h * w;
          T* gplane = gin ? gin + (b * channels + c) * h * w : nullptr;
          const T* g = gy + (k * channels + c) * points;
          for (std::int64_t p = 0; p < points; ++p) {
            const Tap& t = taps[k * points + p];
            const T wx0 = T(1) - t.wx1, wy0 = T(1) - t.wy1;
            const T gv = g[p];
            if (gplane) {
              if (in_range(t.y0, t.x0)) gplane[t.y0 * w + t.x0] += wy0 * wx0 * gv;
              if (in_range(t.y0, t.x0 + 1)) gplane[t.y0 * w + t.x0 + 1] += wy0 * t.wx1 * gv;
              if (in_range(t.y0 + 1, t.x0)) gplane[(t.y0 + 1) * w + t.x0] += t.wy1 * wx0 * gv;
              if (in_range(t.y0 + 1, t.x0 + 1)) gplane[(t.y0 + 1) * w + t.x0 + 1] += t.wy1 * t.wx1 * gv;
            }
            if (ggrid) {
              const T v00 = value(plane, t.y0, t.x0), v01 = value(plane, t.y0, t.x0 + 1);
              const T v10 = value(plane, t.y0 + 1, t.x0), v11 = value(plane, t.y0 + 1, t.x0 + 1);
              const T dpx = wy0 * (v01 - v00) + t.wy1 * (v11 - v10);
              const T dpy = wx0 * (v10 - v00) + t.wx1 * (v11 - v01);
              ggrid[2 * (k * points + p)] += gv * dpx * sx;
              ggrid[2 * (k * points + p) + 1] += gv * dpy * sy;
            }
          }
        }
      }
    });
  }
  return out;
}

IntTensor sample_labels_nearest(const IntTensor& masks, std::span<const AffineTheta> thetas,
                                std::int64_t out_h, std::int64_t out_w, int fill) {
  if (masks.shape.size() != 3) throw ShapeError("sample_labels_nearest: masks must be [B,H,W]");
  const std::int64_t batch = masks.shape[0], h = masks.shape[1], w = masks.shape[2];
  const auto m = static_cast<std::int64_t>(thetas.size());
  if (m == 0 || m % batch != 0) {
    throw ShapeError("sample_labels_nearest: transform count must be a multiple of the batch");
  }
  const std::int64_t per_image = m / batch;
  IntTensor out({m, out_h, out_w}, fill);
  for (std::int64_t k = 0; k < m; ++k) {
    const auto& th = thetas[static_cast<std::size_t>(k)];
    const std::int32_t* src = masks.data.data() + (k / per_image) * h * w;
    std::int32_t* dst = out.data.data() + k * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const double ys = th.sy * normalized_coord(i, out_h) + th.ty;
      const auto y = static_cast<std::int64_t>(std::lround(to_pixel(ys, h)));
      if (y < 0 || y >= h) continue;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const double xs = th.sx * normalized_coord(j, out_w) + th.tx;
        const auto x = static_cast<std::int64_t>(std::lround(to_pixel(xs, w)));
        if (x < 0 || x >= w) continue;
        dst[i * out_w + j] = src[y * w + x];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> inverse_paste(const Tensor<T>& roi_probs, std::span<const AffineTheta> thetas,
                        std::int64_t out_h, std::int64_t out_w) {
  if (roi_probs.rank() != 4 || roi_probs.dim(1) != 1) {
    throw ShapeError("inverse_paste: expected ROI maps [N,1,h,w], got " +
                     to_string(roi_probs.shape()));
  }
  const std::int64_t n = roi_probs.dim(0);
  if (static_cast<std::int64_t>(thetas.size()) != n) {
    throw ShapeError("inverse_paste: need one transform per ROI map");
  }
  NoGradGuard no_grad;
  std::vector<AffineTheta> inverse(thetas.size());
  for (std::size_t r = 0; r < thetas.size(); ++r) {
    if (!(thetas[r].sx > 0.0 && thetas[r].sy > 0.0)) {
      throw std::domain_error("inverse_paste: transform scales must be positive");
    }
    inverse[r] = thetas[r].inverse();
  }
  const Tensor<T> grid = affine_grid(theta_tensor<T>(inverse), out_h, out_w);
  const Tensor<T> pasted = bilinear_sample(roi_probs, grid);  // [N,1,out_h,out_w]
  const std::int64_t plane = out_h * out_w;
  Tensor<T> scores({n + 1, out_h, out_w});
  std::fill_n(scores.ptr(), plane, static_cast<T>(kPasteBackgroundScore));
  std::copy_n(pasted.ptr(), n * plane, scores.ptr() + plane);
  return scores;
}

template <typename T>
IntTensor argmax_labels(const Tensor<T>& scores, std::span<const int> labels) {
  if (scores.rank() != 3) throw ShapeError("argmax_labels: scores must be [K,H,W]");
  const std::int64_t k = scores.dim(0), h = scores.dim(1), w = scores.dim(2);
  if (static_cast<std::int64_t>(labels.size()) != k) {
    throw ShapeError("argmax_labels: need one label per score channel");
  }
  IntTensor out({h, w});
  const std::int64_t plane = h * w;
  for (std::int64_t p = 0; p < plane; ++p) {
    std::int64_t best = 0;
    T best_v = scores.ptr()[p];
    for (std::int64_t c = 1; c < k; ++c) {
      const T v = scores.ptr()[c * plane + p];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.data[static_cast<std::size_t>(p)] = labels[static_cast<std::size_t>(best)];
  }
  return out;
}

GtThetas derive_gt_theta(const IntTensor& mask, const RoiSet& rois, double margin,
                         double min_scale) {
  if (mask.shape.size() != 2) throw ShapeError("derive_gt_theta: mask must be [H,W]");
  rois.validate();
  const std::int64_t h = mask.shape[0], w = mask.shape[1];
  for (auto v : mask.data) {
    if (v != 0 && std::find(rois.labels.begin(), rois.labels.end(), v) == rois.labels.end()) {
      throw std::invalid_argument("derive_gt_theta: mask label " + std::to_string(v) +
                                  " is not part of the ROI set");
    }
  }
  GtThetas out;
  for (int label : rois.labels) {
    std::int64_t x0 = w, x1 = -1, y0 = h, y1 = -1;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        if (mask.data[static_cast<std::size_t>(y * w + x)] != label) continue;
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    }
    if (x1 < 0) {
      out.thetas.push_back(AffineTheta::identity());
      out.present.push_back(false);
      continue;
    }
    auto axis = [&](std::int64_t lo, std::int64_t hi, std::int64_t n, double& s, double& t) {
      double u0 = normalized_coord(lo, n), u1 = normalized_coord(hi, n);
      const double ext = u1 - u0;
      u0 = std::max(-1.0, u0 - margin * ext);
      u1 = std::min(1.0, u1 + margin * ext);
      const double floor_scale =
          std::max(min_scale, n > 1 ? 1.0 / static_cast<double>(n - 1) : 1.0);
      if ((u1 - u0) / 2.0 < floor_scale) {
        const double c = (u0 + u1) / 2.0;
        u0 = c - floor_scale;
        u1 = c + floor_scale;
        if (u0 < -1.0) {
          u1 += -1.0 - u0;
          u0 = -1.0;
        }
        if (u1 > 1.0) {
          u0 -= u1 - 1.0;
          u1 = 1.0;
        }
        u0 = std::max(-1.0, u0);
      }
      s = (u1 - u0) / 2.0;
      t = (u1 + u0) / 2.0;
    };
    AffineTheta th;
    axis(x0, x1, w, th.sx, th.tx);
    axis(y0, y1, h, th.sy, th.ty);
    out.thetas.push_back(th);
    out.present.push_back(true);
  }
  return out;
}

template <typename T>
LocalizationNet<T>::LocalizationNet(int in_channels, int num_rois, const LocalizerConfig& config,
                                    std::mt19937_64& rng)
    : num_rois_(num_rois), coord_channels_(config.coord_channels) {
  if (config.widths.size() != 8) {
    throw std::invalid_argument("LocalizationNet: expected 8 conv widths");
  }
  int cin = in_channels + (coord_channels_ ? 2 : 0);
  for (int width : config.widths) {
    convs.emplace_back(cin, width, 3, Conv2dOptions{1, 1, 1}, true, rng);
    cin = width;
  }
  regress = LinearLayer<T>(cin, num_rois * 4, rng);
  std::fill(regress.weight.data().begin(), regress.weight.data().end(), T(0));
  const auto id = identity_raw_theta();
  for (int r = 0; r < num_rois; ++r) {
    for (int j = 0; j < 4; ++j) regress.bias.data()[4 * r + j] = static_cast<T>(id[j]);
  }
}

template <typename T>
Tensor<T> LocalizationNet<T>::operator()(const Tensor<T>& probs) const {
  if (probs.rank() != 4 || probs.dim(2) % 16 != 0 || probs.dim(3) % 16 != 0) {
    throw ShapeError("LocalizationNet: spatial dims must be divisible by 16, got " +
                     to_string(probs.shape()));
  }
  Tensor<T> x = probs;
  if (coord_channels_) {
    const std::int64_t b = probs.dim(0), h = probs.dim(2), w = probs.dim(3);
    Tensor<T> coords({b, 2, h, w});
    for (std::int64_t k = 0; k < b; ++k) {
      T* px = coords.ptr() + k * 2 * h * w;
      T* py = px + h * w;
      for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
          px[i * w + j] = static_cast<T>(normalized_coord(j, w));
          py[i * w + j] = static_cast<T>(normalized_coord(i, h));
        }
      }
    }
    x = concat_channels<T>({probs, coords});
  }
  for (std::size_t i = 0; i < convs.size(); ++i) {
    x = relu(convs[i](x));
    if (i % 2 == 1) x = avg_pool2(x);
  }
  const std::int64_t batch = x.dim(0), channels = x.dim(1);
  x = reshape(global_avg_pool(x), {batch, channels});
  return reshape(regress(x), {batch, num_rois_, 4});
}

template <typename T>
void LocalizationNet<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    convs[i].visit(join_name(prefix, "conv" + std::to_string(i + 1)), f);
  }
  regress.visit(join_name(prefix, "regress"), f);
}

#define TANET_INSTANTIATE_STN(T)                                                            \
  template Tensor<T> build_theta(const Tensor<T>&);                                         \
  template Tensor<T> theta_tensor(std::span<const AffineTheta>);                            \
  template std::vector<AffineTheta> thetas_from_tensor(const Tensor<T>&);                   \
  template Tensor<T> affine_grid(const Tensor<T>&, std::int64_t, std::int64_t);             \
  template Tensor<T> bilinear_sample(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> inverse_paste(const Tensor<T>&, std::span<const AffineTheta>,          \
                                   std::int64_t, std::int64_t);                             \
  template IntTensor argmax_labels(const Tensor<T>&, std::span<const int>);                 \
  template class LocalizationNet<T>;

TANET_INSTANTIATE_STN(float)
TANET_INSTANTIATE_STN(double)

#undef TANET_INSTANTIATE_STN

}  // namespace tanet
