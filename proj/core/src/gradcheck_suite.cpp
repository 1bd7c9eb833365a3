#include "tanet/gradcheck_suite.hpp"

#include <random>
#include <stdexcept>

#include "tanet/backbone.hpp"
#include "tanet/layers.hpp"
#include "tanet/lbp.hpp"
#include "tanet/ops.hpp"
#include "tanet/stn.hpp"

namespace tanet {

namespace {

using D = Tensor<double>;

D rand(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return D::uniform(std::move(shape), rng, lo, hi);
}

// sum(y * w) for a fixed random w: a scalar that sees every output element.
D probe(const D& y, std::uint64_t seed) {
  const auto n = static_cast<std::int64_t>(y.numel());
  return sum(mul_channel_gate(reshape(y, {1, n, 1, 1}), rand({1, n, 1, 1}, seed)));
}

template <typename Module>
std::vector<D> params_and(Module& m, std::initializer_list<D> extra) {
  auto p = learnable_parameters<double>(m);
  p.insert(p.end(), extra);
  return p;
}

// Grid points kept a fixed fraction away from pixel boundaries so +-2h probes
// never change sampler cells.
D interior_grid(Shape shape, std::int64_t h, std::int64_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> cx(0, w - 2), cy(0, h - 2);
  std::uniform_real_distribution<double> off(0.15, 0.85);
  D grid(std::move(shape));
  for (std::size_t p = 0; p < grid.numel(); p += 2) {
    grid.data()[p] = 2.0 * (static_cast<double>(cx(rng)) + off(rng)) / static_cast<double>(w - 1) - 1.0;
    grid.data()[p + 1] = 2.0 * (static_cast<double>(cy(rng)) + off(rng)) / static_cast<double>(h - 1) - 1.0;
  }
  return grid;
}

std::vector<GradCheckCase> build_cases() {
  std::vector<GradCheckCase> c;
  auto add_case = [&](std::string name, std::string scope, std::function<GradCheckResult(double)> run) {
    c.push_back({std::move(name), std::move(scope), std::move(run)});
  };

  // -------------------------------------------------------------- op
  add_case("conv2d", "op", [](double h) {
    std::vector<D> in{rand({2, 3, 6, 6}, 1), rand({4, 3, 3, 3}, 2), rand({4}, 3)};
    return grad_check([&] { return probe(conv2d(in[0], in[1], in[2], {1, 1, 1}), 4); }, in, h);
  });
  add_case("conv2d_strided_grouped", "op", [](double h) {
    std::vector<D> in{rand({2, 4, 7, 7}, 5), rand({6, 2, 3, 3}, 6), rand({6}, 7)};
    return grad_check([&] { return probe(conv2d(in[0], in[1], in[2], {2, 1, 2}), 8); }, in, h);
  });
  add_case("conv2d_pointwise", "op", [](double h) {
    std::vector<D> in{rand({2, 5, 4, 4}, 9), rand({3, 5, 1, 1}, 10)};
    return grad_check([&] { return probe(conv2d(in[0], in[1], D{}, {}), 11); }, in, h);
  });
  add_case("batch_norm_train", "op", [](double h) {
    std::vector<D> in{rand({3, 4, 3, 3}, 12), rand({4}, 13, 0.5, 1.5), rand({4}, 14)};
    return grad_check([&] {
      auto stats = BatchNormStats<double>::identity(4);
      return probe(batch_norm(in[0], in[1], in[2], stats, true), 15);
    }, in, h);
  });
  add_case("batch_norm_eval", "op", [](double h) {
    std::vector<D> in{rand({2, 4, 3, 3}, 16), rand({4}, 17, 0.5, 1.5), rand({4}, 18)};
    BatchNormStats<double> stats{rand({4}, 19), rand({4}, 20, 0.5, 2.0)};
    return grad_check([&] { return probe(batch_norm(in[0], in[1], in[2], stats, false), 21); }, in, h);
  });
  add_case("linear", "op", [](double h) {
    std::vector<D> in{rand({3, 5}, 22), rand({4, 5}, 23), rand({4}, 24)};
    return grad_check([&] { return probe(linear(in[0], in[1], in[2]), 25); }, in, h);
  });
  add_case("relu_sigmoid", "op", [](double h) {
    std::vector<D> in{rand({2, 3, 4, 4}, 26, -2, 2)};
    return grad_check([&] { return probe(add(relu(in[0]), sigmoid(in[0])), 27); }, in, h);
  });
  add_case("global_avg_pool", "op", [](double h) {
    std::vector<D> in{rand({2, 3, 5, 4}, 28)};
    return grad_check([&] { return probe(global_avg_pool(in[0]), 29); }, in, h);
  });
  add_case("avg_pool2", "op", [](double h) {
    std::vector<D> in{rand({2, 3, 6, 4}, 30)};
    return grad_check([&] { return probe(avg_pool2(in[0]), 31); }, in, h);
  });
  add_case("upsample_bilinear", "op", [](double h) {
    std::vector<D> in{rand({2, 2, 3, 4}, 32)};
    return grad_check([&] { return probe(upsample_bilinear(in[0], 7, 9), 33); }, in, h);
  });
  add_case("softmax_cross_entropy", "op", [](double h) {
    std::vector<D> in{rand({2, 4, 3, 3}, 34, -3, 3)};
    IntTensor labels({2, 3, 3});
    for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = static_cast<int>(i % 5) - 1;
    return grad_check([&] { return softmax_cross_entropy(in[0], labels, -1); }, in, h);
  });
  add_case("smooth_l1", "op", [](double h) {
    // differences spread over both regimes, away from |d| = 1
    D pred({12}), target({12});
    for (int i = 0; i < 12; ++i) {
      pred.data()[i] = 0.37 * (i - 6) + 0.05;
      target.data()[i] = 0.1 * (i % 3);
    }
    std::vector<double> mask{1, 1, 0, 1, 1, 1, 0, 1, 1, 1, 1, 1};
    std::vector<D> in{pred, target};
    return grad_check([&] { return smooth_l1(in[0], in[1], std::span<const double>(mask)); }, in, h);
  });
  add_case("concat_select_pad", "op", [](double h) {
    std::vector<D> in{rand({2, 2, 3, 3}, 35), rand({2, 4, 3, 3}, 36), rand({2, 2, 1, 1}, 37)};
    const std::vector<int> group{2, 1};
    return grad_check([&] {
      auto cat = concat_channels<double>({in[0], in[1]});
      auto sel = select_channel_group(cat, 2, group);
      return probe(pad_replicate(mul_channel_gate(sel, in[2]), 1), 38);
    }, in, h);
  });

  // -------------------------------------------------------------- stn
  add_case("build_theta", "stn", [](double h) {
    std::vector<D> in{rand({3, 4}, 40, -2, 2)};
    return grad_check([&] { return probe(build_theta(in[0]), 41); }, in, h);
  });
  add_case("affine_grid", "stn", [](double h) {
    std::vector<D> in{rand({2, 4}, 42, -1, 1)};
    return grad_check([&] { return probe(affine_grid(build_theta(in[0]), 4, 5), 43); }, in, h);
  });
  add_case("bilinear_sample_input", "stn", [](double h) {
    const D grid = interior_grid({2, 3, 4, 2}, 6, 7, 44);
    std::vector<D> in{rand({1, 2, 6, 7}, 45)};
    return grad_check([&] { return probe(bilinear_sample(in[0], grid), 46); }, in, h);
  });
  add_case("bilinear_sample_grid", "stn", [](double h) {
    std::vector<D> in{interior_grid({2, 3, 4, 2}, 6, 7, 47)};
    const D image = rand({2, 2, 6, 7}, 48);
    return grad_check([&] { return probe(bilinear_sample(image, in[0]), 49); }, in, h);
  });
  add_case("localizer", "stn", [](double h) {
    std::mt19937_64 rng(50);
    LocalizerConfig cfg;
    cfg.widths = {2, 2, 2, 2, 3, 3, 3, 3};
    auto net = std::make_shared<LocalizationNet<double>>(3, 2, cfg, rng);
    net->regress.weight = D::randn(net->regress.weight.shape(), rng, 0.5);
    const D probs = softmax_channels(rand({2, 3, 16, 16}, 51));
    const std::vector<AffineTheta> target{{0.5, 0.4, 0.1, -0.2}, {0.3, 0.6, -0.4, 0.2},
                                          {0.8, 0.2, 0.0, 0.5}, {0.4, 0.4, 0.3, 0.3}};
    const D tt = theta_tensor<double>(target);
    auto in = learnable_parameters<double>(*net);
    return grad_check([&] { return smooth_l1(build_theta(reshape((*net)(probs), {4, 4})), tt); }, in, h);
  });

  // -------------------------------------------------------------- lbp
  add_case("lbp_forward", "lbp", [](double h) {
    std::mt19937_64 rng(60);
    LbpLayer<double> layer(3, 4, 6, 0.5, 61, rng);
    auto in = params_and(layer, {rand({2, 3, 5, 5}, 62)});
    return grad_check([&] { return probe(lbp_forward(in.back(), layer), 63); }, in, h);
  });

  // -------------------------------------------------------------- backbone
  add_case("spatial_path", "backbone", [](double h) {
    std::mt19937_64 rng(70);
    SpatialPath<double> sp(3, BackboneConfig::tiny(), rng);
    auto in = params_and(sp, {rand({2, 3, 16, 16}, 71)});
    return grad_check([&] { return probe(sp(in.back(), true), 72); }, in, h);
  });
  add_case("handcrafted_path", "backbone", [](double h) {
    std::mt19937_64 rng(73);
    HandcraftedPath<double> hp(3, BackboneConfig::tiny(), rng);
    auto in = params_and(hp, {rand({2, 3, 16, 16}, 74)});
    return grad_check([&] { return probe(hp(in.back(), true), 75); }, in, h);
  });
  add_case("global_path", "backbone", [](double h) {
    std::mt19937_64 rng(76);
    GlobalPath<double> gp(3, BackboneConfig::tiny(), rng);
    auto in = params_and(gp, {rand({2, 3, 32, 32}, 77)});
    return grad_check([&] { return probe(gp(in.back(), true), 78); }, in, h);
  });
  add_case("fusion_head", "backbone", [](double h) {
    std::mt19937_64 rng(79);
    FusionHead<double> head(9, 5, 2, 2, rng);
    const std::vector<int> group{1, 0};
    auto in = params_and(head, {rand({2, 4, 4, 4}, 80), rand({2, 3, 4, 4}, 81), rand({2, 2, 4, 4}, 82)});
    const auto n = in.size();
    return grad_check([&] { return probe(head(in[n - 3], in[n - 2], in[n - 1], 8, 8, true, group), 83); }, in, h);
  });
  add_case("coarse_segmenter", "backbone", [](double h) {
    std::mt19937_64 rng(84);
    CoarseSegmenter<double> cs(3, 3, BackboneConfig::tiny(), rng);
    auto in = params_and(cs, {rand({2, 3, 32, 32}, 85)});
    return grad_check([&] { return probe(cs(in.back(), true), 86); }, in, h);
  });
  add_case("crop_to_logits", "backbone", [](double h) {
    // raw theta -> grid -> crops -> backbone -> per-ROI logits
    std::mt19937_64 rng(87);
    Backbone<double> bb(3, BackboneConfig::tiny(), 2, rng);
    const std::vector<int> roi{0, 1};
    D raw({2, 4}, std::vector<double>{0.1, -0.2, 0.13, -0.07, -0.3, 0.2, -0.11, 0.09});
    auto in = params_and(bb, {rand({1, 3, 32, 32}, 88), raw});
    const auto n = in.size();
    return grad_check([&] {
      auto crops = bilinear_sample(in[n - 2], affine_grid(build_theta(in[n - 1]), 32, 32));
      return probe(bb(crops, true, roi), 89);
    }, in, h);
  });
  return c;
}

}  // namespace

const std::vector<GradCheckCase>& gradcheck_cases() {
  static const std::vector<GradCheckCase> cases = build_cases();
  return cases;
}

const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> scopes{"op", "stn", "lbp", "backbone"};
  return scopes;
}

std::vector<GradCheckCase> gradcheck_cases(const std::string& scope) {
  if (scope != "all" && std::find(gradcheck_scopes().begin(), gradcheck_scopes().end(), scope) == gradcheck_scopes().end()) {
    throw std::invalid_argument("unknown gradcheck scope '" + scope + "' (op, stn, lbp, backbone, all)");
  }
  std::vector<GradCheckCase> out;
  for (const auto& c : gradcheck_cases())
    if (scope == "all" || c.scope == scope) out.push_back(c);
  return out;
}

GradCheckCase corrupted_gradcheck_case() {
  return {"corrupted_double", "fault", [](double h) {
            std::vector<D> in{rand({4}, 99)};
            auto broken = [&] {
              D y = in[0].clone();
              for (auto& v : y.data()) v *= 2.0;
              if (GradMode::enabled()) {
                y.set_requires_grad(true);
                Tape::current().record([x = in[0], y]() mutable {
                  auto gx = x.ensure_grad();
                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 3.0 * y.grad()[i];
                });
              }
              return sum(y);
            };
            return grad_check(broken, in, h);
          }};
}

}  // namespace tanet
