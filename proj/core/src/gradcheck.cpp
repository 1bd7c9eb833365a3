#include "tanet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace tanet {

namespace {
thread_local bool g_active = false;
thread_local std::uint64_t g_hash = 0;

constexpr std::uint64_t kFnvPrime = 1099511628211ULL;
constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
}  // namespace

bool KinkMonitor::active() noexcept { return g_active; }

void KinkMonitor::note(std::uint64_t decision) noexcept {
  g_hash = (g_hash ^ decision) * kFnvPrime;
}

void KinkMonitor::note_bits(const std::vector<bool>& bits) noexcept {
  std::uint64_t word = 0;
  std::size_t n = 0;
  for (bool b : bits) {
    word = (word << 1) | (b ? 1u : 0u);
    if (++n == 64) {
      note(word);
      word = 0;
      n = 0;
    }
  }
  note(word ^ (static_cast<std::uint64_t>(n) << 56));
}

KinkMonitor::Recording::Recording() : previous_active_(g_active), previous_hash_(g_hash) {
  g_active = true;
  g_hash = kFnvOffset;
}

KinkMonitor::Recording::~Recording() {
  g_active = previous_active_;
  g_hash = previous_hash_;
}

std::uint64_t KinkMonitor::Recording::fingerprint() const noexcept { return g_hash; }

GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::span<Tensor<double>> inputs, double h, double denom_floor) {
  Tape::current().clear();
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }

  std::uint64_t base_print = 0;
  {
    KinkMonitor::Recording rec;
    Tensor<double> out = f();
    if (out.numel() != 1) {
      throw ShapeError("grad_check needs a scalar function, got shape " + to_string(out.shape()));
    }
    base_print = rec.fingerprint();
    backward(out);
  }

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    if (in.has_grad()) {
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    } else {
      analytic.emplace_back(in.numel(), 0.0);
    }
  }

  auto probe = [&](std::uint64_t& print) {
    NoGradGuard no_grad;
    KinkMonitor::Recording rec;
    const double value = f().item();
    print = rec.fingerprint();
    return value;
  };

  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double fv[4];
      bool crossed = false;
      const double offsets[4] = {h, -h, 2.0 * h, -2.0 * h};
      for (int k = 0; k < 4 && !crossed; ++k) {
        std::uint64_t print = 0;
        values[i] = saved + offsets[k];
        fv[k] = probe(print);
        crossed = print != base_print;
      }
      values[i] = saved;
      if (crossed) {
        ++result.skipped;
        continue;
      }
      const double numeric = (8.0 * (fv[0] - fv[1]) - (fv[2] - fv[3])) / (12.0 * h);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (!(rel <= result.max_rel_error)) {
        result.max_rel_error = std::isnan(rel) ? INFINITY : rel;
        result.worst = "input" + std::to_string(t) + "#" + std::to_string(i);
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  Tape::current().clear();
  return result;
}

}  // namespace tanet
