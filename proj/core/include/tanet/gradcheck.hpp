#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tanet/tensor.hpp"

namespace tanet {

/// Fingerprints the discrete branch decisions (ReLU signs, sampler cells,
/// smooth-L1 regimes) taken during a forward pass. Two evaluations with the
/// same fingerprint lie on the same smooth piece of the function.
class KinkMonitor {
 public:
  static bool active() noexcept;
  static void note(std::uint64_t decision) noexcept;
  static void note_bits(const std::vector<bool>& bits) noexcept;

  class Recording {
   public:
    Recording();
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;
    std::uint64_t fingerprint() const noexcept;

   private:
    bool previous_active_;
    std::uint64_t previous_hash_;
  };
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +-h probes crossed a non-differentiable point.
  std::size_t skipped = 0;
  /// "input#index" of the worst coordinate.
  std::string worst;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against a
/// five-point central difference, coordinate by coordinate. Relative error
/// uses the denominator max(|analytic|, |numeric|, denom_floor), so gradients
/// smaller than the floor are judged on absolute error: finite differences
/// cannot resolve them beyond summation roundoff (order eps*sum|terms|/h).
/// Coordinates whose probes change the kink fingerprint are skipped and
/// counted, since finite differences are meaningless across a kink.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::span<Tensor<double>> inputs, double h = 1e-3,
                           double denom_floor = 1e-4);

}  // namespace tanet
