#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dskd/segnet.hpp"

namespace dskd {

struct AdamWHyper {
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW update of a flat parameter block. `step` is the 1-based step
/// count after this update. Weight decay is applied to `w` before, and
/// separately from, the bias-corrected adaptive step.
void adamw_update(std::span<Real> w, std::span<const Real> g, std::span<Real> m,
                  std::span<Real> v, std::int64_t step, double lr, const AdamWHyper& hyper);

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWHyper hyper) : hyper_(hyper) {}

  /// Updates every parameter in place from its current grad; parameters the
  /// loss did not reach are treated as having zero gradient.
  void step(std::vector<NamedParameter>& params, double lr);

  std::int64_t steps() const noexcept { return steps_; }
  const AdamWHyper& hyper() const noexcept { return hyper_; }

  // Moment buffers, one per parameter in declaration order.
  std::vector<std::vector<Real>>& first_moments() noexcept { return m_; }
  std::vector<std::vector<Real>>& second_moments() noexcept { return v_; }
  const std::vector<std::vector<Real>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<Real>>& second_moments() const noexcept { return v_; }
  void set_steps(std::int64_t steps) noexcept { steps_ = steps; }

 private:
  AdamWHyper hyper_;
  std::int64_t steps_ = 0;
  std::vector<std::vector<Real>> m_;
  std::vector<std::vector<Real>> v_;
};

}  // namespace dskd
