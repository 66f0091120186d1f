#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dskd/tensor.hpp"

namespace dskd {

struct GradCheckTolerance {
  double step = 1e-4;
  double rtol = 1e-3;
  double atol = 1e-5;
};

struct GradCheckResult {
  std::string name;
  int seed = 0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  // Elements whose stencil x +- step crossed a relu/clamp/max-pool switch.
  // Central differences are meaningless there, so they are not compared.
  std::size_t skipped = 0;
  double max_abs_error = 0.0;
  // Largest |analytic - numeric| / (atol + rtol * |numeric|); <= 1 passes.
  double worst_ratio = 0.0;

  // At least 80% of elements must actually be compared.
  bool passed() const noexcept {
    return failures == 0 && checked > 0 && skipped * 5 <= checked + skipped;
  }
};

/// Compares the backward() gradient of `loss` with respect to every element
/// of every tensor in `wrt` against central differences. `loss` is evaluated
/// repeatedly and must read the current values of the tensors in `wrt`.
GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                std::vector<Tensor> wrt, const GradCheckTolerance& tol = {});

struct GradCheckReport {
  std::vector<GradCheckResult> results;
  bool passed() const noexcept;
};

/// Every primitive, plus dice, PSDL, DDL and the total loss on a depth-2
/// network with 8x8 inputs, for seeds 1..`seeds`.
GradCheckReport run_gradcheck_suite(int seeds, const GradCheckTolerance& tol = {});

}  // namespace dskd
