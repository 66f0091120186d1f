#include "dskd/optim.hpp"

#include <cmath>

namespace dskd {

void adamw_update(std::span<Real> w, std::span<const Real> g, std::span<Real> m,
                  std::span<Real> v, std::int64_t step, double lr, const AdamWHyper& hyper) {
  if (g.size() != w.size()) throw ShapeError("adamw_update", "grad", w.size(), g.size());
  if (m.size() != w.size()) throw ShapeError("adamw_update", "first_moment", w.size(), m.size());
  if (v.size() != w.size()) throw ShapeError("adamw_update", "second_moment", w.size(), v.size());
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * hyper.weight_decay;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] *= decay;
    m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
    v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    w[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

void AdamW::step(std::vector<NamedParameter>& params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) {
    throw ShapeError("AdamW::step", "parameter count", m_.size(), params.size());
  }
  ++steps_;
  std::vector<Real> zeros;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = params[k].value;
    std::span<const Real> g = t.grad();
    if (!t.has_grad()) {
      zeros.assign(t.numel(), 0.0);
      g = zeros;
    }
    adamw_update(t.mutable_data(), g, m_[k], v_[k], steps_, lr, hyper_);
  }
}

}  // namespace dskd
