#include "dskd/gradcheck.hpp"

#include <cmath>
#include <random>

#include "dskd/distill.hpp"
#include "dskd/segnet.hpp"

namespace dskd {

GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                std::vector<Tensor> wrt, const GradCheckTolerance& tol) {
  GradCheckResult result;
  result.name = name;

  std::uint64_t base = 0;
  Tensor out;
  {
    BranchTrace trace;
    out = loss();
    base = trace.signature();
  }
  out.backward();
  std::vector<std::vector<Real>> analytic;
  for (const auto& t : wrt) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  NoGradGuard guard;
  auto traced = [&](std::uint64_t& signature) {
    BranchTrace trace;
    const Real value = loss().item();
    signature = trace.signature();
    return value;
  };
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto values = wrt[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real saved = values[i];
      std::uint64_t sig_plus = 0;
      std::uint64_t sig_minus = 0;
      values[i] = saved + tol.step;
      const Real plus = traced(sig_plus);
      values[i] = saved - tol.step;
      const Real minus = traced(sig_minus);
      values[i] = saved;
      if (sig_plus != base || sig_minus != base) {
        ++result.skipped;
        continue;
      }

      const Real numeric = (plus - minus) / (2.0 * tol.step);
      const Real err = std::abs(analytic[k][i] - numeric);
      const Real ratio = err / (tol.atol + tol.rtol * std::abs(numeric));
      result.max_abs_error = std::max(result.max_abs_error, err);
      result.worst_ratio = std::max(result.worst_ratio, ratio);
      if (!(ratio <= 1.0)) ++result.failures;
      ++result.checked;
    }
  }
  return result;
}

bool GradCheckReport::passed() const noexcept {
  if (results.empty()) return false;
  for (const auto& r : results) {
    if (!r.passed()) return false;
  }
  return true;
}

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, Real lo, Real hi, bool requires_grad) {
  std::uniform_real_distribution<Real> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, either sign: keeps the relu kink outside
// the finite-difference stencil.
Tensor away_from_zero(std::mt19937_64& rng, Shape shape, bool requires_grad) {
  std::uniform_real_distribution<Real> mag(0.05, 1.5);
  std::bernoulli_distribution sign(0.5);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Projects an op's output onto fixed random weights to get a scalar.
std::function<Tensor()> project(std::mt19937_64& rng, const Shape& out_shape,
                                std::function<Tensor()> op) {
  Tensor weights = random_tensor(rng, out_shape, -1.0, 1.0, false);
  return [weights, op = std::move(op)]() { return sum(op() * weights); };
}

void primitive_checks(int seed, const GradCheckTolerance& tol, GradCheckReport& report) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 7919u + 17u);
  auto record = [&](const std::string& name, const Shape& out_shape,
                    std::function<Tensor()> op, std::vector<Tensor> wrt) {
    auto result = check_gradients(name, project(rng, out_shape, std::move(op)), std::move(wrt), tol);
    result.seed = seed;
    report.results.push_back(std::move(result));
  };

  const Shape s{2, 3, 4};
  Tensor a = random_tensor(rng, s, -1.0, 1.0, true);
  Tensor b = random_tensor(rng, s, -1.0, 1.0, true);
  Tensor pos = random_tensor(rng, s, 0.5, 2.0, true);
  Tensor kinked = away_from_zero(rng, s, true);

  record("add", s, [=] { return add(a, b); }, {a, b});
  record("sub", s, [=] { return sub(a, b); }, {a, b});
  record("mul", s, [=] { return mul(a, b); }, {a, b});
  record("div", s, [=] { return div(a, pos); }, {a, pos});
  record("scale", s, [=] { return scale(a, -2.5); }, {a});
  record("add_scalar", s, [=] { return add_scalar(a, 0.75); }, {a});
  record("relu", s, [=] { return relu(kinked); }, {kinked});
  record("sigmoid", s, [=] { return sigmoid(scale(a, 3.0)); }, {a});
  record("log", s, [=] { return log(pos); }, {pos});
  Tensor straddle = random_tensor(rng, s, -1.0, 1.0, true);
  for (auto& v : straddle.mutable_data()) {
    if (std::abs(v + 0.3) < 0.01 || std::abs(v - 0.4) < 0.01) v += 0.05;
  }
  record("clamp", s, [=] { return clamp(straddle, -0.3, 0.4); }, {straddle});
  record("sum", {1}, [=] { return sum(a); }, {a});
  record("mean", {1}, [=] { return mean(a); }, {a});
  record("reshape", {6, 4}, [=] { return reshape(a, {6, 4}); }, {a});
  record("concat", {2, 6, 4}, [=] { return concat({a, b}, 1); }, {a, b});

  Tensor plane = random_tensor(rng, {2, 8, 8}, 0.0, 1.0, true);
  record("block_sum", {2, 16}, [=] { return block_sum(plane, 4); }, {plane});
  record("max_pool2x2", {2, 4, 4}, [=] { return max_pool2x2(plane); }, {plane});

  Tensor img = random_tensor(rng, {2, 5, 5}, -1.0, 1.0, true);
  Tensor kernel = random_tensor(rng, {3, 2, 3, 3}, -1.0, 1.0, true);
  Tensor bias = random_tensor(rng, {3}, -1.0, 1.0, true);
  record("conv2d", {3, 5, 5}, [=] { return conv2d(img, kernel, bias, 1); }, {img, kernel, bias});

  Tensor small = random_tensor(rng, {2, 3, 3}, -1.0, 1.0, true);
  record("bilinear_upsample_x2", {2, 6, 6}, [=] { return bilinear_upsample(small, 2); }, {small});
  record("bilinear_upsample_x4", {2, 12, 12}, [=] { return bilinear_upsample(small, 4); }, {small});

  Tensor logits = random_tensor(rng, {8}, -2.0, 2.0, true);
  record("stable_softmax_tau1", {8}, [=] { return stable_softmax(logits, 1.0); }, {logits});
  record("stable_softmax_tau3", {8}, [=] { return stable_softmax(logits, 3.0); }, {logits});
}

void loss_checks(int seed, const GradCheckTolerance& tol, GradCheckReport& report) {
  const NetworkConfig cfg{2, 4, 1, 8, 8};
  SegNetwork student(cfg, static_cast<std::uint64_t>(seed));
  const TeacherSnapshot teacher(SegNetwork(cfg, static_cast<std::uint64_t>(seed) + 1000u), 1);

  std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 104729u + 3u);
  Tensor image = random_tensor(rng, {1, 8, 8}, 0.0, 1.0, false);
  std::vector<Real> mask(64, 0.0);
  std::bernoulli_distribution fg(0.3);
  for (auto& m : mask) m = fg(rng) ? 1.0 : 0.0;
  mask[0] = 1.0;
  const Tensor y = Tensor::from_data({1, 8, 8}, mask);
  const ForwardResult t_out = teacher.forward(image);

  // Zero biases put every pre-activation fed by dead channels or padding
  // exactly on the relu kink; small random biases give a generic point.
  std::uniform_real_distribution<Real> bias_dist(-0.1, 0.1);
  std::vector<Tensor> params;
  for (const auto& p : student.parameters()) {
    Tensor value = p.value;
    if (p.name.ends_with(".bias")) {
      for (auto& v : value.mutable_data()) v = bias_dist(rng);
    }
    params.push_back(value);
  }

  DistillConfig dcfg;  // tau 3, grid 4, normalized soft counts
  DistillConfig raw = dcfg;
  raw.normalize_counts = false;
  raw.tau = 0.5;
  DistillConfig reversed = raw;
  reversed.kl_direction = KlDirection::kTeacherStudent;

  auto record = [&](const std::string& name, std::function<Tensor()> f) {
    auto result = check_gradients(name, f, params, tol);
    result.seed = seed;
    report.results.push_back(std::move(result));
  };

  record("loss_dice", [&] { return dice_loss(student.forward(image, false).prediction, y); });
  record("loss_psdl", [&] {
    return psdl(student.forward(image, false).prediction, soften_label(t_out.prediction, y, 0.3));
  });
  record("loss_ddl", [&] { return ddl(student.forward(image).side_outputs, t_out.side_outputs, dcfg); });
  record("loss_ddl_raw_counts",
         [&] { return ddl(student.forward(image).side_outputs, t_out.side_outputs, raw); });
  record("loss_ddl_teacher_student",
         [&] { return ddl(student.forward(image).side_outputs, t_out.side_outputs, reversed); });
  record("loss_total", [&] {
    return total_loss(student.forward(image), &t_out, y, dcfg, 2, 10).total;
  });
}

}  // namespace

GradCheckReport run_gradcheck_suite(int seeds, const GradCheckTolerance& tol) {
  GradCheckReport report;
  for (int seed = 1; seed <= seeds; ++seed) {
    primitive_checks(seed, tol, report);
    loss_checks(seed, tol, report);
  }
  return report;
}

}  // namespace dskd
