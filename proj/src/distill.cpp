#include "dskd/distill.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dskd {
namespace {

void require_plane(const char* op, const Tensor& t) {
  if (t.rank() != 3) throw ShapeError(op, "rank", 3, t.rank());
  if (t.dim(0) != 1) throw ShapeError(op, "channels", 1, t.dim(0));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  for (std::size_t i = 0; i < 3; ++i) {
    if (a.dim(i) != b.dim(i)) {
      static const char* names[] = {"channels", "height", "width"};
      throw ShapeError(op, names[i], a.dim(i), b.dim(i));
    }
  }
}

void require_binary(const char* op, const Tensor& y) {
  for (Real v : y.data()) {
    if (v != 0.0 && v != 1.0) {
      std::ostringstream os;
      os << op << ": ground truth must be binary, found " << v;
      throw std::invalid_argument(os.str());
    }
  }
}

Tensor kl_terms(const Tensor& p, const Tensor& q, double eps) {
  return sum(p * (log(clamp(p, eps, 1.0)) - log(clamp(q, eps, 1.0))));
}

}  // namespace

std::string to_string(CountMode mode) { return mode == CountMode::kSoft ? "soft" : "hard"; }

std::string to_string(KlDirection direction) {
  return direction == KlDirection::kStudentTeacher ? "student_teacher" : "teacher_student";
}

CountMode parse_count_mode(const std::string& text) {
  if (text == "soft") return CountMode::kSoft;
  if (text == "hard") return CountMode::kHard;
  throw std::invalid_argument("unknown count mode '" + text + "' (expected soft|hard)");
}

KlDirection parse_kl_direction(const std::string& text) {
  if (text == "student_teacher") return KlDirection::kStudentTeacher;
  if (text == "teacher_student") return KlDirection::kTeacherStudent;
  throw std::invalid_argument("unknown KL direction '" + text +
                              "' (expected student_teacher|teacher_student)");
}

PatchGrid PatchGrid::for_map(std::size_t grid, std::size_t height, std::size_t width) {
  if (grid == 0) throw std::invalid_argument("PatchGrid: grid must be >= 1");
  if (height % grid != 0) throw ShapeError("PatchGrid", "height", grid * (height / grid + 1), height);
  if (width % grid != 0) throw ShapeError("PatchGrid", "width", grid * (width / grid + 1), width);
  return {grid, height / grid, width / grid};
}

void DistillConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("DistillConfig: tau must be positive");
  if (grid == 0) throw std::invalid_argument("DistillConfig: grid must be >= 1");
  if (!(alpha_T >= 0.0 && alpha_T <= 1.0)) {
    throw std::invalid_argument("DistillConfig: alpha_T must lie in [0, 1]");
  }
  if (!(eps > 0.0 && eps < 0.5)) throw std::invalid_argument("DistillConfig: eps must lie in (0, 0.5)");
}

CountMatrix patch_counts(const Tensor& side_output, std::size_t grid, CountMode mode) {
  require_plane("patch_counts", side_output);
  const auto pg = PatchGrid::for_map(grid, side_output.dim(1), side_output.dim(2));
  for (Real v : side_output.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      std::ostringstream os;
      os << "patch_counts: side output value " << v << " outside [0, 1]";
      throw std::invalid_argument(os.str());
    }
  }
  const std::size_t n = pg.patches();

  if (mode == CountMode::kHard) {
    // Indicator counting; carries no gradient.
    std::vector<Real> binary(side_output.numel());
    auto src = side_output.data();
    for (std::size_t i = 0; i < binary.size(); ++i) binary[i] = src[i] >= 0.5 ? 1.0 : 0.0;
    NoGradGuard guard;
    Tensor fg = block_sum(Tensor::from_data(side_output.shape(), std::move(binary)), grid);
    std::vector<Real> z(2 * n);
    const auto area = static_cast<Real>(pg.patch_area());
    for (std::size_t m = 0; m < n; ++m) {
      z[2 * m] = fg[m];
      z[2 * m + 1] = area - fg[m];
    }
    return {Tensor::from_data({n, 2}, std::move(z)), pg.patch_area()};
  }

  Tensor fg = reshape(block_sum(side_output, grid), {n, 1});
  Tensor bg = reshape(block_sum(1.0 - side_output, grid), {n, 1});
  return {concat({fg, bg}, 1), pg.patch_area()};
}

Tensor prob_vector(const CountMatrix& counts, double tau, bool normalize_counts) {
  if (!(tau > 0.0)) {
    std::ostringstream os;
    os << "prob_vector: temperature must be positive, got " << tau;
    throw std::invalid_argument(os.str());
  }
  Tensor logits = reshape(counts.counts, {counts.counts.numel()});
  if (normalize_counts) logits = scale(logits, 1.0 / static_cast<Real>(counts.patch_area));
  return stable_softmax(logits, tau);
}

Tensor kl_div(const Tensor& p_student, const Tensor& p_teacher, double eps) {
  if (p_student.numel() != p_teacher.numel()) {
    throw ShapeError("kl_div", "length", p_student.numel(), p_teacher.numel());
  }
  return kl_terms(p_student, reshape(p_teacher.detach(), p_student.shape()), eps);
}

Tensor ddl(const std::vector<Tensor>& student_sides, const std::vector<Tensor>& teacher_sides,
           const DistillConfig& cfg) {
  if (student_sides.size() != teacher_sides.size()) {
    throw ShapeError("ddl", "depth", student_sides.size(), teacher_sides.size());
  }
  if (student_sides.empty()) throw ShapeError("ddl", "depth", 1, 0);
  Tensor total;
  for (std::size_t i = 0; i < student_sides.size(); ++i) {
    Tensor ps = prob_vector(patch_counts(student_sides[i], cfg.grid, cfg.count_mode), cfg.tau,
                            cfg.normalize_counts);
    Tensor pt = prob_vector(patch_counts(teacher_sides[i].detach(), cfg.grid, cfg.count_mode),
                            cfg.tau, cfg.normalize_counts);
    Tensor term = cfg.kl_direction == KlDirection::kStudentTeacher
                      ? kl_div(ps, pt, cfg.eps)
                      : kl_terms(pt, ps, cfg.eps);
    total = total.defined() ? total + term : term;
  }
  return total;
}

double alpha_at(int t, int total_epochs, double alpha_T) {
  if (total_epochs < 1) throw std::invalid_argument("alpha_at: total epochs must be >= 1");
  if (t < 1 || t > total_epochs) {
    throw std::out_of_range("alpha_at: epoch " + std::to_string(t) + " outside [1, " +
                            std::to_string(total_epochs) + "]");
  }
  return alpha_T * static_cast<double>(t) / static_cast<double>(total_epochs);
}

Tensor soften_label(const Tensor& teacher_pred, const Tensor& ground_truth, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    std::ostringstream os;
    os << "soften_label: alpha " << alpha << " outside [0, 1]";
    throw std::invalid_argument(os.str());
  }
  require_plane("soften_label", teacher_pred);
  require_plane("soften_label", ground_truth);
  require_same("soften_label", teacher_pred, ground_truth);
  require_binary("soften_label", ground_truth);
  auto t = teacher_pred.data();
  auto y = ground_truth.data();
  std::vector<Real> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * t[i] + (1.0 - alpha) * y[i];
  return Tensor::from_data(ground_truth.shape(), std::move(out));
}

Tensor psdl(const Tensor& student_pred, const Tensor& soft_label, double eps) {
  require_plane("psdl", student_pred);
  require_plane("psdl", soft_label);
  require_same("psdl", student_pred, soft_label);
  Tensor target = soft_label.detach();
  Tensor p = clamp(student_pred, eps, 1.0 - eps);
  Tensor ll = target * log(p) + (1.0 - target) * log(1.0 - p);
  return scale(mean(ll), -1.0);
}

Tensor dice_loss(const Tensor& pred, const Tensor& ground_truth, double eps) {
  require_plane("dice_loss", pred);
  require_plane("dice_loss", ground_truth);
  require_same("dice_loss", pred, ground_truth);
  Tensor y = ground_truth.detach();
  Tensor numerator = add_scalar(scale(sum(pred * y), 2.0), eps);
  Tensor denominator = add_scalar(sum(pred) + sum(y), eps);
  return 1.0 - numerator / denominator;
}

LossBreakdown total_loss(const ForwardResult& student, const ForwardResult* teacher,
                         const Tensor& ground_truth, const DistillConfig& cfg, int epoch,
                         int total_epochs) {
  LossBreakdown out;
  Tensor dice = dice_loss(student.prediction, ground_truth, cfg.eps);
  out.dice = dice.item();
  if (epoch == 1) {
    if (teacher) throw std::invalid_argument("total_loss: no teacher exists at epoch 1");
    out.total = dice;
    return out;
  }
  if (!teacher) {
    throw std::invalid_argument("total_loss: a teacher is required at epoch " +
                                std::to_string(epoch));
  }
  out.alpha = alpha_at(epoch, total_epochs, cfg.alpha_T);
  out.total = dice;
  if (cfg.use_ddl) {
    Tensor d = ddl(student.side_outputs, teacher->side_outputs, cfg);
    out.ddl = d.item();
    out.total = d + out.total;
  }
  if (cfg.use_psdl) {
    Tensor p = psdl(student.prediction,
                    soften_label(teacher->prediction, ground_truth, out.alpha), cfg.eps);
    out.psdl = p.item();
    out.total = out.total + p;
  }
  return out;
}

}  // namespace dskd
