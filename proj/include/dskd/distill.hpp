#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dskd/segnet.hpp"
#include "dskd/tensor.hpp"

namespace dskd {

enum class CountMode { kSoft, kHard };
enum class KlDirection { kStudentTeacher, kTeacherStudent };

std::string to_string(CountMode mode);
std::string to_string(KlDirection direction);
CountMode parse_count_mode(const std::string& text);
KlDirection parse_kl_direction(const std::string& text);

/// Partition of an HxW map into grid x grid non-overlapping patches.
struct PatchGrid {
  std::size_t grid = 4;
  std::size_t patch_height = 0;
  std::size_t patch_width = 0;

  /// Throws ShapeError if H or W is not divisible by `grid`.
  static PatchGrid for_map(std::size_t grid, std::size_t height, std::size_t width);
  std::size_t patches() const noexcept { return grid * grid; }
  std::size_t patch_area() const noexcept { return patch_height * patch_width; }
};

/// Per-patch [foreground, background] mass, shape [n, 2], rows in row-major
/// patch order.
struct CountMatrix {
  Tensor counts;
  std::size_t patch_area = 0;
};

struct DistillConfig {
  double tau = 3.0;
  std::size_t grid = 4;  // n = grid^2 patches
  double alpha_T = 0.5;
  bool normalize_counts = true;
  CountMode count_mode = CountMode::kSoft;
  KlDirection kl_direction = KlDirection::kStudentTeacher;
  double eps = 1e-7;
  bool use_ddl = true;
  bool use_psdl = true;

  void validate() const;
};

CountMatrix patch_counts(const Tensor& side_output, std::size_t grid, CountMode mode);

/// Flattens Z to [p_{1,0}, p_{1,1}, ..., p_{n,0}, p_{n,1}] logits (optionally
/// divided by the patch area) and applies a temperature softmax over all 2n.
Tensor prob_vector(const CountMatrix& counts, double tau, bool normalize_counts);

/// sum_j P_S[j] * log(P_S[j] / P_T[j]) with both sides clamped to [eps, 1].
/// P_T is treated as a constant.
Tensor kl_div(const Tensor& p_student, const Tensor& p_teacher, double eps = 1e-7);

/// Sum over depths of the KL divergence between student and teacher patch
/// distributions.
Tensor ddl(const std::vector<Tensor>& student_sides, const std::vector<Tensor>& teacher_sides,
           const DistillConfig& cfg);

/// alpha_T * t / T for epoch t in [1, T].
double alpha_at(int t, int total_epochs, double alpha_T);

/// alpha * teacher + (1 - alpha) * y, detached from any graph.
Tensor soften_label(const Tensor& teacher_pred, const Tensor& ground_truth, double alpha);

/// Pixel-mean binary cross entropy against soft targets.
Tensor psdl(const Tensor& student_pred, const Tensor& soft_label, double eps = 1e-7);

/// 1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps).
Tensor dice_loss(const Tensor& pred, const Tensor& ground_truth, double eps = 1e-7);

struct LossBreakdown {
  Tensor total;
  double ddl = 0.0;
  double psdl = 0.0;
  double dice = 0.0;
  double alpha = 0.0;
};

/// Epoch 1 trains on dice alone and must not be given a teacher; later
/// epochs require one and add the enabled distillation terms.
LossBreakdown total_loss(const ForwardResult& student, const ForwardResult* teacher,
                         const Tensor& ground_truth, const DistillConfig& cfg, int epoch,
                         int total_epochs);

}  // namespace dskd
