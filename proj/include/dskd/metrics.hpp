#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dskd/tensor.hpp"

namespace dskd {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct SegMetrics {
  double dsc = 0.0;
  double acc = 0.0;
  double sen = 0.0;
  double iou = 0.0;
  // Set when a ratio had a zero denominator and a convention was applied.
  bool degenerate = false;
};

enum class Averaging { kMacro, kMicro };

/// Binarizes `pred` at `threshold` (>= is foreground) and tallies against
/// the binary ground truth.
ConfusionCounts confusion(const Tensor& pred, const Tensor& ground_truth, double threshold = 0.5);

/// DSC, ACC, SEN and IOU. Empty ground truth with empty prediction scores 1
/// on every metric; empty ground truth with a non-empty prediction reports
/// SEN = 0. Both cases set `degenerate`.
SegMetrics compute_metrics(const ConfusionCounts& c);

/// Macro: mean of per-image metrics. Micro: metrics of the pooled counts.
/// `degenerate` is set if any contributing computation was degenerate.
SegMetrics aggregate(const std::vector<ConfusionCounts>& per_image, Averaging mode);

Averaging parse_averaging(const std::string& text);

}  // namespace dskd
