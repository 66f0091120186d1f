#include "dskd/metrics.hpp"

#include <stdexcept>

namespace dskd {

ConfusionCounts confusion(const Tensor& pred, const Tensor& ground_truth, double threshold) {
  if (pred.shape() != ground_truth.shape()) {
    throw ShapeError("confusion", "numel", ground_truth.numel(), pred.numel());
  }
  ConfusionCounts c;
  auto p = pred.data();
  auto y = ground_truth.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool predicted = p[i] >= threshold;
    const bool actual = y[i] >= 0.5;
    if (predicted && actual) {
      ++c.tp;
    } else if (predicted) {
      ++c.fp;
    } else if (actual) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

SegMetrics compute_metrics(const ConfusionCounts& c) {
  SegMetrics m;
  const auto tp = static_cast<double>(c.tp);
  const auto fp = static_cast<double>(c.fp);
  const auto fn = static_cast<double>(c.fn);
  const auto total = static_cast<double>(c.total());

  if (c.tp + c.fp + c.fn == 0) {
    // Nothing to find and nothing predicted.
    m = {1.0, 1.0, 1.0, 1.0, true};
    return m;
  }
  m.dsc = 2.0 * tp / (2.0 * tp + fp + fn);
  m.iou = tp / (tp + fp + fn);
  m.acc = (tp + static_cast<double>(c.tn)) / total;
  if (c.tp + c.fn == 0) {
    m.sen = 0.0;
    m.degenerate = true;
  } else {
    m.sen = tp / (tp + fn);
  }
  return m;
}

SegMetrics aggregate(const std::vector<ConfusionCounts>& per_image, Averaging mode) {
  if (per_image.empty()) throw std::invalid_argument("aggregate: no images");
  if (mode == Averaging::kMicro) {
    ConfusionCounts pooled;
    for (const auto& c : per_image) pooled += c;
    return compute_metrics(pooled);
  }
  SegMetrics out;
  for (const auto& c : per_image) {
    const SegMetrics m = compute_metrics(c);
    out.dsc += m.dsc;
    out.acc += m.acc;
    out.sen += m.sen;
    out.iou += m.iou;
    out.degenerate = out.degenerate || m.degenerate;
  }
  const auto n = static_cast<double>(per_image.size());
  out.dsc /= n;
  out.acc /= n;
  out.sen /= n;
  out.iou /= n;
  return out;
}

Averaging parse_averaging(const std::string& text) {
  if (text == "macro") return Averaging::kMacro;
  if (text == "micro") return Averaging::kMicro;
  throw std::invalid_argument("unknown averaging '" + text + "' (expected macro|micro)");
}

}  // namespace dskd
