#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <iomanip>

#include "dskd/data.hpp"

namespace dskd {
namespace {

struct Canvas {
  int size;
  std::vector<Real> mask;

  void stamp(Real cx, Real cy, Real diameter) {
    const Real r = diameter / 2.0;
    const int x0 = static_cast<int>(std::floor(cx - r));
    const int x1 = static_cast<int>(std::ceil(cx + r));
    const int y0 = static_cast<int>(std::floor(cy - r));
    const int y1 = static_cast<int>(std::ceil(cy + r));
    for (int y = std::max(0, y0); y <= std::min(size - 1, y1); ++y) {
      for (int x = std::max(0, x0); x <= std::min(size - 1, x1); ++x) {
        const Real dx = x + 0.5 - cx;
        const Real dy = y + 0.5 - cy;
        if (dx * dx + dy * dy <= r * r) mask[static_cast<std::size_t>(y * size + x)] = 1.0;
      }
    }
    // A one-pixel vessel must still mark the pixel under its centreline.
    const int px = static_cast<int>(std::floor(cx));
    const int py = static_cast<int>(std::floor(cy));
    if (px >= 0 && px < size && py >= 0 && py < size) {
      mask[static_cast<std::size_t>(py * size + px)] = 1.0;
    }
  }
};

class VesselTree {
 public:
  VesselTree(Canvas& canvas, std::mt19937_64& rng, int max_level)
      : canvas_(canvas), rng_(rng), max_level_(max_level) {}

  void grow(Real x, Real y, Real heading, Real width, Real length, int level) {
    std::normal_distribution<Real> wobble(0.0, 0.07);
    std::uniform_real_distribution<Real> unit(0.0, 1.0);

    std::vector<Real> branch_at;
    if (level < max_level_) {
      const int children = 1 + static_cast<int>(unit(rng_) * 2.0);
      for (int c = 0; c < children; ++c) branch_at.push_back(length * (0.25 + 0.6 * unit(rng_)));
      std::sort(branch_at.begin(), branch_at.end());
    }
    std::size_t next_branch = 0;
    const Real margin = 4.0;
    Real curvature = 0.0;
    for (Real travelled = 0.0; travelled < length; travelled += 0.5) {
      canvas_.stamp(x, y, width);
      curvature = 0.8 * curvature + wobble(rng_);
      heading += curvature * 0.5;
      x += 0.5 * std::cos(heading);
      y += 0.5 * std::sin(heading);
      if (x < -margin || y < -margin || x > canvas_.size + margin || y > canvas_.size + margin) {
        return;
      }
      while (next_branch < branch_at.size() && travelled >= branch_at[next_branch]) {
        ++next_branch;
        const Real side = unit(rng_) < 0.5 ? -1.0 : 1.0;
        const Real turn = side * (0.4 + 0.6 * unit(rng_));
        const Real child_width = std::max(1.0, width * (0.55 + 0.2 * unit(rng_)));
        const Real child_length = (length - travelled) * (0.5 + 0.4 * unit(rng_)) + 6.0;
        grow(x, y, heading + turn, child_width, child_length, level + 1);
      }
    }
  }

 private:
  Canvas& canvas_;
  std::mt19937_64& rng_;
  int max_level_;
};

std::vector<Real> gaussian_blur(const std::vector<Real>& src, int size, Real sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<Real> kernel(static_cast<std::size_t>(2 * radius + 1));
  Real total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
    total += kernel[static_cast<std::size_t>(k + radius)];
  }
  for (auto& v : kernel) v /= total;

  auto at = [size](int y, int x) {
    return static_cast<std::size_t>(std::clamp(y, 0, size - 1) * size + std::clamp(x, 0, size - 1));
  };
  std::vector<Real> tmp(src.size()), out(src.size());
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Real acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<std::size_t>(k + radius)] * src[at(y, x + k)];
      tmp[static_cast<std::size_t>(y * size + x)] = acc;
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Real acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[at(y + k, x)];
      out[static_cast<std::size_t>(y * size + x)] = acc;
    }
  }
  return out;
}

ImageSample make_sample(std::uint64_t seed, int index, int size) {
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(index + 1)));
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  const Real s = static_cast<Real>(size);
  constexpr Real kPi = std::numbers::pi;

  Canvas canvas{size, std::vector<Real>(static_cast<std::size_t>(size * size), 0.0)};
  const int roots = 1 + static_cast<int>(unit(rng) * 3.0);
  for (int r = 0; r < roots; ++r) {
    // Enter from a random border, heading roughly towards the centre.
    const int edge = static_cast<int>(unit(rng) * 4.0);
    const Real along = s * (0.15 + 0.7 * unit(rng));
    Real x = 0.0, y = 0.0;
    switch (edge) {
      case 0: x = along; y = 0.0; break;
      case 1: x = s; y = along; break;
      case 2: x = along; y = s; break;
      default: x = 0.0; y = along; break;
    }
    const Real heading = std::atan2(s / 2 - y, s / 2 - x) + (unit(rng) - 0.5) * 0.9;
    const Real width = 2.5 + 3.5 * unit(rng);
    const int max_level = 2 + static_cast<int>(unit(rng) * 3.0);
    VesselTree tree(canvas, rng, max_level);
    tree.grow(x, y, heading, width, s * (0.6 + 0.5 * unit(rng)), 1);
  }

  // Smooth background from a few low-frequency waves.
  std::vector<Real> image(canvas.mask.size());
  const Real base = 0.5 + 0.15 * unit(rng);
  struct Wave { Real fx, fy, phase, amp; };
  std::vector<Wave> waves(3);
  for (auto& w : waves) {
    w = {(unit(rng) * 2.0 - 1.0) * 2.0 * kPi / s * 1.5, (unit(rng) * 2.0 - 1.0) * 2.0 * kPi / s * 1.5,
         unit(rng) * 2.0 * kPi, 0.04 + 0.06 * unit(rng)};
  }
  const Real contrast = 0.3 + 0.15 * unit(rng);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Real v = base;
      for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      const auto i = static_cast<std::size_t>(y * size + x);
      image[i] = v - contrast * canvas.mask[i];
    }
  }
  image = gaussian_blur(image, size, 0.7);
  std::normal_distribution<Real> noise(0.0, 0.03);
  for (auto& v : image) v = std::clamp(v + noise(rng), 0.0, 1.0);

  std::ostringstream id;
  id << "syn_" << seed << '_' << std::setw(4) << std::setfill('0') << index;
  const auto n = static_cast<std::size_t>(size);
  return {id.str(), Tensor::from_data({1, n, n}, std::move(image)),
          Tensor::from_data({1, n, n}, std::move(canvas.mask))};
}

}  // namespace

std::vector<ImageSample> generate_synthetic(std::uint64_t seed, int count, int size) {
  if (count <= 0) throw std::invalid_argument("generate_synthetic: count must be positive");
  if (size < 8) throw std::invalid_argument("generate_synthetic: size must be >= 8");
  std::vector<ImageSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(make_sample(seed, i, size));
  return out;
}

}  // namespace dskd
