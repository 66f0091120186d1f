#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dskd/tensor.hpp"

namespace dskd {
namespace {

using detail::Node;

// Gradient buffer of parent `i`, or nullptr when it takes no gradient.
Real* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

const std::vector<Real>& data_of(Node& self, std::size_t i) {
  return self.parents[i]->data;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size()) throw ShapeError(op, "rank", sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      throw ShapeError(op, "axis " + std::to_string(i), sa[i], sb[i]);
    }
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) throw ShapeError(op, "rank", rank, a.rank());
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd bwd) {
  auto x = a.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [bwd](Node& self) {
    Real* g = grad_of(self, 0);
    if (!g) return;
    const auto& x = data_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      g[i] += self.grad[i] * bwd(x[i], self.data[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Real* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = data_of(self, 0);
    const auto& y = data_of(self, 1);
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (Real* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (y[i] == 0.0) throw std::domain_error("div: zero denominator");
    out[i] = x[i] / y[i];
  }
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& y = data_of(self, 1);
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < y.size(); ++i) g[i] += self.grad[i] / y[i];
    }
    if (Real* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < y.size(); ++i) {
        g[i] -= self.grad[i] * self.data[i] / y[i];
      }
    }
  });
}

Tensor scale(const Tensor& a, Real factor) {
  return unary(
      a, [factor](Real x) { return x * factor; },
      [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real offset) {
  return unary(
      a, [offset](Real x) { return x + offset; },
      [](Real, Real) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  if (BranchTrace* trace = detail::active_trace()) {
    for (Real x : a.data()) trace->mix(x > 0.0 ? 1 : 0);
  }
  return unary(
      a, [](Real x) { return x > 0.0 ? x : 0.0; },
      [](Real x, Real) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](Real x) {
        // Branching keeps exp() from overflowing for large |x|.
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const Real e = std::exp(x);
        return e / (1.0 + e);
      },
      [](Real, Real y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
  for (Real x : a.data()) {
    if (!(x > 0.0)) {
      std::ostringstream os;
      os << "log: non-positive input " << x;
      throw std::domain_error(os.str());
    }
  }
  return unary(
      a, [](Real x) { return std::log(x); },
      [](Real x, Real) { return 1.0 / x; });
}

Tensor clamp(const Tensor& a, Real lo, Real hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  if (BranchTrace* trace = detail::active_trace()) {
    for (Real x : a.data()) trace->mix(x < lo ? 0 : (x > hi ? 2 : 1));
  }
  return unary(
      a, [lo, hi](Real x) { return std::clamp(x, lo, hi); },
      [lo, hi](Real x, Real) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  Real total = 0.0;
  for (Real x : a.data()) total += x;
  return make_result({1}, {total}, {a}, [](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      const std::size_t n = data_of(self, 0).size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean", "numel", 1, 0);
  return scale(sum(a), 1.0 / static_cast<Real>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape", "numel", a.numel(), shape_numel(shape));
  }
  std::vector<Real> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    if (Real* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis", first.size(), axis);
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat", "rank", first.size(), s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat", "axis " + std::to_string(i), first[i], s[i]);
      }
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }

  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<Real> out(outer * out_row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto x = parts[k].data();
    const std::size_t row = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.begin() + o * row, row, out.begin() + o * out_row + offset);
    }
    offset += row;
  }

  return make_result(out_shape, std::move(out), parts,
                     [extents, outer, inner, out_row](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < extents.size(); ++k) {
                         const std::size_t row = extents[k] * inner;
                         if (Real* g = grad_of(self, k)) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             const Real* src = self.grad.data() + o * out_row + offset;
                             Real* dst = g + o * row;
                             for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
                           }
                         }
                         offset += row;
                       }
                     });
}

Tensor block_sum(const Tensor& a, std::size_t grid) {
  require_rank("block_sum", a, 3);
  const std::size_t channels = a.dim(0);
  const std::size_t height = a.dim(1);
  const std::size_t width = a.dim(2);
  if (grid == 0 || height % grid != 0) throw ShapeError("block_sum", "height", grid, height);
  if (width % grid != 0) throw ShapeError("block_sum", "width", grid, width);
  const std::size_t bh = height / grid;
  const std::size_t bw = width / grid;
  const std::size_t blocks = grid * grid;

  auto x = a.data();
  std::vector<Real> out(channels * blocks, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t col = 0; col < width; ++col) {
        out[c * blocks + (r / bh) * grid + col / bw] +=
            x[(c * height + r) * width + col];
      }
    }
  }
  return make_result({channels, blocks}, std::move(out), {a},
                     [=](Node& self) {
                       Real* g = grad_of(self, 0);
                       if (!g) return;
                       for (std::size_t c = 0; c < channels; ++c) {
                         for (std::size_t r = 0; r < height; ++r) {
                           for (std::size_t col = 0; col < width; ++col) {
                             g[(c * height + r) * width + col] +=
                                 self.grad[c * blocks + (r / bh) * grid + col / bw];
                           }
                         }
                       }
                     });
}

Tensor max_pool2x2(const Tensor& input) {
  require_rank("max_pool2x2", input, 3);
  const std::size_t channels = input.dim(0);
  const std::size_t height = input.dim(1);
  const std::size_t width = input.dim(2);
  if (height % 2 != 0) throw ShapeError("max_pool2x2", "height", height + 1, height);
  if (width % 2 != 0) throw ShapeError("max_pool2x2", "width", width + 1, width);
  const std::size_t oh = height / 2;
  const std::size_t ow = width / 2;

  auto x = input.data();
  std::vector<Real> out(channels * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (c * height + 2 * i) * width + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = (c * height + 2 * i + di) * width + 2 * j + dj;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (c * oh + i) * ow + j;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  if (BranchTrace* trace = detail::active_trace()) {
    for (std::size_t best : argmax) trace->mix(best);
  }
  return make_result({channels, oh, ow}, std::move(out), {input},
                     [argmax = std::move(argmax)](Node& self) {
                       Real* g = grad_of(self, 0);
                       if (!g) return;
                       for (std::size_t o = 0; o < argmax.size(); ++o) {
                         g[argmax[o]] += self.grad[o];
                       }
                     });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t padding) {
  require_rank("conv2d", input, 3);
  require_rank("conv2d", kernel, 4);
  require_rank("conv2d", bias, 1);
  const std::size_t cin = input.dim(0);
  const std::size_t height = input.dim(1);
  const std::size_t width = input.dim(2);
  const std::size_t cout = kernel.dim(0);
  const std::size_t ksize = kernel.dim(2);
  if (kernel.dim(1) != cin) throw ShapeError("conv2d", "in_channels", kernel.dim(1), cin);
  if (kernel.dim(3) != ksize) throw ShapeError("conv2d", "kernel_width", ksize, kernel.dim(3));
  if (bias.dim(0) != cout) throw ShapeError("conv2d", "out_channels", cout, bias.dim(0));
  if (height + 2 * padding < ksize) {
    throw ShapeError("conv2d", "height", ksize, height + 2 * padding);
  }
  if (width + 2 * padding < ksize) {
    throw ShapeError("conv2d", "width", ksize, width + 2 * padding);
  }
  const std::size_t oh = height + 2 * padding - ksize + 1;
  const std::size_t ow = width + 2 * padding - ksize + 1;
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // For output column x and tap kx the source column is x + kx - pad; the
  // valid x range is computed once per tap so the inner loop is contiguous.
  struct Span1D {
    std::size_t lo, hi;  // valid output range [lo, hi)
    std::ptrdiff_t shift;
  };
  auto valid = [pad](std::size_t tap, std::size_t out_extent, std::size_t in_extent) {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(tap) - pad;
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>(out_extent),
        static_cast<std::ptrdiff_t>(in_extent) - shift);
    return Span1D{static_cast<std::size_t>(lo),
                  static_cast<std::size_t>(std::max(lo, hi)), shift};
  };
  std::vector<Span1D> rows(ksize), cols(ksize);
  for (std::size_t k = 0; k < ksize; ++k) {
    rows[k] = valid(k, oh, height);
    cols[k] = valid(k, ow, width);
  }

  auto x = input.data();
  auto w = kernel.data();
  auto b = bias.data();
  std::vector<Real> out(cout * oh * ow);
  for (std::size_t co = 0; co < cout; ++co) {
    Real* o = out.data() + co * oh * ow;
    std::fill(o, o + oh * ow, b[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const Real* xin = x.data() + ci * height * width;
      const Real* wk = w.data() + (co * cin + ci) * ksize * ksize;
      for (std::size_t ky = 0; ky < ksize; ++ky) {
        const auto& r = rows[ky];
        for (std::size_t kx = 0; kx < ksize; ++kx) {
          const auto& c = cols[kx];
          const Real wv = wk[ky * ksize + kx];
          for (std::size_t y = r.lo; y < r.hi; ++y) {
            Real* orow = o + y * ow;
            const Real* irow = xin + (static_cast<std::ptrdiff_t>(y) + r.shift) *
                                         static_cast<std::ptrdiff_t>(width) + c.shift;
            for (std::size_t xo = c.lo; xo < c.hi; ++xo) orow[xo] += wv * irow[xo];
          }
        }
      }
    }
  }

  return make_result(
      {cout, oh, ow}, std::move(out), {input, kernel, bias},
      [=](Node& self) {
        const auto& xin_all = data_of(self, 0);
        const auto& w_all = data_of(self, 1);
        Real* gx = grad_of(self, 0);
        Real* gw = grad_of(self, 1);
        Real* gb = grad_of(self, 2);
        for (std::size_t co = 0; co < cout; ++co) {
          const Real* go = self.grad.data() + co * oh * ow;
          if (gb) {
            Real acc = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += go[i];
            gb[co] += acc;
          }
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const Real* xin = xin_all.data() + ci * height * width;
            Real* gxin = gx ? gx + ci * height * width : nullptr;
            const std::size_t kbase = (co * cin + ci) * ksize * ksize;
            for (std::size_t ky = 0; ky < ksize; ++ky) {
              const auto& r = rows[ky];
              for (std::size_t kx = 0; kx < ksize; ++kx) {
                const auto& c = cols[kx];
                const Real wv = w_all[kbase + ky * ksize + kx];
                Real acc = 0.0;
                for (std::size_t y = r.lo; y < r.hi; ++y) {
                  const Real* grow = go + y * ow;
                  const std::ptrdiff_t src = (static_cast<std::ptrdiff_t>(y) + r.shift) *
                                                 static_cast<std::ptrdiff_t>(width) + c.shift;
                  const Real* irow = xin + src;
                  if (gw) {
                    for (std::size_t xo = c.lo; xo < c.hi; ++xo) acc += grow[xo] * irow[xo];
                  }
                  if (gxin) {
                    Real* girow = gxin + src;
                    for (std::size_t xo = c.lo; xo < c.hi; ++xo) girow[xo] += wv * grow[xo];
                  }
                }
                if (gw) gw[kbase + ky * ksize + kx] += acc;
              }
            }
          }
        }
      });
}

Tensor bilinear_upsample(const Tensor& input, int factor) {
  if (factor <= 0) {
    throw std::invalid_argument("bilinear_upsample: factor must be positive, got " +
                                std::to_string(factor));
  }
  require_rank("bilinear_upsample", input, 3);
  const std::size_t channels = input.dim(0);
  const std::size_t h = input.dim(1);
  const std::size_t w = input.dim(2);
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t oh = h * f;
  const std::size_t ow = w * f;

  struct Tap {
    std::size_t i0, i1;
    Real frac;
  };
  auto taps = [f](std::size_t out_extent, std::size_t in_extent) {
    std::vector<Tap> t(out_extent);
    const Real limit = static_cast<Real>(in_extent - 1);
    for (std::size_t i = 0; i < out_extent; ++i) {
      Real src = (static_cast<Real>(i) + 0.5) / static_cast<Real>(f) - 0.5;
      src = std::clamp(src, 0.0, limit);
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in_extent - 1);
      t[i] = {i0, i1, src - static_cast<Real>(i0)};
    }
    return t;
  };
  const auto ty = taps(oh, h);
  const auto tx = taps(ow, w);

  auto x = input.data();
  std::vector<Real> out(channels * oh * ow);
  for (std::size_t c = 0; c < channels; ++c) {
    const Real* src = x.data() + c * h * w;
    Real* dst = out.data() + c * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& a = ty[i];
      const Real* r0 = src + a.i0 * w;
      const Real* r1 = src + a.i1 * w;
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& b = tx[j];
        const Real top = (1.0 - b.frac) * r0[b.i0] + b.frac * r0[b.i1];
        const Real bot = (1.0 - b.frac) * r1[b.i0] + b.frac * r1[b.i1];
        dst[i * ow + j] = (1.0 - a.frac) * top + a.frac * bot;
      }
    }
  }
  return make_result({channels, oh, ow}, std::move(out), {input},
                     [=](Node& self) {
                       Real* g = grad_of(self, 0);
                       if (!g) return;
                       for (std::size_t c = 0; c < channels; ++c) {
                         Real* gsrc = g + c * h * w;
                         const Real* gout = self.grad.data() + c * oh * ow;
                         for (std::size_t i = 0; i < oh; ++i) {
                           const auto& a = ty[i];
                           for (std::size_t j = 0; j < ow; ++j) {
                             const auto& b = tx[j];
                             const Real v = gout[i * ow + j];
                             gsrc[a.i0 * w + b.i0] += (1.0 - a.frac) * (1.0 - b.frac) * v;
                             gsrc[a.i0 * w + b.i1] += (1.0 - a.frac) * b.frac * v;
                             gsrc[a.i1 * w + b.i0] += a.frac * (1.0 - b.frac) * v;
                             gsrc[a.i1 * w + b.i1] += a.frac * b.frac * v;
                           }
                         }
                       }
                     });
}

Tensor stable_softmax(const Tensor& logits, Real tau) {
  if (!(tau > 0.0)) {
    std::ostringstream os;
    os << "stable_softmax: temperature must be positive, got " << tau;
    throw std::invalid_argument(os.str());
  }
  auto z = logits.data();
  if (z.empty()) throw ShapeError("stable_softmax", "numel", 1, 0);
  Real zmax = -std::numeric_limits<Real>::infinity();
  for (Real v : z) zmax = std::max(zmax, v);
  std::vector<Real> out(z.size());
  Real total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp((z[i] - zmax) / tau);
    total += out[i];
  }
  for (Real& v : out) v /= total;
  return make_result(logits.shape(), std::move(out), {logits}, [tau](Node& self) {
    Real* g = grad_of(self, 0);
    if (!g) return;
    Real dot = 0.0;
    for (std::size_t i = 0; i < self.data.size(); ++i) dot += self.grad[i] * self.data[i];
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      g[i] += self.data[i] * (self.grad[i] - dot) / tau;
    }
  });
}

}  // namespace dskd
