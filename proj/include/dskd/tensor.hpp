#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dskd {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an operation receives operands of incompatible shape.
/// `dimension` names the offending axis (e.g. "in_channels", "height").
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string op, std::string dimension, std::size_t expected,
             std::size_t actual);

  const std::string& op() const noexcept { return op_; }
  const std::string& dimension() const noexcept { return dimension_; }
  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::string op_;
  std::string dimension_;
  std::size_t expected_;
  std::size_t actual_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this->grad into parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad();
};

}  // namespace detail

/// Dense row-major real tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values are
/// never mutated by operations. The exceptions are parameter updates via
/// `mutable_data()` and gradient accumulation during `backward()`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<Real> values,
                          bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  Real item() const;
  Real operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  void zero_grad();

  /// Copy of the values with no history attached.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  /// Runs reverse-mode differentiation from this scalar. Gradients of every
  /// node in the graph are reset to zero first, then accumulated.
  void backward() const;

  /// Identity of the underlying storage (shared by copies of the handle).
  const void* id() const noexcept { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, std::vector<Real>,
                            std::vector<Tensor>,
                            std::function<void(detail::Node&)>);
  friend detail::Node& node_of(const Tensor&);
};

bool grad_enabled();

/// Disables graph recording for its lifetime (used for teacher forwards).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, relu, clamp and max_pool2x2 fold the branch they take for
/// every element into a running hash. Two evaluations with equal signatures
/// followed the same piecewise-smooth region.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t signature() const noexcept { return hash_; }
  void mix(std::uint64_t code) noexcept;

 private:
  std::uint64_t hash_;
  BranchTrace* previous_;
};

namespace detail {
BranchTrace* active_trace() noexcept;
}

// Builds an op output. Parents and the backward closure are only retained
// when recording is enabled and some parent requires a gradient.
Tensor make_result(Shape shape, std::vector<Real> values,
                   std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn);
detail::Node& node_of(const Tensor& t);

// ---- element-wise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real offset);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// Natural log; throws std::domain_error on non-positive input.
Tensor log(const Tensor& a);
/// Gradient passes where lo <= x <= hi, zero elsewhere.
Tensor clamp(const Tensor& a, Real lo, Real hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, Real s) { return scale(a, s); }
inline Tensor operator*(Real s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, Real s) { return add_scalar(a, s); }
inline Tensor operator-(Real s, const Tensor& a) {
  return add_scalar(scale(a, -1.0), s);
}

// ---- reductions and layout ---------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Concatenates along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// [C,H,W] -> [C, g*g]: sums over each of the g*g non-overlapping blocks of
/// the spatial plane, blocks in row-major order.
Tensor block_sum(const Tensor& a, std::size_t grid);

// ---- image ops ----------------------------------------------------------

/// 2x2 max pooling with stride 2 on [C,H,W]; H and W must be even.
Tensor max_pool2x2(const Tensor& input);

/// Cross-correlation of [C_in,H,W] with [C_out,C_in,k,k] plus bias, zero
/// padding `padding` on every side.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t padding = 1);

/// Bilinear upsampling of [C,h,w] by an integer factor with half-pixel
/// centres: output (i,j) samples ((i+0.5)/f - 0.5, (j+0.5)/f - 0.5), clamped
/// to the source extent.
Tensor bilinear_upsample(const Tensor& input, int factor);

/// Softmax over all elements of `logits` at temperature `tau`, computed with
/// max subtraction. Output has the input's shape.
Tensor stable_softmax(const Tensor& logits, Real tau);

}  // namespace dskd
