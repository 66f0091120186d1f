#include "dskd/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace dskd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::string shape_error_message(const std::string& op, const std::string& dim,
                                std::size_t expected, std::size_t actual) {
  std::ostringstream os;
  os << op << ": dimension '" << dim << "' expected " << expected << ", got "
     << actual;
  return os.str();
}

thread_local bool g_grad_enabled = true;

}  // namespace

ShapeError::ShapeError(std::string op, std::string dimension,
                       std::size_t expected, std::size_t actual)
    : std::invalid_argument(
          shape_error_message(op, dimension, expected, actual)),
      op_(std::move(op)),
      dimension_(std::move(dimension)),
      expected_(expected),
      actual_(actual) {}

void detail::Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {
thread_local BranchTrace* g_trace = nullptr;
}

BranchTrace::BranchTrace() : hash_(0xcbf29ce484222325ULL), previous_(g_trace) { g_trace = this; }

BranchTrace::~BranchTrace() { g_trace = previous_; }

void BranchTrace::mix(std::uint64_t code) noexcept {
  hash_ = (hash_ ^ code) * 0x100000001b3ULL;
}

BranchTrace* detail::active_trace() noexcept { return g_trace; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  std::vector<Real> values(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<Real> values,
                         bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_data", "numel", shape_numel(shape), values.size());
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

detail::Node& node_of(const Tensor& t) {
  if (!t.node_) throw std::logic_error("use of undefined tensor");
  return *t.node_;
}

const Shape& Tensor::shape() const { return node_of(*this).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw std::out_of_range("Tensor::dim: axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this).data.size(); }

std::span<const Real> Tensor::data() const { return node_of(*this).data; }

std::span<Real> Tensor::mutable_data() { return node_of(*this).data; }

Real Tensor::item() const {
  const auto& d = node_of(*this).data;
  if (d.size() != 1) throw ShapeError("item", "numel", 1, d.size());
  return d[0];
}

bool Tensor::requires_grad() const { return node_of(*this).requires_grad; }

bool Tensor::is_leaf() const { return !node_of(*this).backward_fn; }

bool Tensor::has_grad() const { return !node_of(*this).grad.empty(); }

std::span<const Real> Tensor::grad() const { return node_of(*this).grad; }

void Tensor::zero_grad() { node_of(*this).grad.clear(); }

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  const auto& n = node_of(*this);
  return from_data(n.shape, n.data, requires_grad);
}

Tensor make_result(Shape shape, std::vector<Real> values,
                   std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) track = track || node_of(p).requires_grad;
  }
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  auto& root = node_of(*this);
  if (root.data.size() != 1) {
    throw ShapeError("backward", "numel", 1, root.data.size());
  }
  if (!root.requires_grad) {
    throw std::logic_error(
        "backward: loss was not produced by a recorded computation");
  }

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.assign(n->data.size(), 0.0);
  root.grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace dskd
