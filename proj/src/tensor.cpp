#include "egcnn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "graph.hpp"

namespace egcnn {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_sequence{1};

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values,
                                        bool requires_grad) {
  if (values.size() != egcnn::numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + to_string(shape));
  }
  detail::check_finite("leaf", values);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->sequence = detail::next_sequence();
  return node;
}

detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw std::logic_error("tensor: access to undefined tensor");
  return *node;
}
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::uint64_t next_sequence() noexcept { return g_sequence.fetch_add(1, std::memory_order_relaxed); }

void check_finite(const char* op, const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

namespace {
template <typename Range>
Tensor make_result_impl(const char* op, Shape shape, std::vector<double> values,
                        const Range& inputs, BackwardFn backward) {
  if (values.size() != egcnn::numel(shape)) {
    throw std::logic_error(std::string(op) + ": result size does not match shape");
  }
  check_finite(op, values);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  node->sequence = next_sequence();
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) {
      if (t.defined() && t.node()->requires_grad) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}
}  // namespace

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return make_result_impl(op, std::move(shape), std::move(values), inputs, std::move(backward));
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& inputs, BackwardFn backward) {
  return make_result_impl(op, std::move(shape), std::move(values), inputs, std::move(backward));
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = egcnn::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = egcnn::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.value.size() != 1) throw ShapeError("tensor: item() on " + to_string(n.shape));
  return n.value[0];
}

std::span<double> Tensor::mutable_data() {
  auto& n = checked(node_);
  if (!n.is_leaf()) throw AutogradError("tensor: in-place write to a non-leaf tensor");
  return n.value;
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& n = checked(node_);
  if (!n.is_leaf()) throw AutogradError("tensor: requires_grad can only be set on leaves");
  n.requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(node_).is_leaf(); }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::vector<double> Tensor::grad() const {
  const auto& n = checked(node_);
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

std::span<double> Tensor::grad_view() { return checked(node_).grad; }

void Tensor::zero_grad() {
  auto& n = checked(node_);
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return Tensor(make_leaf(n.shape, n.value, false));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw AutogradError("backward: undefined loss");
  detail::Node* root = loss.node();
  if (root->value.size() != 1) {
    throw AutogradError("backward: loss must be scalar, got shape " + to_string(root->shape));
  }
  if (root->consumed) {
    throw AutogradError("backward: graph already consumed; run a new forward pass first");
  }
  if (!root->requires_grad) {
    throw AutogradError("backward: loss was not recorded on the tape (no requires_grad inputs)");
  }

  // Owning handles: clearing one node's inputs must not free nodes still queued.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{loss.node_ptr()};
  seen.insert(root);
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  // Creation order is a topological order; replay it in reverse.
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->sequence > b->sequence; });

  root->grad_buffer()[0] += 1.0;
  for (const auto& n : order) {
    if (n->is_leaf()) {
      n->grad_buffer();
      continue;
    }
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (const auto& n : order) {
    if (n->is_leaf()) continue;
    n->backward = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace egcnn
