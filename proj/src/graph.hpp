#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "egcnn/tensor.hpp"

namespace egcnn::detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t sequence = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const noexcept { return inputs.empty() && !backward && !consumed; }

  // Lazily zero-initialised gradient buffer.
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

std::uint64_t next_sequence() noexcept;

// Throws NumericError if any value is NaN/Inf.
void check_finite(const char* op, const std::vector<double>& values);

// Builds an op result. The backward closure and the input links are kept only
// when grad mode is on and at least one input requires a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, BackwardFn backward);
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

inline bool wants_grad(const Node& node) noexcept { return node.requires_grad; }

}  // namespace egcnn::detail
