#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "egcnn/tensor.hpp"

namespace egcnn {

// 3-d cross-correlation. input [N,C,D,H,W], weight [K,C,kd,kh,kw], bias [K]
// (pass an undefined Tensor for none). Output extent per axis is
// floor((X + 2*padding - k) / stride) + 1.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
              std::size_t padding = 0);

// Trilinear interpolation by an integer factor, align_corners = false.
Tensor trilinear_upsample(const Tensor& input, std::size_t scale);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// x [N,C,...]; statistics per (sample, group of C/groups channels).
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Softmax over axis 1 of [N,C,...].
Tensor softmax_channels(const Tensor& x);

// Elementwise arithmetic. Shapes must match exactly; the only broadcast is
// tensor-with-scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

Tensor concat_channels(const std::vector<Tensor>& parts);
// Channels [begin, end) of [N,C,...].
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
// [N,1,...] -> [N,copies,...] by concatenation.
Tensor repeat_channels(const Tensor& x, std::size_t copies);

enum class Reduction { Sum, Mean };

// Reduces over the listed axes (all axes when empty); reduced axes are
// removed from the result shape.
Tensor reduce(const Tensor& x, Reduction kind, std::vector<std::size_t> axes = {});
inline Tensor sum(const Tensor& x) { return reduce(x, Reduction::Sum); }
inline Tensor mean(const Tensor& x) { return reduce(x, Reduction::Mean); }

// Deterministic pairwise summation.
double pairwise_sum(std::span<const double> values) noexcept;

}  // namespace egcnn
