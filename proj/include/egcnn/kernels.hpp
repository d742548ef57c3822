#pragma once

// Raw convolution kernels behind conv3d. Each entry point has a portable
// scalar implementation and, on x86-64, an AVX2/FMA variant; the dispatcher
// picks one at runtime. Both variants traverse reductions in a fixed order,
// so results are bit-reproducible for a given ISA.

#include <cstddef>
#include <string_view>

namespace egcnn::kernels {

enum class Isa { Scalar, Avx2 };

Isa detected_isa() noexcept;
Isa active_isa() noexcept;
// Forces a variant (tests, benchmarking). Requesting an unsupported ISA throws.
void set_active_isa(Isa isa);
std::string_view isa_name(Isa isa) noexcept;

/// Shapes for a batched 3-d cross-correlation.
/// input [batch, in_channels, depth, height, width],
/// weight [out_channels, in_channels, kd, kh, kw].
struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t depth = 1, height = 1, width = 1;
  std::size_t out_channels = 1;
  std::size_t kd = 1, kh = 1, kw = 1;
  std::size_t stride = 1;
  std::size_t pad_d = 0, pad_h = 0, pad_w = 0;

  // Throws std::invalid_argument on a non-positive output extent or stride 0.
  void validate() const;
  std::size_t out_depth() const noexcept;
  std::size_t out_height() const noexcept;
  std::size_t out_width() const noexcept;
  std::size_t kernel_volume() const noexcept { return kd * kh * kw; }
  std::size_t input_size() const noexcept { return batch * in_channels * depth * height * width; }
  std::size_t output_size() const noexcept;
  std::size_t weight_size() const noexcept { return out_channels * in_channels * kernel_volume(); }
};

// out = conv(in, w) + bias (bias may be null). Overwrites out.
void conv3d_forward(const ConvGeometry& g, const double* in, const double* w, const double* bias,
                    double* out);
// grad_in = d(out)/d(in)^T grad_out. Overwrites grad_in.
void conv3d_backward_input(const ConvGeometry& g, const double* grad_out, const double* w,
                           double* grad_in);
// grad_w (and grad_bias when non-null) receive the weight/bias gradient. Overwrites.
void conv3d_backward_weight(const ConvGeometry& g, const double* in, const double* grad_out,
                            double* grad_w, double* grad_bias);

namespace scalar {
void conv3d_forward(const ConvGeometry& g, const double* in, const double* w, const double* bias,
                    double* out);
void conv3d_backward_input(const ConvGeometry& g, const double* grad_out, const double* w,
                           double* grad_in);
void conv3d_backward_weight(const ConvGeometry& g, const double* in, const double* grad_out,
                            double* grad_w, double* grad_bias);
}  // namespace scalar

namespace avx2 {
bool available() noexcept;
void conv3d_forward(const ConvGeometry& g, const double* in, const double* w, const double* bias,
                    double* out);
void conv3d_backward_input(const ConvGeometry& g, const double* grad_out, const double* w,
                           double* grad_in);
void conv3d_backward_weight(const ConvGeometry& g, const double* in, const double* grad_out,
                            double* grad_w, double* grad_bias);
}  // namespace avx2

}  // namespace egcnn::kernels
