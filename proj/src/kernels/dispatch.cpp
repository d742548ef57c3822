#include <atomic>
#include <stdexcept>
#include <string>

#include "egcnn/kernels.hpp"

namespace egcnn::kernels {

namespace {

std::size_t out_extent(std::size_t in, std::size_t pad, std::size_t k, std::size_t stride) {
  std::size_t padded = in + 2 * pad;
  if (stride == 0 || padded < k) return 0;
  return (padded - k) / stride + 1;
}

std::atomic<int>& active_slot() {
  static std::atomic<int> slot{static_cast<int>(detected_isa())};
  return slot;
}

}  // namespace

#if !defined(EGCNN_HAVE_AVX2)
namespace avx2 {
bool available() noexcept { return false; }
void conv3d_forward(const ConvGeometry&, const double*, const double*, const double*, double*) {
  throw std::logic_error("avx2 kernels not compiled in");
}
void conv3d_backward_input(const ConvGeometry&, const double*, const double*, double*) {
  throw std::logic_error("avx2 kernels not compiled in");
}
void conv3d_backward_weight(const ConvGeometry&, const double*, const double*, double*, double*) {
  throw std::logic_error("avx2 kernels not compiled in");
}
}  // namespace avx2
#endif

void ConvGeometry::validate() const {
  if (stride == 0) throw std::invalid_argument("conv3d: stride must be positive");
  if (kd == 0 || kh == 0 || kw == 0) throw std::invalid_argument("conv3d: empty kernel");
  if (out_depth() == 0 || out_height() == 0 || out_width() == 0) {
    throw std::invalid_argument("conv3d: non-positive output extent for input " +
                                std::to_string(depth) + "x" + std::to_string(height) + "x" +
                                std::to_string(width) + ", kernel " + std::to_string(kd) + "x" +
                                std::to_string(kh) + "x" + std::to_string(kw));
  }
}

std::size_t ConvGeometry::out_depth() const noexcept { return out_extent(depth, pad_d, kd, stride); }
std::size_t ConvGeometry::out_height() const noexcept { return out_extent(height, pad_h, kh, stride); }
std::size_t ConvGeometry::out_width() const noexcept { return out_extent(width, pad_w, kw, stride); }
std::size_t ConvGeometry::output_size() const noexcept {
  return batch * out_channels * out_depth() * out_height() * out_width();
}

Isa detected_isa() noexcept { return avx2::available() ? Isa::Avx2 : Isa::Scalar; }

Isa active_isa() noexcept { return static_cast<Isa>(active_slot().load(std::memory_order_relaxed)); }

void set_active_isa(Isa isa) {
  if (isa == Isa::Avx2 && !avx2::available()) {
    throw std::invalid_argument("kernels: AVX2/FMA not available on this CPU or build");
  }
  active_slot().store(static_cast<int>(isa), std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) noexcept {
  switch (isa) {
    case Isa::Avx2:
      return "avx2";
    case Isa::Scalar:
      break;
  }
  return "scalar";
}

void conv3d_forward(const ConvGeometry& g, const double* in, const double* w, const double* bias,
                    double* out) {
  g.validate();
  if (active_isa() == Isa::Avx2) return avx2::conv3d_forward(g, in, w, bias, out);
  scalar::conv3d_forward(g, in, w, bias, out);
}

void conv3d_backward_input(const ConvGeometry& g, const double* grad_out, const double* w,
                           double* grad_in) {
  g.validate();
  if (active_isa() == Isa::Avx2) return avx2::conv3d_backward_input(g, grad_out, w, grad_in);
  scalar::conv3d_backward_input(g, grad_out, w, grad_in);
}

void conv3d_backward_weight(const ConvGeometry& g, const double* in, const double* grad_out,
                            double* grad_w, double* grad_bias) {
  g.validate();
  if (active_isa() == Isa::Avx2) return avx2::conv3d_backward_weight(g, in, grad_out, grad_w, grad_bias);
  scalar::conv3d_backward_weight(g, in, grad_out, grad_w, grad_bias);
}

}  // namespace egcnn::kernels
