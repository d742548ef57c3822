// Portable reference kernels. Same packed layout as the SIMD variants, plain
// loops everywhere else.

#include <algorithm>
#include <vector>

#include "egcnn/kernels.hpp"
#include "layout.hpp"

namespace egcnn::kernels::scalar {

using detail::PackedLayout;

void conv3d_forward(const ConvGeometry& g, const double* in, const double* w, const double* bias,
                    double* out) {
  const std::size_t od_n = g.out_depth(), oh_n = g.out_height(), ow_n = g.out_width();
  const std::size_t kvol = g.kernel_volume();
  const std::size_t in_sample = g.in_channels * g.depth * g.height * g.width;
  const std::size_t out_sample = g.out_channels * od_n * oh_n * ow_n;
  const PackedLayout layout = detail::input_layout(g);
  const auto taps = detail::tap_offsets(layout, g.kw);
  std::vector<double> packed;

  for (std::size_t n = 0; n < g.batch; ++n) {
    layout.pack(in + n * in_sample, packed);
    for (std::size_t k = 0; k < g.out_channels; ++k) {
      const double b0 = bias ? bias[k] : 0.0;
      for (std::size_t od = 0; od < od_n; ++od) {
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
          double* o = out + n * out_sample + ((k * od_n + od) * oh_n + oh) * ow_n;
          std::fill(o, o + ow_n, b0);
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            const double* wk = w + (k * g.in_channels + c) * kvol;
            for (std::size_t a = 0; a < g.kd; ++a) {
              for (std::size_t b = 0; b < g.kh; ++b) {
                const double* r = packed.data() + layout.row(c, od * g.stride + a, oh * g.stride + b);
                for (std::size_t e = 0; e < g.kw; ++e) {
                  const double wv = wk[(a * g.kh + b) * g.kw + e];
                  const double* src = r + taps[e];
                  for (std::size_t ow = 0; ow < ow_n; ++ow) o[ow] += wv * src[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_backward_input(const ConvGeometry& g, const double* grad_out, const double* w,
                           double* grad_in) {
  const std::size_t od_n = g.out_depth(), oh_n = g.out_height(), ow_n = g.out_width();
  const std::size_t kvol = g.kernel_volume();
  const std::size_t in_sample = g.in_channels * g.depth * g.height * g.width;
  const std::size_t out_sample = g.out_channels * od_n * oh_n * ow_n;
  const PackedLayout layout = detail::input_layout(g);
  const auto taps = detail::tap_offsets(layout, g.kw);
  std::vector<double> acc;

  for (std::size_t n = 0; n < g.batch; ++n) {
    acc.assign(layout.size(), 0.0);
    for (std::size_t k = 0; k < g.out_channels; ++k) {
      for (std::size_t od = 0; od < od_n; ++od) {
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
          const double* go = grad_out + n * out_sample + ((k * od_n + od) * oh_n + oh) * ow_n;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            const double* wk = w + (k * g.in_channels + c) * kvol;
            for (std::size_t a = 0; a < g.kd; ++a) {
              for (std::size_t b = 0; b < g.kh; ++b) {
                double* r = acc.data() + layout.row(c, od * g.stride + a, oh * g.stride + b);
                for (std::size_t e = 0; e < g.kw; ++e) {
                  const double wv = wk[(a * g.kh + b) * g.kw + e];
                  double* dst = r + taps[e];
                  for (std::size_t ow = 0; ow < ow_n; ++ow) dst[ow] += wv * go[ow];
                }
              }
            }
          }
        }
      }
    }
    layout.unpack(acc, grad_in + n * in_sample);
  }
}

void conv3d_backward_weight(const ConvGeometry& g, const double* in, const double* grad_out,
                            double* grad_w, double* grad_bias) {
  const std::size_t od_n = g.out_depth(), oh_n = g.out_height(), ow_n = g.out_width();
  const std::size_t kvol = g.kernel_volume();
  const std::size_t in_sample = g.in_channels * g.depth * g.height * g.width;
  const std::size_t out_sample = g.out_channels * od_n * oh_n * ow_n;
  const std::size_t plane = od_n * oh_n * ow_n;
  const PackedLayout layout = detail::input_layout(g);
  const auto taps = detail::tap_offsets(layout, g.kw);
  std::vector<double> packed;

  std::fill(grad_w, grad_w + g.weight_size(), 0.0);
  if (grad_bias) std::fill(grad_bias, grad_bias + g.out_channels, 0.0);

  for (std::size_t n = 0; n < g.batch; ++n) {
    layout.pack(in + n * in_sample, packed);
    for (std::size_t k = 0; k < g.out_channels; ++k) {
      const double* gk = grad_out + n * out_sample + k * plane;
      if (grad_bias) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += gk[i];
        grad_bias[k] += s;
      }
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        double* gw = grad_w + (k * g.in_channels + c) * kvol;
        for (std::size_t a = 0; a < g.kd; ++a) {
          for (std::size_t b = 0; b < g.kh; ++b) {
            for (std::size_t e = 0; e < g.kw; ++e) {
              double s = 0.0;
              for (std::size_t od = 0; od < od_n; ++od) {
                for (std::size_t oh = 0; oh < oh_n; ++oh) {
                  const double* go = gk + (od * oh_n + oh) * ow_n;
                  const double* src =
                      packed.data() + layout.row(c, od * g.stride + a, oh * g.stride + b) + taps[e];
                  for (std::size_t ow = 0; ow < ow_n; ++ow) s += go[ow] * src[ow];
                }
              }
              gw[(a * g.kh + b) * g.kw + e] += s;
            }
          }
        }
      }
    }
  }
}

}  // namespace egcnn::kernels::scalar
