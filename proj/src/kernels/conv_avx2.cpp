// AVX2/FMA convolution kernels. Vectorised along the output width (4 doubles
// per lane group) and register-blocked over output channels. Compiled with
// -mavx2 -mfma; only reached through the runtime dispatcher.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "egcnn/kernels.hpp"
#include "layout.hpp"

namespace egcnn::kernels::avx2 {

using detail::PackedLayout;

namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

struct ConvCtx {
  const ConvGeometry& g;
  const PackedLayout& layout;
  const std::vector<std::size_t>& taps;
  std::size_t od_n, oh_n, ow_n, kvol;
};

// ---- forward ---------------------------------------------------------------

// KB output channels x (4*NV) output columns starting at ow.
template <int KB, int NV>
inline void forward_tile(const ConvCtx& x, const double* packed, const double* w_k0,
                         const double* bias_k0, std::size_t od, std::size_t oh, std::size_t ow,
                         double* const* out_rows) {
  const auto& g = x.g;
  const std::size_t k_stride = g.in_channels * x.kvol;
  __m256d acc[KB][NV];
  for (int kb = 0; kb < KB; ++kb) {
    const __m256d b0 = _mm256_set1_pd(bias_k0 ? bias_k0[kb] : 0.0);
    for (int j = 0; j < NV; ++j) acc[kb][j] = b0;
  }
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t a = 0; a < g.kd; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        const double* r = packed + x.layout.row(c, od * g.stride + a, oh * g.stride + b) + ow;
        const double* wp = w_k0 + c * x.kvol + (a * g.kh + b) * g.kw;
        for (std::size_t e = 0; e < g.kw; ++e) {
          const double* src = r + x.taps[e];
          __m256d v[NV];
          for (int j = 0; j < NV; ++j) v[j] = _mm256_loadu_pd(src + 4 * j);
          for (int kb = 0; kb < KB; ++kb) {
            const __m256d wv = _mm256_broadcast_sd(wp + kb * k_stride + e);
            for (int j = 0; j < NV; ++j) acc[kb][j] = _mm256_fmadd_pd(wv, v[j], acc[kb][j]);
          }
        }
      }
    }
  }
  for (int kb = 0; kb < KB; ++kb) {
    for (int j = 0; j < NV; ++j) _mm256_storeu_pd(out_rows[kb] + ow + 4 * j, acc[kb][j]);
  }
}

template <int KB>
inline void forward_column(const ConvCtx& x, const double* packed, const double* w_k0,
                           const double* bias_k0, std::size_t od, std::size_t oh, std::size_t ow,
                           double* const* out_rows) {
  const auto& g = x.g;
  const std::size_t k_stride = g.in_channels * x.kvol;
  double acc[KB];
  for (int kb = 0; kb < KB; ++kb) acc[kb] = bias_k0 ? bias_k0[kb] : 0.0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t a = 0; a < g.kd; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        const double* r = packed + x.layout.row(c, od * g.stride + a, oh * g.stride + b) + ow;
        const double* wp = w_k0 + c * x.kvol + (a * g.kh + b) * g.kw;
        for (std::size_t e = 0; e < g.kw; ++e) {
          const double v = r[x.taps[e]];
          for (int kb = 0; kb < KB; ++kb) acc[kb] = std::fma(wp[kb * k_stride + e], v, acc[kb]);
        }
      }
    }
  }
  for (int kb = 0; kb < KB; ++kb) out_rows[kb][ow] = acc[kb];
}

template <int KB>
void forward_block(const ConvCtx& x, const double* packed, const double* w, const double* bias,
                   std::size_t n, std::size_t k0, double* out) {
  const auto& g = x.g;
  const double* w_k0 = w + k0 * g.in_channels * x.kvol;
  const double* bias_k0 = bias ? bias + k0 : nullptr;
  double* rows[KB];
  for (std::size_t od = 0; od < x.od_n; ++od) {
    for (std::size_t oh = 0; oh < x.oh_n; ++oh) {
      for (int kb = 0; kb < KB; ++kb) {
        rows[kb] = out + (((n * g.out_channels + k0 + kb) * x.od_n + od) * x.oh_n + oh) * x.ow_n;
      }
      std::size_t ow = 0;
      for (; ow + 8 <= x.ow_n; ow += 8) forward_tile<KB, 2>(x, packed, w_k0, bias_k0, od, oh, ow, rows);
      for (; ow + 4 <= x.ow_n; ow += 4) forward_tile<KB, 1>(x, packed, w_k0, bias_k0, od, oh, ow, rows);
      for (; ow < x.ow_n; ++ow) forward_column<KB>(x, packed, w_k0, bias_k0, od, oh, ow, rows);
    }
  }
}

// ---- backward w.r.t. input ---------------------------------------------------

// Scatter-accumulates into CB packed input channels for one (od, oh, tap) and
// 4*NV output columns, reducing over all output channels in registers.
template <int CB, int NV>
inline void backward_input_tile(const ConvCtx& x, const double* go_n, const double* w,
                                double* acc_buf, std::size_t c0, std::size_t od, std::size_t oh,
                                std::size_t a, std::size_t b, std::size_t e, std::size_t ow) {
  const auto& g = x.g;
  const std::size_t plane = x.od_n * x.oh_n * x.ow_n;
  const std::size_t wofs = (a * g.kh + b) * g.kw + e;
  double* dst[CB];
  __m256d acc[CB][NV];
  for (int cb = 0; cb < CB; ++cb) {
    dst[cb] = acc_buf + x.layout.row(c0 + cb, od * g.stride + a, oh * g.stride + b) + x.taps[e] + ow;
    for (int j = 0; j < NV; ++j) acc[cb][j] = _mm256_loadu_pd(dst[cb] + 4 * j);
  }
  const double* grow = go_n + (od * x.oh_n + oh) * x.ow_n + ow;
  for (std::size_t k = 0; k < g.out_channels; ++k) {
    __m256d gv[NV];
    for (int j = 0; j < NV; ++j) gv[j] = _mm256_loadu_pd(grow + k * plane + 4 * j);
    const double* wk = w + (k * g.in_channels + c0) * x.kvol + wofs;
    for (int cb = 0; cb < CB; ++cb) {
      const __m256d wv = _mm256_broadcast_sd(wk + cb * x.kvol);
      for (int j = 0; j < NV; ++j) acc[cb][j] = _mm256_fmadd_pd(wv, gv[j], acc[cb][j]);
    }
  }
  for (int cb = 0; cb < CB; ++cb) {
    for (int j = 0; j < NV; ++j) _mm256_storeu_pd(dst[cb] + 4 * j, acc[cb][j]);
  }
}

template <int CB>
inline void backward_input_column(const ConvCtx& x, const double* go_n, const double* w,
                                  double* acc_buf, std::size_t c0, std::size_t od, std::size_t oh,
                                  std::size_t a, std::size_t b, std::size_t e, std::size_t ow) {
  const auto& g = x.g;
  const std::size_t plane = x.od_n * x.oh_n * x.ow_n;
  const std::size_t wofs = (a * g.kh + b) * g.kw + e;
  const double* gp = go_n + (od * x.oh_n + oh) * x.ow_n + ow;
  for (int cb = 0; cb < CB; ++cb) {
    double* dst = acc_buf + x.layout.row(c0 + cb, od * g.stride + a, oh * g.stride + b) + x.taps[e] + ow;
    double s = *dst;
    const double* wk = w + (c0 + cb) * x.kvol + wofs;
    for (std::size_t k = 0; k < g.out_channels; ++k) {
      s = std::fma(wk[k * g.in_channels * x.kvol], gp[k * plane], s);
    }
    *dst = s;
  }
}

template <int CB>
void backward_input_block(const ConvCtx& x, const double* go_n, const double* w, double* acc_buf,
                          std::size_t c0) {
  const auto& g = x.g;
  for (std::size_t od = 0; od < x.od_n; ++od) {
    for (std::size_t oh = 0; oh < x.oh_n; ++oh) {
      for (std::size_t a = 0; a < g.kd; ++a) {
        for (std::size_t b = 0; b < g.kh; ++b) {
          for (std::size_t e = 0; e < g.kw; ++e) {
            std::size_t ow = 0;
            for (; ow + 8 <= x.ow_n; ow += 8) backward_input_tile<CB, 2>(x, go_n, w, acc_buf, c0, od, oh, a, b, e, ow);
            for (; ow + 4 <= x.ow_n; ow += 4) backward_input_tile<CB, 1>(x, go_n, w, acc_buf, c0, od, oh, a, b, e, ow);
            for (; ow < x.ow_n; ++ow) backward_input_column<CB>(x, go_n, w, acc_buf, c0, od, oh, a, b, e, ow);
          }
        }
      }
    }
  }
}

// ---- backward w.r.t. weight ------------------------------------------------

// KB output channels x KE width taps for a fixed (c, a, b): dot products over
// every output position.
template <int KB, int KE>
void backward_weight_tile(const ConvCtx& x, const double* packed, const double* go_n,
                          std::size_t k0, std::size_t c, std::size_t a, std::size_t b,
                          std::size_t e0, double* grad_w) {
  const auto& g = x.g;
  const std::size_t plane = x.od_n * x.oh_n * x.ow_n;
  __m256d acc[KB][KE];
  double tail[KB][KE];
  for (int kb = 0; kb < KB; ++kb) {
    for (int ke = 0; ke < KE; ++ke) {
      acc[kb][ke] = _mm256_setzero_pd();
      tail[kb][ke] = 0.0;
    }
  }
  std::size_t toff[KE];
  for (int ke = 0; ke < KE; ++ke) toff[ke] = x.taps[e0 + ke];

  for (std::size_t od = 0; od < x.od_n; ++od) {
    for (std::size_t oh = 0; oh < x.oh_n; ++oh) {
      const double* grow = go_n + k0 * plane + (od * x.oh_n + oh) * x.ow_n;
      const double* xrow = packed + x.layout.row(c, od * g.stride + a, oh * g.stride + b);
      std::size_t ow = 0;
      for (; ow + 4 <= x.ow_n; ow += 4) {
        __m256d gv[KB];
        for (int kb = 0; kb < KB; ++kb) gv[kb] = _mm256_loadu_pd(grow + kb * plane + ow);
        for (int ke = 0; ke < KE; ++ke) {
          const __m256d xv = _mm256_loadu_pd(xrow + toff[ke] + ow);
          for (int kb = 0; kb < KB; ++kb) acc[kb][ke] = _mm256_fmadd_pd(gv[kb], xv, acc[kb][ke]);
        }
      }
      for (; ow < x.ow_n; ++ow) {
        for (int ke = 0; ke < KE; ++ke) {
          const double xv = xrow[toff[ke] + ow];
          for (int kb = 0; kb < KB; ++kb) tail[kb][ke] = std::fma(grow[kb * plane + ow], xv, tail[kb][ke]);
        }
      }
    }
  }
  for (int kb = 0; kb < KB; ++kb) {
    double* gw = grad_w + ((k0 + kb) * g.in_channels + c) * x.kvol + (a * g.kh + b) * g.kw + e0;
    for (int ke = 0; ke < KE; ++ke) gw[ke] += hsum(acc[kb][ke]) + tail[kb][ke];
  }
}

template <int KB>
void backward_weight_taps(const ConvCtx& x, const double* packed, const double* go_n,
                          std::size_t k0, std::size_t c, std::size_t a, std::size_t b,
                          double* grad_w) {
  std::size_t e0 = 0;
  for (; e0 + 3 <= x.g.kw; e0 += 3) backward_weight_tile<KB, 3>(x, packed, go_n, k0, c, a, b, e0, grad_w);
  switch (x.g.kw - e0) {
    case 2:
      backward_weight_tile<KB, 2>(x, packed, go_n, k0, c, a, b, e0, grad_w);
      break;
    case 1:
      backward_weight_tile<KB, 1>(x, packed, go_n, k0, c, a, b, e0, grad_w);
      break;
    default:
      break;
  }
}

}  // namespace

bool available() noexcept {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

void conv3d_forward(const ConvGeometry& g, const double* in, const double* w, const double* bias,
                    double* out) {
  const PackedLayout layout = detail::input_layout(g);
  const auto taps = detail::tap_offsets(layout, g.kw);
  const ConvCtx x{g, layout, taps, g.out_depth(), g.out_height(), g.out_width(), g.kernel_volume()};
  const std::size_t in_sample = g.in_channels * g.depth * g.height * g.width;
  std::vector<double> packed;

  for (std::size_t n = 0; n < g.batch; ++n) {
    layout.pack(in + n * in_sample, packed);
    std::size_t k0 = 0;
    for (; k0 + 4 <= g.out_channels; k0 += 4) forward_block<4>(x, packed.data(), w, bias, n, k0, out);
    switch (g.out_channels - k0) {
      case 3:
        forward_block<3>(x, packed.data(), w, bias, n, k0, out);
        break;
      case 2:
        forward_block<2>(x, packed.data(), w, bias, n, k0, out);
        break;
      case 1:
        forward_block<1>(x, packed.data(), w, bias, n, k0, out);
        break;
      default:
        break;
    }
  }
}

void conv3d_backward_input(const ConvGeometry& g, const double* grad_out, const double* w,
                           double* grad_in) {
  const PackedLayout layout = detail::input_layout(g);
  const auto taps = detail::tap_offsets(layout, g.kw);
  const ConvCtx x{g, layout, taps, g.out_depth(), g.out_height(), g.out_width(), g.kernel_volume()};
  const std::size_t in_sample = g.in_channels * g.depth * g.height * g.width;
  const std::size_t out_sample = g.out_channels * x.od_n * x.oh_n * x.ow_n;
  std::vector<double> acc;

  for (std::size_t n = 0; n < g.batch; ++n) {
    acc.assign(layout.size(), 0.0);
    const double* go_n = grad_out + n * out_sample;
    std::size_t c0 = 0;
    for (; c0 + 4 <= g.in_channels; c0 += 4) backward_input_block<4>(x, go_n, w, acc.data(), c0);
    switch (g.in_channels - c0) {
      case 3:
        backward_input_block<3>(x, go_n, w, acc.data(), c0);
        break;
      case 2:
        backward_input_block<2>(x, go_n, w, acc.data(), c0);
        break;
      case 1:
        backward_input_block<1>(x, go_n, w, acc.data(), c0);
        break;
      default:
        break;
    }
    layout.unpack(acc, grad_in + n * in_sample);
  }
}

void conv3d_backward_weight(const ConvGeometry& g, const double* in, const double* grad_out,
                            double* grad_w, double* grad_bias) {
  const PackedLayout layout = detail::input_layout(g);
  const auto taps = detail::tap_offsets(layout, g.kw);
  const ConvCtx x{g, layout, taps, g.out_depth(), g.out_height(), g.out_width(), g.kernel_volume()};
  const std::size_t in_sample = g.in_channels * g.depth * g.height * g.width;
  const std::size_t plane = x.od_n * x.oh_n * x.ow_n;
  const std::size_t out_sample = g.out_channels * plane;
  std::vector<double> packed;

  std::fill(grad_w, grad_w + g.weight_size(), 0.0);
  if (grad_bias) std::fill(grad_bias, grad_bias + g.out_channels, 0.0);

  for (std::size_t n = 0; n < g.batch; ++n) {
    layout.pack(in + n * in_sample, packed);
    const double* go_n = grad_out + n * out_sample;
    if (grad_bias) {
      for (std::size_t k = 0; k < g.out_channels; ++k) {
        const double* gk = go_n + k * plane;
        __m256d s = _mm256_setzero_pd();
        std::size_t i = 0;
        for (; i + 4 <= plane; i += 4) s = _mm256_add_pd(s, _mm256_loadu_pd(gk + i));
        double total = hsum(s);
        for (; i < plane; ++i) total += gk[i];
        grad_bias[k] += total;
      }
    }
    for (std::size_t k0 = 0; k0 < g.out_channels; k0 += 3) {
      const std::size_t kb = std::min<std::size_t>(3, g.out_channels - k0);
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t a = 0; a < g.kd; ++a) {
          for (std::size_t b = 0; b < g.kh; ++b) {
            switch (kb) {
              case 3:
                backward_weight_taps<3>(x, packed.data(), go_n, k0, c, a, b, grad_w);
                break;
              case 2:
                backward_weight_taps<2>(x, packed.data(), go_n, k0, c, a, b, grad_w);
                break;
              default:
                backward_weight_taps<1>(x, packed.data(), go_n, k0, c, a, b, grad_w);
                break;
            }
          }
        }
      }
    }
  }
}

}  // namespace egcnn::kernels::avx2
