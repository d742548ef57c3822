#include "egcnn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "egcnn/kernels.hpp"
#include "graph.hpp"

namespace egcnn {

using detail::Node;

namespace {

void accumulate(Node& node, std::vector<double>&& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = std::move(g);
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(x.shape()));
  }
}

std::size_t spatial_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

// Linear interpolation taps along one axis for integer upscaling.
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_lo, w_hi;
};

AxisTaps axis_taps(std::size_t in, std::size_t scale) {
  const std::size_t out = in * scale;
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_lo.resize(out);
  t.w_hi.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(scale) - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    std::size_t i1 = std::min(i0 + 1, in - 1);
    double frac = src - static_cast<double>(i0);
    t.lo[o] = i0;
    t.hi[o] = i1;
    t.w_lo[o] = 1.0 - frac;
    t.w_hi[o] = frac;
  }
  return t;
}

// x viewed as [outer, n, inner] -> [outer, n*scale, inner].
std::vector<double> interp_axis(const std::vector<double>& x, std::size_t outer, std::size_t n,
                                std::size_t inner, const AxisTaps& t) {
  const std::size_t m = t.lo.size();
  std::vector<double> y(outer * m * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.data() + o * n * inner;
    double* dst = y.data() + o * m * inner;
    for (std::size_t j = 0; j < m; ++j) {
      const double* a = src + t.lo[j] * inner;
      const double* b = src + t.hi[j] * inner;
      const double wa = t.w_lo[j], wb = t.w_hi[j];
      double* d = dst + j * inner;
      for (std::size_t i = 0; i < inner; ++i) d[i] = wa * a[i] + wb * b[i];
    }
  }
  return y;
}

std::vector<double> interp_axis_transpose(const std::vector<double>& g, std::size_t outer,
                                          std::size_t n, std::size_t inner, const AxisTaps& t) {
  const std::size_t m = t.lo.size();
  std::vector<double> gx(outer * n * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = g.data() + o * m * inner;
    double* dst = gx.data() + o * n * inner;
    for (std::size_t j = 0; j < m; ++j) {
      double* a = dst + t.lo[j] * inner;
      double* b = dst + t.hi[j] * inner;
      const double wa = t.w_lo[j], wb = t.w_hi[j];
      const double* s = src + j * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        a[i] += wa * s[i];
        b[i] += wb * s[i];
      }
    }
  }
  return gx;
}

}  // namespace

double pairwise_sum(std::span<const double> v) noexcept {
  constexpr std::size_t kBlock = 16;
  if (v.size() <= kBlock) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank("conv3d", input, 5);
  require_rank("conv3d", weight, 5);
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (is[1] != ws[1]) {
    throw ShapeError("conv3d: input channels " + std::to_string(is[1]) + " != weight channels " +
                     std::to_string(ws[1]));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != ws[0])) {
    throw ShapeError("conv3d: bias shape " + to_string(bias.shape()) + " does not match " +
                     std::to_string(ws[0]) + " output channels");
  }
  kernels::ConvGeometry g;
  g.batch = is[0];
  g.in_channels = is[1];
  g.depth = is[2];
  g.height = is[3];
  g.width = is[4];
  g.out_channels = ws[0];
  g.kd = ws[2];
  g.kh = ws[3];
  g.kw = ws[4];
  g.stride = stride;
  g.pad_d = g.pad_h = g.pad_w = padding;
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw ShapeError(e.what());
  }

  std::vector<double> out(g.output_size());
  kernels::conv3d_forward(g, input.data().data(), weight.data().data(),
                          bias.defined() ? bias.data().data() : nullptr, out.data());

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  Shape shape{g.batch, g.out_channels, g.out_depth(), g.out_height(), g.out_width()};
  return detail::make_result("conv3d", std::move(shape), std::move(out), inputs, [g, has_bias](Node& self) {
    Node& in = *self.inputs[0];
    Node& w = *self.inputs[1];
    Node* b = has_bias ? self.inputs[2].get() : nullptr;
    if (in.requires_grad) {
      std::vector<double> gi(in.value.size());
      kernels::conv3d_backward_input(g, self.grad.data(), w.value.data(), gi.data());
      accumulate(in, std::move(gi));
    }
    const bool need_b = b && b->requires_grad;
    if (w.requires_grad || need_b) {
      std::vector<double> gw(w.value.size());
      std::vector<double> gb(need_b ? g.out_channels : 0);
      kernels::conv3d_backward_weight(g, in.value.data(), self.grad.data(), gw.data(),
                                      need_b ? gb.data() : nullptr);
      accumulate(w, std::move(gw));
      if (need_b) accumulate(*b, std::move(gb));
    }
  });
}

Tensor trilinear_upsample(const Tensor& input, std::size_t scale) {
  require_rank("trilinear_upsample", input, 5);
  if (scale == 0) throw ShapeError("trilinear_upsample: scale must be >= 1");
  const auto& s = input.shape();
  if (numel(s) == 0) throw ShapeError("trilinear_upsample: zero-extent input " + to_string(s));
  const std::size_t nc = s[0] * s[1], d = s[2], h = s[3], w = s[4];
  const AxisTaps td = axis_taps(d, scale), th = axis_taps(h, scale), tw = axis_taps(w, scale);
  const std::size_t D = d * scale, H = h * scale, W = w * scale;

  std::vector<double> x(input.data().begin(), input.data().end());
  auto y1 = interp_axis(x, nc * d * h, w, 1, tw);       // [nc,d,h,W]
  auto y2 = interp_axis(y1, nc * d, h, W, th);          // [nc,d,H,W]
  auto y3 = interp_axis(y2, nc, d, H * W, td);          // [nc,D,H,W]

  Shape shape{s[0], s[1], D, H, W};
  return detail::make_result("trilinear_upsample", std::move(shape), std::move(y3), {input},
                             [=](Node& self) {
                               auto g2 = interp_axis_transpose(self.grad, nc, d, H * W, td);
                               auto g1 = interp_axis_transpose(g2, nc * d, h, W, th);
                               auto g0 = interp_axis_transpose(g1, nc * d * h, w, 1, tw);
                               accumulate(*self.inputs[0], std::move(g0));
                             });
}

Tensor relu(const Tensor& x) {
  auto v = x.data();
  std::vector<double> y(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] > 0.0 ? v[i] : 0.0;
  return detail::make_result("relu", x.shape(), std::move(y), {x}, [](Node& self) {
    Node& in = *self.inputs[0];
    std::vector<double> g(in.value.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = in.value[i] > 0.0 ? self.grad[i] : 0.0;
    accumulate(in, std::move(g));
  });
}

Tensor sigmoid(const Tensor& x) {
  auto v = x.data();
  std::vector<double> y(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = v[i];
    if (t >= 0.0) {
      y[i] = 1.0 / (1.0 + std::exp(-t));
    } else {
      const double e = std::exp(t);
      y[i] = e / (1.0 + e);
    }
  }
  return detail::make_result("sigmoid", x.shape(), std::move(y), {x}, [](Node& self) {
    std::vector<double> g(self.value.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * self.value[i] * (1.0 - self.value[i]);
    accumulate(*self.inputs[0], std::move(g));
  });
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 2) throw ShapeError("group_norm: expected [N,C,...], got " + to_string(x.shape()));
  const auto& s = x.shape();
  const std::size_t n_batch = s[0], channels = s[1], sp = spatial_size(s);
  if (groups == 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw ShapeError("group_norm: gamma/beta must have shape [" + std::to_string(channels) + "]");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("group_norm: eps must be positive");

  const std::size_t cg = channels / groups;
  const std::size_t block = cg * sp;
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(n_batch * groups);
  std::vector<double> y(xv.size());

  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (n * channels + gi * cg) * sp;
      const double mu = pairwise_sum(xv.subspan(base, block)) / static_cast<double>(block);
      double var = 0.0;
      for (std::size_t i = 0; i < block; ++i) {
        const double d = xv[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(block);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[n * groups + gi] = inv;
      for (std::size_t cc = 0; cc < cg; ++cc) {
        const std::size_t c = gi * cg + cc;
        for (std::size_t i = 0; i < sp; ++i) {
          const std::size_t idx = base + cc * sp + i;
          xhat[idx] = (xv[idx] - mu) * inv;
          y[idx] = gv[c] * xhat[idx] + bv[c];
        }
      }
    }
  }

  return detail::make_result(
      "group_norm", s, std::move(y), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n_batch, channels, groups, cg, sp,
       block](Node& self) {
        Node& in = *self.inputs[0];
        Node& gam = *self.inputs[1];
        Node& bet = *self.inputs[2];
        const auto& dy = self.grad;
        if (gam.requires_grad || bet.requires_grad) {
          std::vector<double> dg(channels, 0.0), db(channels, 0.0);
          for (std::size_t n = 0; n < n_batch; ++n) {
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t base = (n * channels + c) * sp;
              double sg = 0.0, sb = 0.0;
              for (std::size_t i = 0; i < sp; ++i) {
                sg += dy[base + i] * xhat[base + i];
                sb += dy[base + i];
              }
              dg[c] += sg;
              db[c] += sb;
            }
          }
          accumulate(gam, std::move(dg));
          accumulate(bet, std::move(db));
        }
        if (!in.requires_grad) return;
        std::vector<double> dx(dy.size());
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (n * channels + gi * cg) * sp;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const double gc = gam.value[gi * cg + cc];
              for (std::size_t i = 0; i < sp; ++i) {
                const std::size_t idx = base + cc * sp + i;
                const double dxh = dy[idx] * gc;
                m1 += dxh;
                m2 += dxh * xhat[idx];
              }
            }
            m1 /= static_cast<double>(block);
            m2 /= static_cast<double>(block);
            const double inv = inv_std[n * groups + gi];
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const double gc = gam.value[gi * cg + cc];
              for (std::size_t i = 0; i < sp; ++i) {
                const std::size_t idx = base + cc * sp + i;
                dx[idx] = inv * (dy[idx] * gc - m1 - xhat[idx] * m2);
              }
            }
          }
        }
        accumulate(in, std::move(dx));
      });
}

Tensor softmax_channels(const Tensor& x) {
  if (x.rank() < 2 || x.dim(1) == 0) {
    throw ShapeError("softmax_channels: expected [N,C,...] with C >= 1, got " + to_string(x.shape()));
  }
  const auto& s = x.shape();
  const std::size_t n_batch = s[0], channels = s[1], sp = spatial_size(s);
  auto xv = x.data();
  std::vector<double> p(xv.size());
  for (std::size_t n = 0; n < n_batch; ++n) {
    const std::size_t base = n * channels * sp;
    for (std::size_t i = 0; i < sp; ++i) {
      double mx = xv[base + i];
      for (std::size_t c = 1; c < channels; ++c) mx = std::max(mx, xv[base + c * sp + i]);
      double z = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double e = std::exp(xv[base + c * sp + i] - mx);
        p[base + c * sp + i] = e;
        z += e;
      }
      for (std::size_t c = 0; c < channels; ++c) p[base + c * sp + i] /= z;
    }
  }
  return detail::make_result("softmax_channels", s, std::move(p), {x},
                             [n_batch, channels, sp](Node& self) {
                               const auto& p = self.value;
                               const auto& dy = self.grad;
                               std::vector<double> dx(p.size());
                               for (std::size_t n = 0; n < n_batch; ++n) {
                                 const std::size_t base = n * channels * sp;
                                 for (std::size_t i = 0; i < sp; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < channels; ++c) {
                                     dot += p[base + c * sp + i] * dy[base + c * sp + i];
                                   }
                                   for (std::size_t c = 0; c < channels; ++c) {
                                     const std::size_t idx = base + c * sp + i;
                                     dx[idx] = p[idx] * (dy[idx] - dot);
                                   }
                                 }
                               }
                               accumulate(*self.inputs[0], std::move(dx));
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return detail::make_result("add", a.shape(), std::move(y), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& in = *self.inputs[k];
      if (in.requires_grad) accumulate(in, std::vector<double>(self.grad));
    }
  });
}

Tensor add(const Tensor& a, double b) {
  auto av = a.data();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + b;
  return detail::make_result("add_scalar", a.shape(), std::move(y), {a}, [](Node& self) {
    accumulate(*self.inputs[0], std::vector<double>(self.grad));
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return detail::make_result("mul", a.shape(), std::move(y), {a, b}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      std::vector<double> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * nb.value[i];
      accumulate(na, std::move(g));
    }
    if (nb.requires_grad) {
      std::vector<double> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * na.value[i];
      accumulate(nb, std::move(g));
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto av = a.data();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * factor;
  return detail::make_result("scale", a.shape(), std::move(y), {a}, [factor](Node& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * factor;
    accumulate(*self.inputs[0], std::move(g));
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) throw ShapeError("concat_channels: expected [N,C,...], got " + to_string(first));
  std::vector<std::size_t> widths;
  std::size_t total_c = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size() && s[0] == first[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat_channels: " + to_string(s) + " incompatible with " + to_string(first));
    }
    widths.push_back(s[1]);
    total_c += s[1];
  }
  const std::size_t n_batch = first[0], sp = spatial_size(first);
  Shape shape = first;
  shape[1] = total_c;
  std::vector<double> y(n_batch * total_c * sp);
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::size_t c0 = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto v = parts[k].data();
      std::copy_n(v.begin() + n * widths[k] * sp, widths[k] * sp, y.begin() + (n * total_c + c0) * sp);
      c0 += widths[k];
    }
  }
  return detail::make_result("concat_channels", std::move(shape), std::move(y), parts,
                             [widths, n_batch, total_c, sp](Node& self) {
                               std::size_t c0 = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 Node& in = *self.inputs[k];
                                 if (in.requires_grad) {
                                   std::vector<double> g(n_batch * widths[k] * sp);
                                   for (std::size_t n = 0; n < n_batch; ++n) {
                                     std::copy_n(self.grad.begin() + (n * total_c + c0) * sp, widths[k] * sp,
                                                 g.begin() + n * widths[k] * sp);
                                   }
                                   accumulate(in, std::move(g));
                                 }
                                 c0 += widths[k];
                               }
                             });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 2 || begin >= end || end > x.dim(1)) {
    throw ShapeError("slice_channels: invalid range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") for " + to_string(x.shape()));
  }
  const auto& s = x.shape();
  const std::size_t n_batch = s[0], channels = s[1], sp = spatial_size(s), width = end - begin;
  Shape shape = s;
  shape[1] = width;
  auto xv = x.data();
  std::vector<double> y(n_batch * width * sp);
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy_n(xv.begin() + (n * channels + begin) * sp, width * sp, y.begin() + n * width * sp);
  }
  return detail::make_result("slice_channels", std::move(shape), std::move(y), {x},
                             [=](Node& self) {
                               std::vector<double> g(n_batch * channels * sp, 0.0);
                               for (std::size_t n = 0; n < n_batch; ++n) {
                                 std::copy_n(self.grad.begin() + n * width * sp, width * sp,
                                             g.begin() + (n * channels + begin) * sp);
                               }
                               accumulate(*self.inputs[0], std::move(g));
                             });
}

Tensor repeat_channels(const Tensor& x, std::size_t copies) {
  if (copies == 0) throw ShapeError("repeat_channels: copies must be positive");
  if (copies == 1) return x;
  return concat_channels(std::vector<Tensor>(copies, x));
}

Tensor reduce(const Tensor& x, Reduction kind, std::vector<std::size_t> axes) {
  const Shape& s = x.shape();
  const std::size_t rank = s.size();
  std::vector<bool> reduced(rank, axes.empty());
  for (auto a : axes) {
    if (a >= rank) {
      throw ShapeError("reduce: axis " + std::to_string(a) + " invalid for " + to_string(s));
    }
    if (reduced[a]) throw ShapeError("reduce: duplicate axis " + std::to_string(a));
    reduced[a] = true;
  }
  Shape out_shape, kept_ext, red_ext;
  std::vector<std::size_t> kept_stride, red_stride;
  std::vector<std::size_t> stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) stride[i - 1] = stride[i] * s[i];
  for (std::size_t i = 0; i < rank; ++i) {
    if (reduced[i]) {
      red_ext.push_back(s[i]);
      red_stride.push_back(stride[i]);
    } else {
      out_shape.push_back(s[i]);
      kept_ext.push_back(s[i]);
      kept_stride.push_back(stride[i]);
    }
  }
  const std::size_t n_out = numel(out_shape), n_red = numel(red_ext);
  if (n_red == 0) throw ShapeError("reduce: empty reduction over " + to_string(s));

  // Flat input offsets of each output element and each reduced position.
  auto offsets = [](const Shape& ext, const std::vector<std::size_t>& str) {
    std::vector<std::size_t> off(numel(ext), 0);
    for (std::size_t flat = 0; flat < off.size(); ++flat) {
      std::size_t rem = flat, o = 0;
      for (std::size_t i = ext.size(); i-- > 0;) {
        o += (rem % ext[i]) * str[i];
        rem /= ext[i];
      }
      off[flat] = o;
    }
    return off;
  };
  auto out_off = offsets(kept_ext, kept_stride);
  auto red_off = offsets(red_ext, red_stride);

  auto xv = x.data();
  std::vector<double> buf(n_red);
  std::vector<double> y(n_out);
  const double div = kind == Reduction::Mean ? static_cast<double>(n_red) : 1.0;
  for (std::size_t o = 0; o < n_out; ++o) {
    for (std::size_t r = 0; r < n_red; ++r) buf[r] = xv[out_off[o] + red_off[r]];
    y[o] = pairwise_sum(buf) / div;
  }
  return detail::make_result(kind == Reduction::Mean ? "mean" : "sum", std::move(out_shape), std::move(y),
                             {x},
                             [out_off = std::move(out_off), red_off = std::move(red_off), div](Node& self) {
                               Node& in = *self.inputs[0];
                               std::vector<double> g(in.value.size(), 0.0);
                               for (std::size_t o = 0; o < out_off.size(); ++o) {
                                 const double go = self.grad[o] / div;
                                 for (auto r : red_off) g[out_off[o] + r] += go;
                               }
                               accumulate(in, std::move(g));
                             });
}

}  // namespace egcnn
