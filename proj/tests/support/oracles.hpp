#pragma once

// Brute-force reference implementations used as test oracles. Everything
// here is written as direct loops over the defining formulas and shares no
// code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

struct Dims5 {
  std::size_t n, c, d, h, w;
  std::size_t size() const { return n * c * d * h * w; }
  std::size_t at(std::size_t in, std::size_t ic, std::size_t id, std::size_t ih, std::size_t iw) const {
    return (((in * c + ic) * d + id) * h + ih) * w + iw;
  }
};

inline std::vector<double> random_values(std::size_t count, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(count);
  for (double& x : v) x = u(rng);
  return v;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Cross-correlation, one output element at a time.
inline std::vector<double> conv3d(const std::vector<double>& in, Dims5 x, const std::vector<double>& w, Dims5 k,
                                  const std::vector<double>* bias, std::size_t stride, std::size_t pad) {
  const std::size_t od = (x.d + 2 * pad - k.d) / stride + 1;
  const std::size_t oh = (x.h + 2 * pad - k.h) / stride + 1;
  const std::size_t ow = (x.w + 2 * pad - k.w) / stride + 1;
  Dims5 o{x.n, k.n, od, oh, ow};
  std::vector<double> out(o.size(), 0.0);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t f = 0; f < k.n; ++f)
      for (std::size_t z = 0; z < od; ++z)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            double acc = bias ? (*bias)[f] : 0.0;
            for (std::size_t c = 0; c < x.c; ++c)
              for (std::size_t a = 0; a < k.d; ++a)
                for (std::size_t b = 0; b < k.h; ++b)
                  for (std::size_t e = 0; e < k.w; ++e) {
                    const long sd = static_cast<long>(z * stride + a) - static_cast<long>(pad);
                    const long sh = static_cast<long>(y * stride + b) - static_cast<long>(pad);
                    const long sw = static_cast<long>(xx * stride + e) - static_cast<long>(pad);
                    if (sd < 0 || sh < 0 || sw < 0 || sd >= static_cast<long>(x.d) || sh >= static_cast<long>(x.h) ||
                        sw >= static_cast<long>(x.w)) {
                      continue;
                    }
                    acc += in[x.at(n, c, sd, sh, sw)] * w[k.at(f, c, a, b, e)];
                  }
            out[o.at(n, f, z, y, xx)] = acc;
          }
  return out;
}

// Linear interpolation weights of one axis for align_corners = false.
inline double upsample_1d(const std::vector<double>& line, std::size_t scale, std::size_t j) {
  const double src = std::max((static_cast<double>(j) + 0.5) / static_cast<double>(scale) - 0.5, 0.0);
  const std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(src)), line.size() - 1);
  const std::size_t i1 = std::min(i0 + 1, line.size() - 1);
  const double t = src - static_cast<double>(i0);
  return line[i0] * (1.0 - t) + line[i1] * t;
}

// Edge-gated layer evaluated voxel by voxel:
//   alpha = sigmoid(max(0, we . e + be + wm . m + bm)), out = e * alpha + e.
inline std::vector<double> gate(const std::vector<double>& e, std::size_t ce, const std::vector<double>& m,
                                std::size_t cm, std::size_t voxels, const std::vector<double>& we, double be,
                                const std::vector<double>& wm, double bm) {
  std::vector<double> out(e.size());
  for (std::size_t v = 0; v < voxels; ++v) {
    double s = be + bm;
    for (std::size_t c = 0; c < ce; ++c) s += we[c] * e[c * voxels + v];
    for (std::size_t c = 0; c < cm; ++c) s += wm[c] * m[c * voxels + v];
    const double alpha = 1.0 / (1.0 + std::exp(-std::max(0.0, s)));
    for (std::size_t c = 0; c < ce; ++c) out[c * voxels + v] = e[c * voxels + v] * alpha + e[c * voxels + v];
  }
  return out;
}

// Balanced BCE: beta = share of non-edge voxels, mean over all voxels.
inline double balanced_bce(const std::vector<double>& logits, const std::vector<double>& edge) {
  double edges = 0.0;
  for (double t : edge) edges += t;
  const double beta = 1.0 - edges / static_cast<double>(edge.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    total += edge[i] != 0.0 ? -beta * std::log(p) : -(1.0 - beta) * std::log(1.0 - p);
  }
  return total / static_cast<double>(logits.size());
}

// Dice loss of one sample, all channels and voxels pooled.
inline double dice_loss(const std::vector<double>& pred, const std::vector<double>& target, double eps) {
  double inter = 0.0, tt = 0.0, pp = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * target[i];
    tt += target[i] * target[i];
    pp += pred[i] * pred[i];
  }
  return 1.0 - 2.0 * inter / (tt + pp + eps);
}

// Sobel weight of offset (a, b, c) in {-1,0,1}^3 for the kernel that
// differentiates along `axis`.
inline double sobel_weight(int axis, int a, int b, int c) {
  const std::array<int, 3> o{a, b, c};
  double w = 1.0;
  for (int ax = 0; ax < 3; ++ax) w *= ax == axis ? static_cast<double>(o[ax]) : (o[ax] == 0 ? 2.0 : 1.0);
  return w;
}

// Sobel gradient magnitude of one [D,H,W] field with zero padding.
inline std::vector<double> sobel_magnitude(const std::vector<double>& f, std::size_t D, std::size_t H, std::size_t W) {
  std::vector<double> out(f.size());
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        double sq = 0.0;
        for (int axis = 0; axis < 3; ++axis) {
          double g = 0.0;
          for (int a = -1; a <= 1; ++a)
            for (int b = -1; b <= 1; ++b)
              for (int c = -1; c <= 1; ++c) {
                const long z = static_cast<long>(d) + a, y = static_cast<long>(h) + b, x = static_cast<long>(w) + c;
                if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(D) || y >= static_cast<long>(H) ||
                    x >= static_cast<long>(W)) {
                  continue;
                }
                g += sobel_weight(axis, a, b, c) * f[(z * H + y) * W + x];
              }
          sq += g * g;
        }
        out[(d * H + h) * W + w] = std::sqrt(sq);
      }
  return out;
}

// Edge voxels of one [D,H,W] label volume: any foreground class with a
// non-zero Sobel response.
inline std::vector<double> edges(const std::vector<std::int32_t>& labels, std::size_t classes, std::size_t D,
                                 std::size_t H, std::size_t W) {
  std::vector<double> mask(labels.size(), 0.0);
  for (std::size_t c = 1; c < classes; ++c) {
    std::vector<double> ind(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) ind[i] = labels[i] == static_cast<std::int32_t>(c) ? 1.0 : 0.0;
    const auto mag = sobel_magnitude(ind, D, H, W);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mag[i] > 1e-6) mask[i] = 1.0;
    }
  }
  return mask;
}

// Dice of two voxel sets from explicit counts; both empty scores 1.
inline double set_dice(const std::vector<bool>& a, const std::vector<bool>& b) {
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    both += a[i] && b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

// (organ Dice + lesion Dice) / 2 with organ = label >= 1, lesion = label >= 2.
inline std::array<double, 3> composite(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth) {
  std::vector<bool> po(pred.size()), to(pred.size()), pl(pred.size()), tl(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    po[i] = pred[i] >= 1;
    to[i] = truth[i] >= 1;
    pl[i] = pred[i] >= 2;
    tl[i] = truth[i] >= 2;
  }
  const double organ = set_dice(po, to), lesion = set_dice(pl, tl);
  return {organ, lesion, (organ + lesion) / 2.0};
}

}  // namespace oracle
