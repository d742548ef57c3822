#include "egcnn/edges.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "egcnn/ops.hpp"
#include "graph.hpp"

namespace egcnn::edges {

using detail::Node;

Tensor sobel3d_kernels() {
  constexpr double smooth[3] = {1.0, 2.0, 1.0};
  constexpr double deriv[3] = {-1.0, 0.0, 1.0};
  std::vector<double> w(3 * 27);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t idx[3] = {a, b, c};
          double v = 1.0;
          for (std::size_t k = 0; k < 3; ++k) v *= (k == axis ? deriv : smooth)[idx[k]];
          w[axis * 27 + (a * 3 + b) * 3 + c] = v;
        }
      }
    }
  }
  return Tensor::from({3, 1, 3, 3, 3}, std::move(w));
}

Tensor sobel3d(const Tensor& volume) {
  if (volume.rank() != 5 || volume.dim(1) != 1) {
    throw ShapeError("sobel3d: expected single-channel [N,1,D,H,W], got " + to_string(volume.shape()));
  }
  static const Tensor kernels = sobel3d_kernels();
  return conv3d(volume, kernels, Tensor(), 1, 1);
}

Tensor gradient_magnitude(const Tensor& responses, double eps) {
  if (responses.rank() != 5 || responses.dim(1) != 3) {
    throw ShapeError("gradient_magnitude: expected [N,3,D,H,W], got " + to_string(responses.shape()));
  }
  if (!(eps > 0.0)) throw std::invalid_argument("gradient_magnitude: eps must be positive");
  const auto& s = responses.shape();
  const std::size_t n_batch = s[0], sp = s[2] * s[3] * s[4];
  auto r = responses.data();
  std::vector<double> m(n_batch * sp);
  for (std::size_t n = 0; n < n_batch; ++n) {
    const double* base = r.data() + n * 3 * sp;
    for (std::size_t i = 0; i < sp; ++i) {
      const double gx = base[i], gy = base[sp + i], gz = base[2 * sp + i];
      m[n * sp + i] = std::sqrt(gx * gx + gy * gy + gz * gz + eps);
    }
  }
  return detail::make_result("gradient_magnitude", {n_batch, 1, s[2], s[3], s[4]}, std::move(m), {responses},
                             [n_batch, sp](Node& self) {
                               Node& in = *self.inputs[0];
                               std::vector<double> g(in.value.size());
                               for (std::size_t n = 0; n < n_batch; ++n) {
                                 for (std::size_t i = 0; i < sp; ++i) {
                                   const double scale = self.grad[n * sp + i] / self.value[n * sp + i];
                                   for (std::size_t a = 0; a < 3; ++a) {
                                     const std::size_t idx = (n * 3 + a) * sp + i;
                                     g[idx] = scale * in.value[idx];
                                   }
                                 }
                               }
                               detail::check_finite("gradient_magnitude backward", g);
                               if (in.grad.empty()) {
                                 in.grad = std::move(g);
                               } else {
                                 for (std::size_t i = 0; i < g.size(); ++i) in.grad[i] += g[i];
                               }
                             });
}

double EdgeMap::beta() const {
  const std::size_t total = total_voxels();
  if (total == 0) throw std::invalid_argument("edge map: empty volume");
  return static_cast<double>(total - edge_voxels) / static_cast<double>(total);
}

EdgeMap edges_from_labels(const LabelVolume& labels, std::size_t classes) {
  check_label_range(labels, classes);
  NoGradGuard no_grad;
  const std::size_t sp = labels.voxels_per_sample();
  std::vector<double> mask(labels.batch * sp, 0.0);
  for (std::size_t c = 1; c < classes; ++c) {
    std::vector<double> indicator(labels.values.size());
    bool any = false;
    for (std::size_t i = 0; i < indicator.size(); ++i) {
      indicator[i] = labels.values[i] == static_cast<std::int32_t>(c) ? 1.0 : 0.0;
      any = any || indicator[i] != 0.0;
    }
    if (!any) continue;
    Tensor vol = Tensor::from({labels.batch, 1, labels.depth, labels.height, labels.width}, std::move(indicator));
    Tensor mag = gradient_magnitude(sobel3d(vol));
    auto mv = mag.data();
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mv[i] > kEdgeThreshold) mask[i] = 1.0;
    }
  }
  EdgeMap out;
  for (double v : mask) out.edge_voxels += v != 0.0 ? 1 : 0;
  out.mask = Tensor::from({labels.batch, 1, labels.depth, labels.height, labels.width}, std::move(mask));
  return out;
}

Tensor argmax_field(const Tensor& probabilities, const SoftBoundaryOptions& options) {
  if (probabilities.rank() != 5) {
    throw ShapeError("argmax_field: expected [N,K,D,H,W], got " + to_string(probabilities.shape()));
  }
  if (!(options.tau > 0.0)) throw std::invalid_argument("argmax_field: tau must be positive");
  const auto& s = probabilities.shape();
  const std::size_t n_batch = s[0], k_n = s[1], sp = s[2] * s[3] * s[4];
  auto p = probabilities.data();

  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto gumbel = [&]() {
    double u = 0.0;
    while (u <= 0.0) u = unit(rng);
    return -std::log(-std::log(u));
  };

  // Tempered softmax weights y_t kept for the backward pass.
  std::vector<double> y(p.size());
  std::vector<double> field(n_batch * sp);
  std::vector<double> z(k_n);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t i = 0; i < sp; ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < k_n; ++c) {
        const double pc = p[(n * k_n + c) * sp + i];
        if (pc < 0.0) throw std::invalid_argument("argmax_field: negative probability");
        total += pc;
        z[c] = std::log(pc) + (options.stochastic ? gumbel() : 0.0);
      }
      if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument("argmax_field: probabilities at voxel " + std::to_string(i) +
                                    " sum to " + std::to_string(total));
      }
      std::size_t best = 0;
      for (std::size_t c = 1; c < k_n; ++c) {
        if (z[c] > z[best]) best = c;
      }
      double norm = 0.0;
      for (std::size_t c = 0; c < k_n; ++c) {
        const double e = std::exp((z[c] - z[best]) / options.tau);
        y[(n * k_n + c) * sp + i] = e;
        norm += e;
      }
      double expected = 0.0;
      for (std::size_t c = 0; c < k_n; ++c) {
        double& yc = y[(n * k_n + c) * sp + i];
        yc /= norm;
        expected += static_cast<double>(c) * yc;
      }
      field[n * sp + i] = options.forward == BoundaryForward::Hard ? static_cast<double>(best) : expected;
    }
  }

  const double tau = options.tau;
  return detail::make_result("argmax_field", {n_batch, 1, s[2], s[3], s[4]}, std::move(field), {probabilities},
                             [y = std::move(y), n_batch, k_n, sp, tau](Node& self) {
                               Node& in = *self.inputs[0];
                               std::vector<double> g(in.value.size(), 0.0);
                               for (std::size_t n = 0; n < n_batch; ++n) {
                                 for (std::size_t i = 0; i < sp; ++i) {
                                   double expected = 0.0;
                                   for (std::size_t c = 0; c < k_n; ++c) {
                                     expected += static_cast<double>(c) * y[(n * k_n + c) * sp + i];
                                   }
                                   const double go = self.grad[n * sp + i];
                                   for (std::size_t c = 0; c < k_n; ++c) {
                                     const std::size_t idx = (n * k_n + c) * sp + i;
                                     const double yc = y[idx];
                                     if (yc == 0.0) continue;
                                     // d/dp_c of sum_t t*y_t, with z_c = log p_c.
                                     g[idx] = go * yc * (static_cast<double>(c) - expected) / (tau * in.value[idx]);
                                   }
                                 }
                               }
                               detail::check_finite("argmax_field backward", g);
                               if (in.grad.empty()) {
                                 in.grad = std::move(g);
                               } else {
                                 for (std::size_t i = 0; i < g.size(); ++i) in.grad[i] += g[i];
                               }
                             });
}

Tensor soft_boundary(const Tensor& probabilities, const SoftBoundaryOptions& options) {
  return gradient_magnitude(sobel3d(argmax_field(probabilities, options)));
}

}  // namespace egcnn::edges
