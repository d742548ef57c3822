#include "egcnn/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "egcnn/ops.hpp"
#include "graph.hpp"

namespace egcnn::loss {

using detail::Node;

namespace {

void add_into(Node& node, std::vector<double>&& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = std::move(g);
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_labels_match(const Tensor& t, const LabelVolume& labels) {
  const auto& s = t.shape();
  if (s.size() != 5 || s[0] != labels.batch || s[2] != labels.depth || s[3] != labels.height ||
      s[4] != labels.width) {
    throw ShapeError("loss: prediction " + to_string(s) + " does not match label volume [" +
                     std::to_string(labels.batch) + "," + std::to_string(labels.depth) + "," +
                     std::to_string(labels.height) + "," + std::to_string(labels.width) + "]");
  }
}

// sum(mask * |a - b|) / sum(mask); b is a constant.
Tensor masked_l1(const Tensor& a, std::vector<double> b, std::vector<double> mask, std::size_t count) {
  auto av = a.data();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (mask[i] != 0.0) s += std::abs(av[i] - b[i]);
  }
  const double denom = static_cast<double>(count);
  return detail::make_result("masked_l1", {}, {s / denom}, {a},
                             [b = std::move(b), mask = std::move(mask), denom](Node& self) {
                               Node& in = *self.inputs[0];
                               const double go = self.grad[0] / denom;
                               std::vector<double> g(in.value.size(), 0.0);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if (mask[i] == 0.0) continue;
                                 const double d = in.value[i] - b[i];
                                 g[i] = d > 0.0 ? go : (d < 0.0 ? -go : 0.0);
                               }
                               add_into(in, std::move(g));
                             });
}

}  // namespace

void LossWeights::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("loss weights: lambdas must be >= 0");
  if (!(dice_eps > 0.0)) throw std::invalid_argument("loss weights: dice_eps must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("loss weights: tau must be positive");
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, double eps) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("dice_loss: shape mismatch " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  if (pred.rank() < 1 || pred.dim(0) == 0) throw ShapeError("dice_loss: empty batch");
  if (!(eps > 0.0)) throw std::invalid_argument("dice_loss: eps must be positive");
  const std::size_t n_batch = pred.dim(0);
  const std::size_t per = pred.numel() / n_batch;
  auto p = pred.data();
  auto t = target.data();
  std::vector<double> inter(n_batch), uni(n_batch);
  double total = 0.0;
  for (std::size_t n = 0; n < n_batch; ++n) {
    double i_sum = 0.0, pp = 0.0, tt = 0.0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      i_sum += t[i] * p[i];
      pp += p[i] * p[i];
      tt += t[i] * t[i];
    }
    inter[n] = i_sum;
    uni[n] = tt + pp + eps;
    total += 1.0 - 2.0 * i_sum / uni[n];
  }
  const double inv_n = 1.0 / static_cast<double>(n_batch);
  return detail::make_result("dice_loss", {}, {total * inv_n}, {pred, target},
                             [inter = std::move(inter), uni = std::move(uni), per, inv_n](Node& self) {
                               Node& np = *self.inputs[0];
                               Node& nt = *self.inputs[1];
                               const double go = self.grad[0] * inv_n;
                               const std::size_t n_batch = inter.size();
                               if (np.requires_grad) {
                                 std::vector<double> g(np.value.size());
                                 for (std::size_t n = 0; n < n_batch; ++n) {
                                   const double u2 = uni[n] * uni[n];
                                   for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
                                     g[i] = go * -2.0 * (nt.value[i] * uni[n] - 2.0 * inter[n] * np.value[i]) / u2;
                                   }
                                 }
                                 add_into(np, std::move(g));
                               }
                               if (nt.requires_grad) {
                                 std::vector<double> g(nt.value.size());
                                 for (std::size_t n = 0; n < n_batch; ++n) {
                                   const double u2 = uni[n] * uni[n];
                                   for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
                                     g[i] = go * -2.0 * (np.value[i] * uni[n] - 2.0 * inter[n] * nt.value[i]) / u2;
                                   }
                                 }
                                 add_into(nt, std::move(g));
                               }
                             });
}

Tensor balanced_bce(const Tensor& edge_logits, const edges::EdgeMap& edge_true) {
  if (!edge_true.mask.defined() || edge_logits.shape() != edge_true.mask.shape()) {
    throw ShapeError("balanced_bce: logits " + to_string(edge_logits.shape()) + " do not match edge map");
  }
  const std::size_t total = edge_logits.numel();
  if (total == 0) throw std::invalid_argument("balanced_bce: empty volume");
  auto x = edge_logits.data();
  auto m = edge_true.mask.data();
  std::size_t edges = 0;
  for (double v : m) edges += v != 0.0 ? 1 : 0;
  const double beta = static_cast<double>(total - edges) / static_cast<double>(total);
  double pos = 0.0, neg = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    if (m[i] != 0.0) {
      pos += softplus(-x[i]);  // -log sigmoid(x)
    } else {
      neg += softplus(x[i]);  // -log(1 - sigmoid(x))
    }
  }
  const double inv_total = 1.0 / static_cast<double>(total);
  const double value = (beta * pos + (1.0 - beta) * neg) * inv_total;
  std::vector<double> mask(m.begin(), m.end());
  return detail::make_result("balanced_bce", {}, {value}, {edge_logits},
                             [mask = std::move(mask), beta, inv_total](Node& self) {
                               Node& in = *self.inputs[0];
                               const double go = self.grad[0] * inv_total;
                               std::vector<double> g(in.value.size());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double s = stable_sigmoid(in.value[i]);
                                 g[i] = mask[i] != 0.0 ? go * beta * (s - 1.0) : go * (1.0 - beta) * s;
                               }
                               add_into(in, std::move(g));
                             });
}

Tensor edge_loss(const Tensor& edge_logits, const edges::EdgeMap& edge_true, const LossWeights& weights) {
  weights.validate();
  Tensor dice = dice_loss(sigmoid(edge_logits), edge_true.mask, weights.dice_eps);
  Tensor bce = balanced_bce(edge_logits, edge_true);
  return add(scale(dice, weights.lambda1), scale(bce, weights.lambda2));
}

Tensor consistency_loss(const Tensor& semantic_probs, const LabelVolume& labels,
                        const ConsistencyOptions& options) {
  require_labels_match(semantic_probs, labels);
  const std::size_t classes = semantic_probs.dim(1);
  edges::EdgeMap edge_map = edges::edges_from_labels(labels, classes);

  std::vector<double> mask;
  std::size_t count = 0;
  if (options.full_volume) {
    mask.assign(edge_map.mask.numel(), 1.0);
    count = mask.size();
  } else {
    auto mv = edge_map.mask.data();
    mask.assign(mv.begin(), mv.end());
    count = edge_map.edge_voxels;
  }
  if (count == 0) return Tensor::scalar(0.0);

  std::vector<double> b_true;
  {
    NoGradGuard no_grad;
    Tensor t = edges::gradient_magnitude(edges::sobel3d(label_field(labels)));
    b_true.assign(t.data().begin(), t.data().end());
  }
  Tensor b_pred = edges::soft_boundary(
      semantic_probs, {options.tau, options.stochastic, options.seed, options.forward});
  return masked_l1(b_pred, std::move(b_true), std::move(mask), count);
}

Tensor per_class_dice_loss(const Tensor& pred, const Tensor& target, double eps) {
  if (pred.shape() != target.shape() || pred.rank() < 2) {
    throw ShapeError("per_class_dice_loss: pred " + to_string(pred.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  const std::size_t channels = pred.dim(1);
  Tensor acc = dice_loss(slice_channels(pred, 0, 1), slice_channels(target, 0, 1), eps);
  for (std::size_t c = 1; c < channels; ++c) {
    acc = add(acc, dice_loss(slice_channels(pred, c, c + 1), slice_channels(target, c, c + 1), eps));
  }
  return scale(acc, 1.0 / static_cast<double>(channels));
}

LossBundle total_loss(const Tensor& semantic_logits, const Tensor& edge_logits, const LabelVolume& labels,
                      const LossWeights& weights, const TotalLossOptions& options) {
  weights.validate();
  require_labels_match(semantic_logits, labels);
  const std::size_t classes = semantic_logits.dim(1);
  LossBundle out;
  Tensor probs = softmax_channels(semantic_logits);
  const Tensor target = one_hot(labels, classes);
  out.semantic = weights.dice_per_class ? per_class_dice_loss(probs, target, weights.dice_eps)
                                        : dice_loss(probs, target, weights.dice_eps);
  if (!edge_logits.defined()) {
    out.edge = Tensor::scalar(0.0);
    out.consistency = Tensor::scalar(0.0);
  } else {
    require_labels_match(edge_logits, labels);
    out.edge = edge_loss(edge_logits, edges::edges_from_labels(labels, classes), weights);
    if (weights.consistency) {
      ConsistencyOptions co;
      co.tau = weights.tau;
      co.stochastic = options.stochastic;
      co.seed = options.seed;
      co.full_volume = weights.consistency_full_volume;
      co.forward = options.boundary;
      out.consistency = consistency_loss(probs, labels, co);
    } else {
      out.consistency = Tensor::scalar(0.0);
    }
  }
  out.total = add(add(out.semantic, out.consistency), out.edge);
  return out;
}

}  // namespace egcnn::loss
