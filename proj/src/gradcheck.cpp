#include "egcnn/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

#include "egcnn/edges.hpp"
#include "egcnn/labels.hpp"
#include "egcnn/losses.hpp"
#include "egcnn/nn.hpp"
#include "egcnn/ops.hpp"

namespace egcnn::gradcheck {

double max_relative_error(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt, const Options& options) {
  for (const auto& t : wrt) {
    if (!t.requires_grad() || !t.is_leaf()) {
      throw std::invalid_argument("gradcheck: every checked tensor must be a leaf with requires_grad");
    }
  }
  Tensor probe;
  {
    NoGradGuard no_grad;
    probe = f();
  }
  std::vector<double> weights;
  if (probe.numel() != 1) {
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    weights.resize(probe.numel());
    for (auto& w : weights) w = dist(rng);
  }
  const Shape out_shape = probe.shape();
  auto scalar = [&]() {
    Tensor y = f();
    if (weights.empty()) return y;
    return sum(mul(y, Tensor::from(out_shape, weights)));
  };

  for (Tensor t : wrt) t.zero_grad();
  backward(scalar());

  double worst = 0.0;
  for (Tensor t : wrt) {
    const std::vector<double> analytic = t.grad();
    const std::size_t n = t.numel();
    const std::size_t stride =
        options.max_per_tensor == 0 || n <= options.max_per_tensor ? 1 : (n + options.max_per_tensor - 1) / options.max_per_tensor;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; i += stride) idx.push_back(i);
    std::vector<double> numeric(idx.size());
    auto data = t.mutable_data();
    {
      NoGradGuard no_grad;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const double x0 = data[idx[k]];
        data[idx[k]] = x0 + options.step;
        const double up = scalar().item();
        data[idx[k]] = x0 - options.step;
        const double down = scalar().item();
        data[idx[k]] = x0;
        numeric[k] = (up - down) / (2.0 * options.step);
      }
    }
    double scale = options.abs_floor, diff = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      scale = std::max({scale, std::abs(analytic[idx[k]]), std::abs(numeric[k])});
      diff = std::max(diff, std::abs(analytic[idx[k]] - numeric[k]));
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

namespace {

// Uniform values with |x| in [0.1, 1], away from the relu kink.
Tensor random_leaf(Shape shape, std::mt19937_64& rng, double lo = 0.1, double hi = 1.0) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor positive_leaf(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.05, 0.95);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Two-class 4^3 labels: foreground at two opposite corners, leaving both
// edge and non-edge voxels.
LabelVolume two_class_labels() {
  LabelVolume l(1, 4, 4, 4);
  l.at(0, 0, 0, 0) = 1;
  l.at(0, 3, 3, 3) = 1;
  return l;
}

std::vector<Tensor> values(const std::vector<nn::Parameter>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

struct Case {
  std::string module;
  std::string name;
  double tolerance;
  std::function<double()> run;
};

std::vector<Case> all_cases() {
  std::vector<Case> cases;
  auto register_case = [&cases](std::string module, std::string name, double tol, std::function<double()> run) {
    cases.push_back({std::move(module), std::move(name), tol, std::move(run)});
  };

  // ---- tensor-core ----
  register_case("tensor-core", "conv3d stride 1 pad 1", kTolerance, [] {
    std::mt19937_64 rng(1);
    Tensor x = random_leaf({1, 2, 4, 4, 4}, rng), w = random_leaf({3, 2, 3, 3, 3}, rng), b = random_leaf({3}, rng);
    return max_relative_error([=] { return conv3d(x, w, b, 1, 1); }, {x, w, b});
  });
  register_case("tensor-core", "conv3d stride 2 pad 1", kTolerance, [] {
    std::mt19937_64 rng(2);
    Tensor x = random_leaf({2, 2, 4, 4, 4}, rng), w = random_leaf({2, 2, 3, 3, 3}, rng), b = random_leaf({2}, rng);
    return max_relative_error([=] { return conv3d(x, w, b, 2, 1); }, {x, w, b});
  });
  register_case("tensor-core", "conv3d 1x1x1", kTolerance, [] {
    std::mt19937_64 rng(3);
    Tensor x = random_leaf({1, 3, 4, 4, 4}, rng), w = random_leaf({2, 3, 1, 1, 1}, rng);
    return max_relative_error([=] { return conv3d(x, w, Tensor(), 1, 0); }, {x, w});
  });
  register_case("tensor-core", "trilinear upsample x2", kTolerance, [] {
    std::mt19937_64 rng(4);
    Tensor x = random_leaf({1, 2, 4, 4, 4}, rng);
    return max_relative_error([=] { return trilinear_upsample(x, 2); }, {x});
  });
  register_case("tensor-core", "relu", kTolerance, [] {
    std::mt19937_64 rng(5);
    Tensor x = random_leaf({1, 2, 4, 4, 4}, rng);
    return max_relative_error([=] { return relu(x); }, {x});
  });
  register_case("tensor-core", "sigmoid", kTolerance, [] {
    std::mt19937_64 rng(6);
    Tensor x = random_leaf({1, 2, 4, 4, 4}, rng, 0.0, 4.0);
    return max_relative_error([=] { return sigmoid(x); }, {x});
  });
  register_case("tensor-core", "softmax over channels", kTolerance, [] {
    std::mt19937_64 rng(7);
    Tensor x = random_leaf({2, 2, 4, 4, 4}, rng, 0.0, 3.0);
    return max_relative_error([=] { return softmax_channels(x); }, {x});
  });
  register_case("tensor-core", "add, mul, scale", kTolerance, [] {
    std::mt19937_64 rng(8);
    Tensor a = random_leaf({1, 2, 4, 4, 4}, rng), b = random_leaf({1, 2, 4, 4, 4}, rng);
    return max_relative_error([=] { return scale(add(mul(a, b), add(a, 0.5)), 1.5); }, {a, b});
  });
  register_case("tensor-core", "concat, slice, repeat", kTolerance, [] {
    std::mt19937_64 rng(9);
    Tensor a = random_leaf({1, 2, 4, 4, 4}, rng), b = random_leaf({1, 1, 4, 4, 4}, rng);
    return max_relative_error(
        [=] { return mul(slice_channels(concat_channels({a, b}), 1, 3), repeat_channels(b, 2)); }, {a, b});
  });
  register_case("tensor-core", "sum and mean reductions", kTolerance, [] {
    std::mt19937_64 rng(10);
    Tensor x = random_leaf({2, 2, 4, 4, 4}, rng);
    return max_relative_error(
        [=] { return add(reduce(mul(x, x), Reduction::Mean, {2, 3, 4}), reduce(x, Reduction::Sum, {2, 3, 4})); }, {x});
  });

  // ---- nn-blocks ----
  register_case("nn-blocks", "group_norm", kTolerance, [] {
    std::mt19937_64 rng(11);
    Tensor x = random_leaf({2, 4, 4, 4, 4}, rng, 0.0, 2.0), g = random_leaf({4}, rng), b = random_leaf({4}, rng);
    return max_relative_error([=] { return group_norm(x, 2, g, b); }, {x, g, b});
  });
  register_case("nn-blocks", "residual block", kTolerance, [] {
    nn::Rng rng(12);
    const nn::ResidualBlock block("block", 4, 2, rng);
    Tensor x = random_leaf({1, 4, 4, 4, 4}, rng);
    std::vector<nn::Parameter> params;
    block.collect(params);
    auto wrt = values(params);
    wrt.push_back(x);
    return max_relative_error([=] { return block.forward(x); }, wrt);
  });
  register_case("nn-blocks", "edge-gated layer", kTolerance, [] {
    nn::Rng rng(13);
    const nn::EdgeGatedLayer gate("gate", 3, 4, 0, rng);
    Tensor e = random_leaf({1, 3, 4, 4, 4}, rng), m = random_leaf({1, 4, 4, 4, 4}, rng);
    std::vector<nn::Parameter> params;
    gate.collect(params);
    auto wrt = values(params);
    wrt.push_back(e);
    wrt.push_back(m);
    return max_relative_error([=] { return gate.forward(e, m); }, wrt);
  });
  register_case("nn-blocks", "full model, semantic and edge losses", kTolerance, [] {
    nn::ModelConfig cfg;
    cfg.resolutions = 2;
    cfg.base_channels = 2;
    cfg.classes = 2;
    cfg.groups = 2;
    cfg.seed = 14;
    const nn::EgModel model(cfg);
    std::mt19937_64 rng(14);
    Tensor x = random_leaf({1, 1, 4, 4, 4}, rng, 0.0, 2.0);
    const LabelVolume labels = two_class_labels();
    loss::LossWeights w;
    w.consistency = false;
    auto wrt = values(model.parameters());
    wrt.push_back(x);
    return max_relative_error(
        [=, &model] {
          const auto out = model.forward(x);
          return loss::total_loss(out.semantic_logits, out.edge_logits, labels, w).total;
        },
        wrt);
  });

  // ---- edge-ops ----
  register_case("edge-ops", "sobel3d", kTolerance, [] {
    std::mt19937_64 rng(15);
    Tensor x = random_leaf({2, 1, 4, 4, 4}, rng);
    return max_relative_error([=] { return edges::sobel3d(x); }, {x});
  });
  register_case("edge-ops", "gradient magnitude", kTolerance, [] {
    std::mt19937_64 rng(16);
    Tensor r = random_leaf({1, 3, 4, 4, 4}, rng);
    return max_relative_error([=] { return edges::gradient_magnitude(r); }, {r});
  });
  register_case("edge-ops", "soft boundary (relaxed surrogate)", kSurrogateTolerance, [] {
    std::mt19937_64 rng(17);
    Tensor z = random_leaf({1, 2, 4, 4, 4}, rng, 0.0, 2.0);
    edges::SoftBoundaryOptions o;
    o.forward = edges::BoundaryForward::Relaxed;
    return max_relative_error([=] { return edges::soft_boundary(softmax_channels(z), o); }, {z});
  });

  // ---- losses ----
  register_case("losses", "dice loss", kTolerance, [] {
    std::mt19937_64 rng(18);
    Tensor p = positive_leaf({2, 2, 4, 4, 4}, rng), t = positive_leaf({2, 2, 4, 4, 4}, rng);
    return max_relative_error([=] { return loss::dice_loss(p, t); }, {p, t});
  });
  register_case("losses", "semantic dice through softmax", kTolerance, [] {
    std::mt19937_64 rng(19);
    Tensor z = random_leaf({1, 2, 4, 4, 4}, rng, 0.0, 2.0);
    const Tensor target = one_hot(two_class_labels(), 2);
    return max_relative_error([=] { return loss::dice_loss(softmax_channels(z), target); }, {z});
  });
  register_case("losses", "balanced BCE", kTolerance, [] {
    std::mt19937_64 rng(20);
    Tensor x = random_leaf({1, 1, 4, 4, 4}, rng, 0.0, 3.0);
    const auto edges_true = edges::edges_from_labels(two_class_labels(), 2);
    return max_relative_error([=] { return loss::balanced_bce(x, edges_true); }, {x});
  });
  register_case("losses", "edge loss", kTolerance, [] {
    std::mt19937_64 rng(21);
    Tensor x = random_leaf({1, 1, 4, 4, 4}, rng, 0.0, 3.0);
    const auto edges_true = edges::edges_from_labels(two_class_labels(), 2);
    return max_relative_error([=] { return loss::edge_loss(x, edges_true, loss::LossWeights{}); }, {x});
  });
  register_case("losses", "consistency loss (relaxed surrogate)", kSurrogateTolerance, [] {
    std::mt19937_64 rng(22);
    Tensor z = random_leaf({1, 2, 4, 4, 4}, rng, 0.0, 2.0);
    const LabelVolume labels = two_class_labels();
    loss::ConsistencyOptions o;
    o.forward = edges::BoundaryForward::Relaxed;
    return max_relative_error([=] { return loss::consistency_loss(softmax_channels(z), labels, o); }, {z});
  });
  register_case("losses", "total loss (relaxed surrogate)", kSurrogateTolerance, [] {
    std::mt19937_64 rng(23);
    Tensor s = random_leaf({1, 2, 4, 4, 4}, rng, 0.0, 2.0), e = random_leaf({1, 1, 4, 4, 4}, rng, 0.0, 2.0);
    const LabelVolume labels = two_class_labels();
    loss::TotalLossOptions o;
    o.boundary = edges::BoundaryForward::Relaxed;
    return max_relative_error([=] { return loss::total_loss(s, e, labels, loss::LossWeights{}, o).total; }, {s, e});
  });
  return cases;
}

}  // namespace

std::vector<std::string> module_names() { return {"tensor-core", "nn-blocks", "edge-ops", "losses"}; }

std::vector<Result> run_suite(const std::string& module) {
  const auto names = module_names();
  if (!module.empty() && std::find(names.begin(), names.end(), module) == names.end()) {
    throw std::invalid_argument("gradcheck: unknown module '" + module + "'");
  }
  std::vector<Result> results;
  for (const auto& c : all_cases()) {
    if (!module.empty() && c.module != module) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    r.module = c.module;
    r.name = c.name;
    r.tolerance = c.tolerance;
    r.error = c.run();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(r);
  }
  return results;
}

}  // namespace egcnn::gradcheck
