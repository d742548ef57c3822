#include <cmath>
#include <vector>

#include "doctest.h"
#include "egcnn/edges.hpp"
#include "egcnn/gradcheck.hpp"
#include "egcnn/losses.hpp"
#include "egcnn/nn.hpp"
#include "egcnn/ops.hpp"
#include "support/oracles.hpp"

using namespace egcnn;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

LabelVolume random_labels(std::size_t n, std::size_t d, std::size_t classes, std::uint64_t seed) {
  LabelVolume l(n, d, d, d);
  std::mt19937_64 rng(seed);
  for (auto& v : l.values) v = static_cast<std::int32_t>(rng() % classes);
  return l;
}

// Ball of label 1 with a label-2 core, so all three classes have edges.
LabelVolume nested_labels(std::size_t e) {
  LabelVolume l(1, e, e, e);
  const double c = (static_cast<double>(e) - 1.0) / 2.0;
  for (std::size_t d = 0; d < e; ++d)
    for (std::size_t h = 0; h < e; ++h)
      for (std::size_t w = 0; w < e; ++w) {
        const double r2 = (d - c) * (d - c) + (h - c) * (h - c) + (w - c) * (w - c);
        l.at(0, d, h, w) = r2 <= 2.0 ? 2 : (r2 <= 6.0 ? 1 : 0);
      }
  return l;
}

// Saturated logits: +40 on the labelled class / edge, -40 elsewhere.
Tensor saturated(const Tensor& indicator) {
  std::vector<double> v(indicator.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = indicator.at(i) != 0.0 ? 40.0 : -40.0;
  return Tensor::from(indicator.shape(), v);
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("dice loss: perfect overlap, disjoint sets and the half-overlap case") {
    std::vector<double> t(200, 0.0);
    for (std::size_t i = 0; i < 120; ++i) t[i] = 1.0;
    const Tensor target = Tensor::from({1, 1, 200}, t);
    CHECK(loss::dice_loss(target, target).item() < 1e-4);

    std::vector<double> disjoint(200, 0.0);
    for (std::size_t i = 120; i < 200; ++i) disjoint[i] = 1.0;
    CHECK(std::abs(loss::dice_loss(Tensor::from({1, 1, 200}, disjoint), target).item() - 1.0) < 1e-12);

    // 8 target voxels; the prediction matches 4 of them and is zero elsewhere.
    std::vector<double> t8(16, 0.0), p4(16, 0.0);
    for (std::size_t i = 0; i < 8; ++i) t8[i] = 1.0;
    for (std::size_t i = 0; i < 4; ++i) p4[i] = 1.0;
    const double l = loss::dice_loss(Tensor::from({1, 1, 16}, p4), Tensor::from({1, 1, 16}, t8)).item();
    CHECK(std::abs(l - (1.0 - 2.0 * 4.0 / (8.0 + 4.0 + 1e-5))) < 1e-15);
    CHECK(std::abs(l - 1.0 / 3.0) < 1e-5);
  }

  TEST_CASE("dice loss pools channels and voxels, then averages the batch") {
    const auto p = oracle::random_values(2 * 3 * 8, 100, 0.0, 1.0);
    const auto t = oracle::random_values(2 * 3 * 8, 101, 0.0, 1.0);
    std::vector<double> tb(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) tb[i] = t[i] > 0.5 ? 1.0 : 0.0;
    const double got = loss::dice_loss(Tensor::from({2, 3, 8}, p), Tensor::from({2, 3, 8}, tb)).item();
    const std::vector<double> p0(p.begin(), p.begin() + 24), p1(p.begin() + 24, p.end());
    const std::vector<double> t0(tb.begin(), tb.begin() + 24), t1(tb.begin() + 24, tb.end());
    const double expect = (oracle::dice_loss(p0, t0, 1e-5) + oracle::dice_loss(p1, t1, 1e-5)) / 2.0;
    CHECK(std::abs(got - expect) < 1e-12);
    CHECK_THROWS_AS(loss::dice_loss(Tensor::zeros({1, 2, 3}), Tensor::zeros({1, 3, 2})), ShapeError);
  }

  TEST_CASE("per-class dice averages the single-channel ratios") {
    const auto p = oracle::random_values(2 * 3 * 8, 110, 0.0, 1.0);
    const auto t = oracle::random_values(2 * 3 * 8, 111, 0.0, 1.0);
    std::vector<double> tb(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) tb[i] = t[i] > 0.5 ? 1.0 : 0.0;
    const double got = loss::per_class_dice_loss(Tensor::from({2, 3, 8}, p), Tensor::from({2, 3, 8}, tb)).item();
    double expect = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto at = (n * 3 + c) * 8;
        expect += oracle::dice_loss({p.begin() + at, p.begin() + at + 8}, {tb.begin() + at, tb.begin() + at + 8}, 1e-5);
      }
    CHECK(std::abs(got - expect / 6.0) < 1e-12);

    const auto labels = nested_labels(6);
    const Tensor logits = Tensor::from({1, 3, 6, 6, 6}, oracle::random_values(3 * 216, 112, -2.0, 2.0));
    loss::LossWeights w;
    w.dice_per_class = true;
    const auto b = loss::total_loss(logits, Tensor{}, labels, w);
    CHECK(b.semantic.item() == loss::per_class_dice_loss(softmax_channels(logits), one_hot(labels, 3)).item());
  }

  TEST_CASE("balanced BCE: beta, saturation and the loop oracle") {
    std::vector<double> m(100, 0.0);
    for (std::size_t i = 0; i < 10; ++i) m[i * 10] = 1.0;
    edges::EdgeMap em;
    em.mask = Tensor::from({1, 1, 100, 1, 1}, m);
    em.edge_voxels = 10;
    CHECK(std::abs(em.beta() - 0.9) < 1e-15);
    CHECK(loss::balanced_bce(saturated(em.mask), em).item() < 1e-10);

    // Random 4^3 cases against the scalar loop, batch of two.
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto labels = random_labels(2, 4, 3, 200 + seed);
      const auto e = edges::edges_from_labels(labels, 3);
      const auto logits = oracle::random_values(e.mask.numel(), 300 + seed, -4.0, 4.0);
      const double got = loss::balanced_bce(Tensor::from(e.mask.shape(), logits), e).item();
      CHECK(std::abs(got - oracle::balanced_bce(logits, values(e.mask))) < 1e-12);
    }
    CHECK_THROWS_AS(loss::balanced_bce(Tensor::zeros({1, 1, 2, 2, 2}), em), ShapeError);
  }

  TEST_CASE("balanced BCE falls as correct logits grow") {
    const auto labels = nested_labels(6);
    const auto e = edges::edges_from_labels(labels, 3);
    double previous = INFINITY;
    for (double s : {0.5, 1.0, 2.0, 4.0, 8.0}) {
      std::vector<double> v(e.mask.numel());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = e.mask.at(i) != 0.0 ? s : -s;
      const double l = loss::balanced_bce(Tensor::from(e.mask.shape(), v), e).item();
      CHECK(l < previous);
      CHECK(l >= 0.0);
      previous = l;
    }
  }

  TEST_CASE("edge loss term weights") {
    const auto labels = nested_labels(6);
    const auto e = edges::edges_from_labels(labels, 3);
    const Tensor logits = Tensor::from(e.mask.shape(), oracle::random_values(e.mask.numel(), 400, -3.0, 3.0));
    loss::LossWeights w;
    w.lambda1 = 0.0;
    w.lambda2 = 0.0;
    CHECK(loss::edge_loss(logits, e, w).item() == 0.0);
    w.lambda1 = 1.0;
    CHECK(loss::edge_loss(logits, e, w).item() == loss::dice_loss(sigmoid(logits), e.mask).item());
    CHECK(loss::edge_loss(saturated(e.mask), e, loss::LossWeights{}).item() < 1e-4);
  }

  TEST_CASE("consistency of one-hot predictions is zero") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const auto labels = random_labels(2, 4, 2 + seed % 3, 500 + seed);
      const Tensor p = one_hot(labels, 2 + seed % 3);
      CHECK(std::abs(loss::consistency_loss(p, labels).item()) < 1e-10);
    }
    const auto flat = LabelVolume(1, 4, 4, 4, 1);
    CHECK(loss::consistency_loss(one_hot(flat, 3), flat).item() == 0.0);
  }

  TEST_CASE("consistency of a one-voxel-shifted plane equals the stencil L1 gap") {
    const std::size_t D = 6, H = 4, W = 4;
    LabelVolume truth(1, D, H, W), shifted(1, D, H, W);
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          truth.at(0, d, h, w) = d >= 3 ? 1 : 0;
          shifted.at(0, d, h, w) = d >= 4 ? 1 : 0;
        }
    const double got = loss::consistency_loss(one_hot(shifted, 2), truth).item();

    std::vector<double> ft(truth.values.begin(), truth.values.end()), fs(shifted.values.begin(), shifted.values.end());
    const auto bt = oracle::sobel_magnitude(ft, D, H, W), bs = oracle::sobel_magnitude(fs, D, H, W);
    const auto mask = oracle::edges(truth.values, 2, D, H, W);
    double sum = 0.0, count = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] == 0.0) continue;
      sum += std::abs(bs[i] - bt[i]);
      count += 1.0;
    }
    CHECK(got > 0.0);
    CHECK(std::abs(got - sum / count) < 1e-7);
  }

  TEST_CASE("total loss: perfect prediction, additivity and ablation gating") {
    const auto labels = nested_labels(6);
    const auto e = edges::edges_from_labels(labels, 3);
    const Tensor sem = saturated(one_hot(labels, 3));
    const auto perfect = loss::total_loss(sem, saturated(e.mask), labels, {});
    CHECK(perfect.total.item() < 1e-3);

    const Tensor rs = Tensor::from(sem.shape(), oracle::random_values(sem.numel(), 600, -2.0, 2.0));
    const Tensor re = Tensor::from(e.mask.shape(), oracle::random_values(e.mask.numel(), 601, -2.0, 2.0));
    const auto b = loss::total_loss(rs, re, labels, {});
    CHECK(b.total.item() == (b.semantic.item() + b.consistency.item()) + b.edge.item());
    CHECK(b.semantic.item() >= 0.0);
    CHECK(b.edge.item() >= 0.0);
    CHECK(b.consistency.item() >= 0.0);
    CHECK(b.semantic.item() == loss::dice_loss(softmax_channels(rs), one_hot(labels, 3)).item());
    CHECK(b.edge.item() == loss::edge_loss(re, e, {}).item());
    CHECK(b.consistency.item() == loss::consistency_loss(softmax_channels(rs), labels).item());

    const auto ablated = loss::total_loss(rs, Tensor{}, labels, {});
    CHECK(ablated.edge.item() == 0.0);
    CHECK(ablated.consistency.item() == 0.0);
    CHECK(ablated.total.item() == ablated.semantic.item());
  }

  TEST_CASE("zero edge weights without consistency leave the edge head untouched") {
    nn::ModelConfig cfg;
    cfg.resolutions = 2;
    cfg.base_channels = 2;
    cfg.groups = 2;
    cfg.seed = 3;
    nn::EgModel model(cfg);
    loss::LossWeights w;
    w.lambda1 = 0.0;
    w.lambda2 = 0.0;
    w.consistency = false;
    const auto labels = nested_labels(4);
    const auto out = model.forward(Tensor::from({1, 1, 4, 4, 4}, oracle::random_values(64, 700)));
    backward(loss::total_loss(out.semantic_logits, out.edge_logits, labels, w).total);
    for (double g : model.edge_head().weight.grad()) CHECK(g == 0.0);
    for (double g : model.edge_head().bias.grad()) CHECK(g == 0.0);
    bool fusion = false;
    for (const auto& p : model.parameters()) {
      if (p.name.rfind("edge.block", 0) == 0) {
        for (double g : p.value.grad()) fusion = fusion || g != 0.0;
      }
    }
    CHECK(fusion);
  }

  TEST_CASE("loss weights validation") {
    loss::LossWeights w;
    CHECK_NOTHROW(w.validate());
    w.lambda1 = -1.0;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
    w = {};
    w.tau = 0.0;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
    w = {};
    w.dice_eps = 0.0;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  }

  TEST_CASE("finite-difference suite of the module passes") {
    for (const auto& r : gradcheck::run_suite("losses")) {
      INFO(r.name);
      CHECK(r.error < r.tolerance);
    }
  }
}
