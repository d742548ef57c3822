#include <cmath>
#include <vector>

#include "doctest.h"
#include "egcnn/edges.hpp"
#include "egcnn/gradcheck.hpp"
#include "egcnn/labels.hpp"
#include "egcnn/ops.hpp"
#include "support/oracles.hpp"

using namespace egcnn;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

LabelVolume random_labels(std::size_t n, std::size_t d, std::size_t h, std::size_t w, std::size_t classes,
                          std::uint64_t seed) {
  LabelVolume l(n, d, h, w);
  std::mt19937_64 rng(seed);
  for (auto& v : l.values) v = static_cast<std::int32_t>(rng() % classes);
  return l;
}

std::vector<double> field_of(const LabelVolume& l) {
  return {l.values.begin(), l.values.end()};
}

}  // namespace

TEST_SUITE("edge-ops") {
  TEST_CASE("Sobel kernels sum to zero and map onto each other under axis swaps") {
    const Tensor k = edges::sobel3d_kernels();
    REQUIRE(k.shape() == Shape{3, 1, 3, 3, 3});
    for (std::size_t a = 0; a < 3; ++a) {
      double s = 0.0;
      for (std::size_t i = 0; i < 27; ++i) s += k.at(a * 27 + i);
      CHECK(s == 0.0);
    }
    // Swapping depth and width maps kernel 0 onto kernel 2.
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t w = 0; w < 3; ++w) {
          CHECK(k.at(0 * 27 + (d * 3 + h) * 3 + w) == k.at(2 * 27 + (w * 3 + h) * 3 + d));
          CHECK(k.at(0 * 27 + (d * 3 + h) * 3 + w) == k.at(1 * 27 + (h * 3 + d) * 3 + w));
        }
  }

  TEST_CASE("sobel3d: constant, depth ramp and reversed ramp") {
    const std::size_t D = 5, H = 4, W = 6, sp = D * H * W;
    const Tensor c = edges::sobel3d(Tensor::full({1, 1, D, H, W}, 3.5));
    for (std::size_t d = 1; d + 1 < D; ++d)
      for (std::size_t h = 1; h + 1 < H; ++h)
        for (std::size_t w = 1; w + 1 < W; ++w)
          for (std::size_t a = 0; a < 3; ++a) CHECK(c.at(a * sp + (d * H + h) * W + w) == 0.0);

    std::vector<double> ramp(sp), rev(sp);
    for (std::size_t i = 0; i < sp; ++i) {
      ramp[i] = static_cast<double>(i / (H * W));
      rev[i] = -ramp[i];
    }
    const Tensor g = edges::sobel3d(Tensor::from({1, 1, D, H, W}, ramp));
    const Tensor gr = edges::sobel3d(Tensor::from({1, 1, D, H, W}, rev));
    for (std::size_t d = 1; d + 1 < D; ++d)
      for (std::size_t h = 1; h + 1 < H; ++h)
        for (std::size_t w = 1; w + 1 < W; ++w) {
          const std::size_t v = (d * H + h) * W + w;
          CHECK(g.at(v) == 32.0);
          CHECK(g.at(sp + v) == 0.0);
          CHECK(g.at(2 * sp + v) == 0.0);
        }
    for (std::size_t i = 0; i < 3 * sp; ++i) CHECK(gr.at(i) == -g.at(i));
    CHECK_THROWS_AS(edges::sobel3d(Tensor::zeros({1, 2, 3, 3, 3})), ShapeError);
  }

  TEST_CASE("sobel3d plus magnitude match the stencil oracle") {
    const auto f = oracle::random_values(4 * 5 * 3, 30);
    auto expect = oracle::sobel_magnitude(f, 4, 5, 3);
    for (double& v : expect) v = std::sqrt(v * v + edges::kMagnitudeEps);
    const Tensor m = edges::gradient_magnitude(edges::sobel3d(Tensor::from({1, 1, 4, 5, 3}, f)));
    CHECK(oracle::max_abs_diff(values(m), expect) < 1e-12);
  }

  TEST_CASE("gradient magnitude: zero and single-axis responses") {
    const Tensor z = edges::gradient_magnitude(Tensor::zeros({1, 3, 2, 2, 2}));
    for (double v : z.data()) CHECK(v == std::sqrt(edges::kMagnitudeEps));
    const Tensor one = Tensor::from({1, 3, 1, 1, 1}, {0.0, -2.5, 0.0});
    CHECK(std::abs(edges::gradient_magnitude(one).item() - 2.5) < std::sqrt(edges::kMagnitudeEps));

    Tensor r = Tensor::from({1, 3, 2, 2, 1}, oracle::random_values(12, 31, 0.5, 2.0), true);
    gradcheck::Options o;
    o.step = 1e-5;
    CHECK(gradcheck::max_relative_error([&] { return edges::gradient_magnitude(r); }, {r}, o) < 1e-5);
  }

  TEST_CASE("edges_from_labels: constant volumes are edge-free") {
    CHECK(edges::edges_from_labels(LabelVolume(1, 4, 4, 4, 0), 3).edge_voxels == 0);
    CHECK(edges::edges_from_labels(LabelVolume(1, 4, 4, 4, 0), 1).edge_voxels == 0);
    CHECK_THROWS_AS(edges::edges_from_labels(LabelVolume(1, 2, 2, 2, 3), 3), std::out_of_range);
  }

  TEST_CASE("edges_from_labels: planar split gives a two-voxel slab plus border faces") {
    const std::size_t D = 6, H = 5, W = 4;
    LabelVolume l(1, D, H, W);
    for (std::size_t d = D / 2; d < D; ++d)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) l.at(0, d, h, w) = 1;
    const auto e = edges::edges_from_labels(l, 2);
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const bool slab = d == D / 2 - 1 || d == D / 2;
          const bool face = d >= D / 2 && (d == D - 1 || h == 0 || h == H - 1 || w == 0 || w == W - 1);
          CHECK(e.mask.at((d * H + h) * W + w) == ((slab || face) ? 1.0 : 0.0));
        }
  }

  TEST_CASE("edges_from_labels: a single foreground voxel marks its 26 neighbours") {
    LabelVolume l(1, 5, 5, 5);
    l.at(0, 2, 2, 2) = 1;
    const auto e = edges::edges_from_labels(l, 2);
    CHECK(e.edge_voxels == 26);
    CHECK(values(e.mask) == oracle::edges(l.values, 2, 5, 5, 5));
    CHECK(e.mask.at((2 * 5 + 2) * 5 + 2) == 0.0);
  }

  TEST_CASE("edges_from_labels matches the brute-force oracle on small shapes") {
    std::uint64_t seed = 60;
    std::size_t cases = 0;
    for (std::size_t d = 1; d <= 4; ++d)
      for (std::size_t h = 1; h <= 4; ++h)
        for (std::size_t w = 1; w <= 4; ++w)
          for (std::size_t k = 2; k <= 3; ++k) {
            const auto l = random_labels(1, d, h, w, k, ++seed);
            CHECK(values(edges::edges_from_labels(l, k).mask) == oracle::edges(l.values, k, d, h, w));
            ++cases;
          }
    CHECK(cases == 128);
  }

  TEST_CASE("edges_from_labels is invariant under foreground relabelling") {
    const auto l = random_labels(2, 4, 3, 4, 4, 70);
    LabelVolume p = l;
    for (auto& v : p.values) v = v == 0 ? 0 : 1 + (v % 3);  // 1->2, 2->3, 3->1
    CHECK(values(edges::edges_from_labels(l, 4).mask) == values(edges::edges_from_labels(p, 4).mask));
    const auto e = edges::edges_from_labels(l, 4);
    CHECK(e.beta() == doctest::Approx(1.0 - static_cast<double>(e.edge_voxels) / e.total_voxels()));
  }

  TEST_CASE("soft boundary of one-hot probabilities equals the label-field magnitude") {
    const auto l = random_labels(1, 4, 4, 3, 3, 80);
    const Tensor b = edges::soft_boundary(one_hot(l, 3));
    const Tensor ref = edges::gradient_magnitude(edges::sobel3d(label_field(l)));
    CHECK(values(b) == values(ref));
  }

  TEST_CASE("soft boundary of a spatially constant distribution vanishes inside") {
    const std::size_t D = 4, sp = D * D * D;
    std::vector<double> p(3 * sp);
    for (std::size_t i = 0; i < sp; ++i) {
      p[i] = 0.2;
      p[sp + i] = 0.5;
      p[2 * sp + i] = 0.3;
    }
    const Tensor b = edges::soft_boundary(Tensor::from({1, 3, D, D, D}, p));
    for (std::size_t d = 1; d + 1 < D; ++d)
      for (std::size_t h = 1; h + 1 < D; ++h)
        for (std::size_t w = 1; w + 1 < D; ++w) CHECK(b.at((d * D + h) * D + w) < 1e-7);
  }

  TEST_CASE("argmax surrogate Jacobian at small temperature") {
    // One voxel, K = 2. The surrogate field is y_1 = softmax(log p / tau)_1.
    const double tau = 0.25;
    const std::vector<double> p0{0.35, 0.65};
    Tensor p = Tensor::from({1, 2, 1, 1, 1}, p0, true);
    edges::SoftBoundaryOptions o;
    o.tau = tau;
    const Tensor f = edges::argmax_field(p, o);
    CHECK(f.item() == 1.0);
    backward(sum(f));
    const auto g = p.grad();
    auto y1 = [&](double a, double b) {
      const double ea = std::pow(a, 1.0 / tau), eb = std::pow(b, 1.0 / tau);
      return eb / (ea + eb);
    };
    const double h = 1e-7;
    CHECK(std::abs(g[0] - (y1(p0[0] + h, p0[1]) - y1(p0[0] - h, p0[1])) / (2 * h)) < 1e-6);
    CHECK(std::abs(g[1] - (y1(p0[0], p0[1] + h) - y1(p0[0], p0[1] - h)) / (2 * h)) < 1e-6);
  }

  TEST_CASE("soft boundary determinism and seeded noise") {
    const Tensor logits = Tensor::from({1, 3, 4, 4, 4}, oracle::random_values(192, 90, -2.0, 2.0));
    const Tensor p = softmax_channels(logits);
    CHECK(values(edges::soft_boundary(p)) == values(edges::soft_boundary(p)));
    edges::SoftBoundaryOptions a;
    a.stochastic = true;
    a.seed = 11;
    edges::SoftBoundaryOptions b = a;
    b.seed = 12;
    CHECK(values(edges::soft_boundary(p, a)) == values(edges::soft_boundary(p, a)));
    CHECK(values(edges::soft_boundary(p, a)) != values(edges::soft_boundary(p, b)));
  }

  TEST_CASE("soft boundary rejects unnormalized input") {
    CHECK_THROWS_AS(edges::soft_boundary(Tensor::full({1, 2, 2, 2, 2}, 0.6)), std::invalid_argument);
  }

  TEST_CASE("finite-difference suite of the module passes") {
    for (const auto& r : gradcheck::run_suite("edge-ops")) {
      INFO(r.name);
      CHECK(r.error < r.tolerance);
    }
  }
}
