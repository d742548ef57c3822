#pragma once

#include <cstdint>

#include "egcnn/labels.hpp"
#include "egcnn/tensor.hpp"

namespace egcnn::edges {

// A voxel is an edge when any foreground class has Sobel magnitude above this.
inline constexpr double kEdgeThreshold = 1e-6;
// Default eps inside sqrt(gx^2 + gy^2 + gz^2 + eps); sqrt(eps) stays well
// below kEdgeThreshold.
inline constexpr double kMagnitudeEps = 1e-16;

/// Fixed [3, 1, 3, 3, 3] kernel bank. Channel a differentiates along spatial
/// axis a (0 = depth, 1 = height, 2 = width) with [-1, 0, 1] and smooths the
/// other two axes with [1, 2, 1]. Raw integer weights: a unit ramp gives 32.
Tensor sobel3d_kernels();

// [N,1,D,H,W] -> [N,3,D,H,W], zero padding at the borders.
Tensor sobel3d(const Tensor& volume);

// [N,3,D,H,W] -> [N,1,D,H,W] = sqrt(sum of squares + eps).
Tensor gradient_magnitude(const Tensor& responses, double eps = kMagnitudeEps);

/// Binary boundary map [N,1,D,H,W] (1 = edge) built from per-class Sobel
/// magnitudes of the foreground classes 1..K-1. Background is the implicit
/// complement and the volume exterior counts as background.
struct EdgeMap {
  Tensor mask;
  std::size_t edge_voxels = 0;

  std::size_t total_voxels() const { return mask.numel(); }
  // Fraction of non-edge voxels.
  double beta() const;
};

EdgeMap edges_from_labels(const LabelVolume& labels, std::size_t classes);

enum class BoundaryForward {
  Hard,     // one-hot argmax forward, tempered-softmax backward (straight-through)
  Relaxed,  // tempered-softmax forward and backward
};

struct SoftBoundaryOptions {
  double tau = 1.0;
  bool stochastic = false;  // add seeded Gumbel(0,1) noise to log-probabilities
  std::uint64_t seed = 0;
  BoundaryForward forward = BoundaryForward::Hard;
};

/// Class-index field [N,1,D,H,W] from probabilities [N,K,D,H,W]. The forward
/// value is the (optionally Gumbel-perturbed) argmax class index; the
/// backward pass uses the Jacobian of sum_t t * softmax_t((log p + g) / tau).
Tensor argmax_field(const Tensor& probabilities, const SoftBoundaryOptions& options = {});

/// Boundary strength of the predicted segmentation:
/// gradient_magnitude(sobel3d(argmax_field(probabilities))).
Tensor soft_boundary(const Tensor& probabilities, const SoftBoundaryOptions& options = {});

}  // namespace egcnn::edges
