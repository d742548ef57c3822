#pragma once

#include <cstdint>

#include "egcnn/edges.hpp"
#include "egcnn/labels.hpp"
#include "egcnn/tensor.hpp"

namespace egcnn::loss {

struct LossWeights {
  double lambda1 = 1.0;  // edge Dice weight
  double lambda2 = 0.5;  // edge balanced-BCE weight
  double dice_eps = 1e-5;
  double tau = 1.0;
  bool consistency = true;              // false drops the consistency term
  bool consistency_full_volume = false;  // L1 over every voxel instead of edge voxels
  bool dice_per_class = false;           // semantic Dice per channel, then averaged

  void validate() const;
};

/// Scalar loss terms. total = semantic + consistency + edge, summed in that order.
struct LossBundle {
  Tensor semantic;
  Tensor edge;
  Tensor consistency;
  Tensor total;
};

// 1 - 2*sum(t*p) / (sum t^2 + sum p^2 + eps) per sample over all channels and
// voxels, averaged over the batch.
Tensor dice_loss(const Tensor& pred, const Tensor& target, double eps = 1e-5);

// dice_loss evaluated on each channel separately, averaged over channels.
Tensor per_class_dice_loss(const Tensor& pred, const Tensor& target, double eps = 1e-5);

// beta * sum_{edge} -log p + (1 - beta) * sum_{non-edge} -log(1 - p), with
// p = sigmoid(logits) and beta the batch fraction of non-edge voxels,
// divided by the voxel count.
Tensor balanced_bce(const Tensor& edge_logits, const edges::EdgeMap& edge_true);

// lambda1 * dice(sigmoid(logits), edges) + lambda2 * balanced_bce(logits, edges).
Tensor edge_loss(const Tensor& edge_logits, const edges::EdgeMap& edge_true, const LossWeights& weights);

struct ConsistencyOptions {
  double tau = 1.0;
  bool stochastic = false;
  std::uint64_t seed = 0;
  bool full_volume = false;
  edges::BoundaryForward forward = edges::BoundaryForward::Hard;
};

// Mean |soft_boundary(probs) - |grad(label field)|| over ground-truth edge
// voxels (or all voxels with full_volume). Zero when there are no edges.
Tensor consistency_loss(const Tensor& semantic_probs, const LabelVolume& labels,
                        const ConsistencyOptions& options = {});

struct TotalLossOptions {
  bool stochastic = false;
  std::uint64_t seed = 0;
  edges::BoundaryForward boundary = edges::BoundaryForward::Hard;
};

// semantic_logits [N,K,D,H,W]; edge_logits [N,1,D,H,W] or undefined
// (backbone-only model: edge and consistency terms are constant zero).
LossBundle total_loss(const Tensor& semantic_logits, const Tensor& edge_logits, const LabelVolume& labels,
                      const LossWeights& weights, const TotalLossOptions& options = {});

}  // namespace egcnn::loss
