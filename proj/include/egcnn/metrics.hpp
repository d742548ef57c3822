#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "egcnn/labels.hpp"

namespace egcnn::metrics {

// 2|A∩B| / (|A| + |B|) for A = {pred == c}, B = {truth == c}; 1 when both
// are empty. Throws ShapeError on incongruent volumes.
double dice_metric(const LabelVolume& pred, const LabelVolume& truth, std::int32_t c);

// Same for binary masks (non-zero = member).
double mask_dice(const std::vector<double>& pred, const std::vector<double>& truth);

/// Organ Dice treats every label >= 1 as foreground, lesion Dice only labels
/// >= 2; composite is their mean.
struct CompositeDice {
  double organ = 0.0;
  double lesion = 0.0;
  double composite = 0.0;
};
// std::nullopt when classes < 3.
std::optional<CompositeDice> composite_dice(const LabelVolume& pred, const LabelVolume& truth,
                                            std::size_t classes);

struct LossTerms {
  double semantic = 0.0;
  double edge = 0.0;
  double consistency = 0.0;
  double total = 0.0;
};

struct MetricsRecord {
  long epoch = -1;  // -1 for standalone evaluation
  std::string split = "train";
  std::vector<double> class_dice;  // per class, background included
  double mean_foreground = 0.0;
  std::optional<CompositeDice> composite;
  std::optional<double> edge_dice;  // absent without an edge head
  std::optional<LossTerms> losses;
  std::optional<double> learning_rate;
  std::size_t volumes = 0;

  // One JSON object on a single line.
  std::string to_json_line() const;
};

/// Per-volume metrics averaged over a split.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::size_t classes) : classes_(classes), class_sum_(classes, 0.0) {}

  // pred/truth may hold several volumes (batch > 1); each counts once.
  void add_volumes(const LabelVolume& pred, const LabelVolume& truth);
  // Edge masks [N*D*H*W] aligned with the last add_volumes batch.
  void add_edges(const std::vector<double>& pred_mask, const std::vector<double>& true_mask, std::size_t batch);
  void add_losses(const LossTerms& terms, std::size_t batch);

  MetricsRecord finish(long epoch, const std::string& split) const;

 private:
  std::size_t classes_;
  std::size_t volumes_ = 0;
  std::vector<double> class_sum_;
  double organ_sum_ = 0.0, lesion_sum_ = 0.0;
  double edge_sum_ = 0.0;
  std::size_t edge_volumes_ = 0;
  LossTerms loss_sum_;
  std::size_t loss_volumes_ = 0;
};

}  // namespace egcnn::metrics
