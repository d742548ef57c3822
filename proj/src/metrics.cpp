#include "egcnn/metrics.hpp"

#include "json.hpp"

namespace egcnn::metrics {

namespace {

void require_congruent(const LabelVolume& a, const LabelVolume& b) {
  if (a.batch != b.batch || a.depth != b.depth || a.height != b.height || a.width != b.width ||
      a.values.size() != b.values.size()) {
    throw ShapeError("dice: label volumes are not congruent");
  }
}

double dice_from_counts(std::size_t inter, std::size_t a, std::size_t b) {
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

template <class Pred>
double dice_where(const LabelVolume& pred, const LabelVolume& truth, Pred member) {
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool in_a = member(pred.values[i]);
    const bool in_b = member(truth.values[i]);
    a += in_a;
    b += in_b;
    inter += in_a && in_b;
  }
  return dice_from_counts(inter, a, b);
}

LabelVolume sample(const LabelVolume& v, std::size_t n) {
  LabelVolume out(1, v.depth, v.height, v.width);
  const std::size_t sp = v.voxels_per_sample();
  std::copy(v.values.begin() + static_cast<std::ptrdiff_t>(n * sp),
            v.values.begin() + static_cast<std::ptrdiff_t>((n + 1) * sp), out.values.begin());
  return out;
}

}  // namespace

double dice_metric(const LabelVolume& pred, const LabelVolume& truth, std::int32_t c) {
  require_congruent(pred, truth);
  return dice_where(pred, truth, [c](std::int32_t v) { return v == c; });
}

double mask_dice(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("mask_dice: size mismatch");
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_a = pred[i] != 0.0, in_b = truth[i] != 0.0;
    a += in_a;
    b += in_b;
    inter += in_a && in_b;
  }
  return dice_from_counts(inter, a, b);
}

std::optional<CompositeDice> composite_dice(const LabelVolume& pred, const LabelVolume& truth,
                                            std::size_t classes) {
  require_congruent(pred, truth);
  if (classes < 3) return std::nullopt;
  CompositeDice out;
  out.organ = dice_where(pred, truth, [](std::int32_t v) { return v >= 1; });
  out.lesion = dice_where(pred, truth, [](std::int32_t v) { return v >= 2; });
  out.composite = 0.5 * (out.organ + out.lesion);
  return out;
}

std::string MetricsRecord::to_json_line() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["split"] = split;
  j["volumes"] = volumes;
  if (learning_rate) j["lr"] = *learning_rate;
  if (losses) {
    j["loss"] = {{"semantic", losses->semantic},
                 {"edge", losses->edge},
                 {"consistency", losses->consistency},
                 {"total", losses->total}};
  }
  j["class_dice"] = class_dice;
  j["mean_foreground_dice"] = mean_foreground;
  if (composite) {
    j["organ_dice"] = composite->organ;
    j["lesion_dice"] = composite->lesion;
    j["composite_dice"] = composite->composite;
  }
  j["edge_dice"] = edge_dice ? nlohmann::ordered_json(*edge_dice) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

void MetricsAccumulator::add_volumes(const LabelVolume& pred, const LabelVolume& truth) {
  require_congruent(pred, truth);
  for (std::size_t n = 0; n < pred.batch; ++n) {
    const LabelVolume p = sample(pred, n), t = sample(truth, n);
    for (std::size_t c = 0; c < classes_; ++c) class_sum_[c] += dice_metric(p, t, static_cast<std::int32_t>(c));
    if (auto cd = composite_dice(p, t, classes_)) {
      organ_sum_ += cd->organ;
      lesion_sum_ += cd->lesion;
    }
    ++volumes_;
  }
}

void MetricsAccumulator::add_edges(const std::vector<double>& pred_mask, const std::vector<double>& true_mask,
                                   std::size_t batch) {
  if (batch == 0 || pred_mask.size() != true_mask.size() || pred_mask.size() % batch != 0) {
    throw ShapeError("metrics: edge masks do not split into the batch");
  }
  const std::size_t sp = pred_mask.size() / batch;
  for (std::size_t n = 0; n < batch; ++n) {
    std::vector<double> p(pred_mask.begin() + static_cast<std::ptrdiff_t>(n * sp),
                          pred_mask.begin() + static_cast<std::ptrdiff_t>((n + 1) * sp));
    std::vector<double> t(true_mask.begin() + static_cast<std::ptrdiff_t>(n * sp),
                          true_mask.begin() + static_cast<std::ptrdiff_t>((n + 1) * sp));
    edge_sum_ += mask_dice(p, t);
    ++edge_volumes_;
  }
}

void MetricsAccumulator::add_losses(const LossTerms& terms, std::size_t batch) {
  const double w = static_cast<double>(batch);
  loss_sum_.semantic += w * terms.semantic;
  loss_sum_.edge += w * terms.edge;
  loss_sum_.consistency += w * terms.consistency;
  loss_sum_.total += w * terms.total;
  loss_volumes_ += batch;
}

MetricsRecord MetricsAccumulator::finish(long epoch, const std::string& split) const {
  MetricsRecord r;
  r.epoch = epoch;
  r.split = split;
  r.volumes = volumes_;
  if (volumes_ == 0) return r;
  const double inv = 1.0 / static_cast<double>(volumes_);
  r.class_dice.resize(classes_);
  double fg = 0.0;
  for (std::size_t c = 0; c < classes_; ++c) {
    r.class_dice[c] = class_sum_[c] * inv;
    if (c > 0) fg += r.class_dice[c];
  }
  r.mean_foreground = classes_ > 1 ? fg / static_cast<double>(classes_ - 1) : r.class_dice[0];
  if (classes_ >= 3) {
    CompositeDice cd;
    cd.organ = organ_sum_ * inv;
    cd.lesion = lesion_sum_ * inv;
    cd.composite = 0.5 * (cd.organ + cd.lesion);
    r.composite = cd;
  }
  if (edge_volumes_ > 0) r.edge_dice = edge_sum_ / static_cast<double>(edge_volumes_);
  if (loss_volumes_ > 0) {
    const double li = 1.0 / static_cast<double>(loss_volumes_);
    r.losses = LossTerms{loss_sum_.semantic * li, loss_sum_.edge * li, loss_sum_.consistency * li,
                         loss_sum_.total * li};
  }
  return r;
}

}  // namespace egcnn::metrics
