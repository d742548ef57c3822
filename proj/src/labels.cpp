#include "egcnn/labels.hpp"

#include <stdexcept>
#include <string>

namespace egcnn {

void check_label_range(const LabelVolume& labels, std::size_t classes) {
  if (labels.values.size() != labels.batch * labels.voxels_per_sample()) {
    throw ShapeError("labels: value count does not match extents");
  }
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    const auto v = labels.values[i];
    if (v < 0 || static_cast<std::size_t>(v) >= classes) {
      throw std::out_of_range("labels: value " + std::to_string(v) + " at index " + std::to_string(i) +
                              " outside [0," + std::to_string(classes) + ")");
    }
  }
}

Tensor one_hot(const LabelVolume& labels, std::size_t classes) {
  check_label_range(labels, classes);
  const std::size_t sp = labels.voxels_per_sample();
  std::vector<double> v(labels.batch * classes * sp, 0.0);
  for (std::size_t n = 0; n < labels.batch; ++n) {
    for (std::size_t i = 0; i < sp; ++i) {
      const auto c = static_cast<std::size_t>(labels.values[n * sp + i]);
      v[(n * classes + c) * sp + i] = 1.0;
    }
  }
  return Tensor::from({labels.batch, classes, labels.depth, labels.height, labels.width}, std::move(v));
}

Tensor label_field(const LabelVolume& labels) {
  std::vector<double> v(labels.values.begin(), labels.values.end());
  return Tensor::from({labels.batch, 1, labels.depth, labels.height, labels.width}, std::move(v));
}

LabelVolume argmax_channels(const Tensor& scores) {
  if (scores.rank() != 5) throw ShapeError("argmax_channels: expected [N,K,D,H,W], got " + to_string(scores.shape()));
  const auto& s = scores.shape();
  LabelVolume out(s[0], s[2], s[3], s[4]);
  const std::size_t k_n = s[1], sp = out.voxels_per_sample();
  auto v = scores.data();
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t i = 0; i < sp; ++i) {
      std::size_t best = 0;
      double best_v = v[n * k_n * sp + i];
      for (std::size_t c = 1; c < k_n; ++c) {
        const double x = v[(n * k_n + c) * sp + i];
        if (x > best_v) {
          best_v = x;
          best = c;
        }
      }
      out.values[n * sp + i] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

}  // namespace egcnn
