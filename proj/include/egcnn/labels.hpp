#pragma once

#include <cstdint>
#include <vector>

#include "egcnn/tensor.hpp"

namespace egcnn {

/// Integer class map [N, D, H, W], row-major with W fastest.
struct LabelVolume {
  std::size_t batch = 0, depth = 0, height = 0, width = 0;
  std::vector<std::int32_t> values;

  LabelVolume() = default;
  LabelVolume(std::size_t n, std::size_t d, std::size_t h, std::size_t w, std::int32_t fill = 0)
      : batch(n), depth(d), height(h), width(w), values(n * d * h * w, fill) {}

  std::size_t voxels_per_sample() const noexcept { return depth * height * width; }
  std::size_t size() const noexcept { return values.size(); }
  std::int32_t& at(std::size_t n, std::size_t d, std::size_t h, std::size_t w) {
    return values[((n * depth + d) * height + h) * width + w];
  }
  std::int32_t at(std::size_t n, std::size_t d, std::size_t h, std::size_t w) const {
    return values[((n * depth + d) * height + h) * width + w];
  }
  bool operator==(const LabelVolume&) const = default;
};

// Throws std::out_of_range when a label falls outside [0, classes).
void check_label_range(const LabelVolume& labels, std::size_t classes);

// [N, classes, D, H, W] indicator tensor (no gradient).
Tensor one_hot(const LabelVolume& labels, std::size_t classes);

// [N, 1, D, H, W] tensor whose value is the class index.
Tensor label_field(const LabelVolume& labels);

// Channel argmax of [N, K, D, H, W]; ties resolve to the lowest index.
LabelVolume argmax_channels(const Tensor& scores);

}  // namespace egcnn
