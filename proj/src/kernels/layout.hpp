#pragma once

// Zero-padded, width-phase-split copy of one sample. For stride s the padded
// width axis is split into s phases so that the taps read by consecutive
// output columns are contiguous: padded column ow*s + e lives at
// phase (e % s), offset ow + e / s.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "egcnn/kernels.hpp"

namespace egcnn::kernels::detail {

struct PackedLayout {
  std::size_t channels = 0;
  std::size_t depth = 0, height = 0, width = 0;  // unpadded source extents
  std::size_t pad_d = 0, pad_h = 0, pad_w = 0;
  std::size_t stride = 1;
  std::size_t dp = 0, hp = 0, wq = 0;  // padded depth/height, per-phase width

  PackedLayout(std::size_t c, std::size_t d, std::size_t h, std::size_t w, std::size_t pd,
               std::size_t ph, std::size_t pw, std::size_t s)
      : channels(c), depth(d), height(h), width(w), pad_d(pd), pad_h(ph), pad_w(pw), stride(s) {
    dp = d + 2 * pd;
    hp = h + 2 * ph;
    wq = (w + 2 * pw + s - 1) / s;
  }

  std::size_t row_size() const noexcept { return stride * wq; }
  std::size_t size() const noexcept { return channels * dp * hp * row_size(); }

  // Start of padded row (c, d, h), phase 0.
  std::size_t row(std::size_t c, std::size_t d, std::size_t h) const noexcept {
    return ((c * dp + d) * hp + h) * row_size();
  }
  // Offset of kernel tap e (along width) relative to the row start.
  std::size_t tap(std::size_t e) const noexcept { return (e % stride) * wq + e / stride; }

  void pack(const double* src, std::vector<double>& dst) const {
    dst.assign(size(), 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t d = 0; d < depth; ++d) {
        for (std::size_t h = 0; h < height; ++h) {
          const double* s = src + ((c * depth + d) * height + h) * width;
          double* r = dst.data() + row(c, d + pad_d, h + pad_h);
          for (std::size_t w = 0; w < width; ++w) {
            std::size_t pw = w + pad_w;
            r[(pw % stride) * wq + pw / stride] = s[w];
          }
        }
      }
    }
  }

  void unpack(const std::vector<double>& src, double* dst) const {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t d = 0; d < depth; ++d) {
        for (std::size_t h = 0; h < height; ++h) {
          double* o = dst + ((c * depth + d) * height + h) * width;
          const double* r = src.data() + row(c, d + pad_d, h + pad_h);
          for (std::size_t w = 0; w < width; ++w) {
            std::size_t pw = w + pad_w;
            o[w] = r[(pw % stride) * wq + pw / stride];
          }
        }
      }
    }
  }
};

inline PackedLayout input_layout(const ConvGeometry& g) {
  return PackedLayout(g.in_channels, g.depth, g.height, g.width, g.pad_d, g.pad_h, g.pad_w, g.stride);
}

inline std::vector<std::size_t> tap_offsets(const PackedLayout& layout, std::size_t kw) {
  std::vector<std::size_t> taps(kw);
  for (std::size_t e = 0; e < kw; ++e) taps[e] = layout.tap(e);
  return taps;
}

}  // namespace egcnn::kernels::detail
