#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "egcnn/tensor.hpp"

namespace egcnn::nn {

struct Parameter {
  std::string name;
  Tensor value;
};

using Rng = std::mt19937_64;

class Conv3d {
 public:
  Conv3d() = default;
  // Fan-in scaled uniform weights, zero bias.
  Conv3d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t padding, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(std::vector<Parameter>& out) const;

  std::string name;
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(std::string name, std::size_t channels, std::size_t groups, double eps = 1e-5);

  Tensor forward(const Tensor& x) const;
  void collect(std::vector<Parameter>& out) const;

  std::string name;
  Tensor gamma;
  Tensor beta;
  std::size_t groups = 1;
  double eps = 1e-5;
};

/// x + conv2(relu(gn2(conv1(relu(gn1(x)))))) with 3x3x3 convolutions.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, std::size_t channels, std::size_t max_groups, Rng& rng);

  Tensor forward(const Tensor& x) const;
  Tensor body(const Tensor& x) const;
  void collect(std::vector<Parameter>& out) const;
  std::size_t channels() const noexcept { return channels_; }

  GroupNorm norm1, norm2;
  Conv3d conv1, conv2;

 private:
  std::size_t channels_ = 0;
};

/// Gate between the edge stream and one main-stream resolution:
///   alpha = sigmoid(relu(proj_edge(e_in) + proj_main(m)))   (one channel)
///   out   = e_in * alpha + e_in                            (alpha broadcast over channels)
class EdgeGatedLayer {
 public:
  EdgeGatedLayer() = default;
  EdgeGatedLayer(const std::string& name, std::size_t edge_channels, std::size_t main_channels,
                 std::size_t resolution, Rng& rng);

  Tensor attention(const Tensor& e_in, const Tensor& m) const;
  Tensor forward(const Tensor& e_in, const Tensor& m) const;
  void collect(std::vector<Parameter>& out) const;

  Conv3d proj_edge;
  Conv3d proj_main;
  std::size_t resolution = 0;
};

struct ModelConfig {
  int version = 1;
  std::size_t resolutions = 3;    // R
  std::size_t base_channels = 8;  // B; level r has B * 2^r channels
  std::size_t classes = 3;        // K
  std::size_t in_channels = 1;
  std::size_t groups = 8;  // group_norm uses min(groups, C)
  bool edge_stream = true;
  std::uint64_t seed = 0;

  std::size_t level_channels(std::size_t r) const noexcept { return base_channels << r; }
  void validate() const;
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

/// Encoder-decoder with R resolutions. Taps are the R encoder outputs (fine to
/// coarse) followed by the decoder's first feature map (coarsest resolution,
/// the map the decoder upsamples first).
class Backbone {
 public:
  struct Output {
    Tensor features;
    std::vector<Tensor> taps;
  };

  Backbone() = default;
  Backbone(const ModelConfig& config, Rng& rng);

  Output forward(const Tensor& x) const;
  void collect(std::vector<Parameter>& out) const;

 private:
  std::size_t resolutions_ = 0;
  Conv3d stem_;
  std::vector<Conv3d> down_;  // down_[r-1] feeds level r
  std::vector<ResidualBlock> encoder_;
  ResidualBlock decoder_top_;
  std::vector<Conv3d> decoder_fuse_;  // indexed by level
  std::vector<ResidualBlock> decoder_;
};

class EgModel {
 public:
  struct EdgeOutput {
    Tensor features;
    Tensor logits;
  };
  struct Output {
    Tensor semantic_logits;
    Tensor edge_logits;    // undefined without the edge stream
    Tensor edge_features;  // undefined without the edge stream
  };

  explicit EgModel(const ModelConfig& config);

  Output forward(const Tensor& x) const;
  EdgeOutput edge_stream_forward(const std::vector<Tensor>& taps) const;

  const ModelConfig& config() const noexcept { return config_; }
  const Backbone& backbone() const noexcept { return backbone_; }
  std::size_t gate_count() const noexcept { return gates_.size(); }
  const EdgeGatedLayer& gate(std::size_t r) const { return gates_.at(r); }
  const Conv3d& edge_head() const noexcept { return edge_head_; }

  // Stable order: backbone, edge stream, heads.
  std::vector<Parameter> parameters() const;
  std::size_t parameter_count() const;

 private:
  ModelConfig config_;
  Backbone backbone_;
  Conv3d edge_entry_;
  std::vector<ResidualBlock> edge_blocks_;  // indexed by resolution
  std::vector<EdgeGatedLayer> gates_;       // indexed by resolution
  Conv3d edge_head_;
  Conv3d head_;
};

}  // namespace egcnn::nn
