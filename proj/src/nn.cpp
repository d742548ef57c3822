#include "egcnn/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "egcnn/ops.hpp"
#include "json.hpp"

namespace egcnn::nn {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

bool same_spatial(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 5 || sb.size() != 5) return false;
  return sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3] && sa[4] == sb[4];
}

}  // namespace

// ---- layers ----------------------------------------------------------------

Conv3d::Conv3d(std::string name_, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               std::size_t stride_, std::size_t padding_, Rng& rng)
    : name(std::move(name_)), stride(stride_), padding(padding_) {
  const double fan_in = static_cast<double>(in_channels * kernel * kernel * kernel);
  weight = uniform_tensor({out_channels, in_channels, kernel, kernel, kernel}, 1.0 / std::sqrt(fan_in), rng);
  bias = Tensor::zeros({out_channels}, true);
}

Tensor Conv3d::forward(const Tensor& x) const { return conv3d(x, weight, bias, stride, padding); }

void Conv3d::collect(std::vector<Parameter>& out) const {
  out.push_back({name + ".weight", weight});
  out.push_back({name + ".bias", bias});
}

GroupNorm::GroupNorm(std::string name_, std::size_t channels, std::size_t groups_, double eps_)
    : name(std::move(name_)), groups(groups_), eps(eps_) {
  gamma = Tensor::full({channels}, 1.0, true);
  beta = Tensor::zeros({channels}, true);
}

Tensor GroupNorm::forward(const Tensor& x) const { return group_norm(x, groups, gamma, beta, eps); }

void GroupNorm::collect(std::vector<Parameter>& out) const {
  out.push_back({name + ".gamma", gamma});
  out.push_back({name + ".beta", beta});
}

ResidualBlock::ResidualBlock(const std::string& name, std::size_t channels, std::size_t max_groups, Rng& rng)
    : channels_(channels) {
  const std::size_t groups = std::min(max_groups, channels);
  norm1 = GroupNorm(name + ".norm1", channels, groups);
  conv1 = Conv3d(name + ".conv1", channels, channels, 3, 1, 1, rng);
  norm2 = GroupNorm(name + ".norm2", channels, groups);
  conv2 = Conv3d(name + ".conv2", channels, channels, 3, 1, 1, rng);
}

Tensor ResidualBlock::body(const Tensor& x) const {
  Tensor h = conv1.forward(relu(norm1.forward(x)));
  return conv2.forward(relu(norm2.forward(h)));
}

Tensor ResidualBlock::forward(const Tensor& x) const {
  if (x.rank() != 5 || x.dim(1) != channels_) {
    throw ShapeError("residual block: expected " + std::to_string(channels_) + " channels, got " +
                     to_string(x.shape()));
  }
  return add(x, body(x));
}

void ResidualBlock::collect(std::vector<Parameter>& out) const {
  norm1.collect(out);
  conv1.collect(out);
  norm2.collect(out);
  conv2.collect(out);
}

EdgeGatedLayer::EdgeGatedLayer(const std::string& name, std::size_t edge_channels,
                               std::size_t main_channels, std::size_t resolution_, Rng& rng)
    : resolution(resolution_) {
  proj_edge = Conv3d(name + ".proj_edge", edge_channels, 1, 1, 1, 0, rng);
  proj_main = Conv3d(name + ".proj_main", main_channels, 1, 1, 1, 0, rng);
}

Tensor EdgeGatedLayer::attention(const Tensor& e_in, const Tensor& m) const {
  if (!same_spatial(e_in, m)) {
    throw ShapeError("edge-gated layer: edge input " + to_string(e_in.shape()) +
                     " not aligned with main-stream input " + to_string(m.shape()));
  }
  return sigmoid(relu(add(proj_edge.forward(e_in), proj_main.forward(m))));
}

Tensor EdgeGatedLayer::forward(const Tensor& e_in, const Tensor& m) const {
  Tensor alpha = attention(e_in, m);
  return add(mul(e_in, repeat_channels(alpha, e_in.dim(1))), e_in);
}

void EdgeGatedLayer::collect(std::vector<Parameter>& out) const {
  proj_edge.collect(out);
  proj_main.collect(out);
}

// ---- config ----------------------------------------------------------------

void ModelConfig::validate() const {
  if (version != 1) throw std::invalid_argument("model config: unsupported version " + std::to_string(version));
  if (resolutions == 0) throw std::invalid_argument("model config: R must be >= 1");
  if (base_channels == 0) throw std::invalid_argument("model config: B must be >= 1");
  if (classes == 0) throw std::invalid_argument("model config: K must be >= 1");
  if (in_channels == 0) throw std::invalid_argument("model config: in_channels must be >= 1");
  if (groups == 0) throw std::invalid_argument("model config: groups must be >= 1");
  for (std::size_t r = 0; r < resolutions; ++r) {
    const std::size_t c = level_channels(r);
    if (c % std::min(groups, c) != 0) {
      throw std::invalid_argument("model config: " + std::to_string(c) + " channels not divisible by " +
                                  std::to_string(std::min(groups, c)) + " groups");
    }
  }
}

std::string ModelConfig::to_text() const {
  nlohmann::ordered_json j;
  j["format"] = "egcnn-model";
  j["version"] = version;
  j["R"] = resolutions;
  j["B"] = base_channels;
  j["K"] = classes;
  j["in_channels"] = in_channels;
  j["groups"] = groups;
  j["edge_stream"] = edge_stream;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  ModelConfig c;
  try {
    c.version = j.value("version", 1);
    c.resolutions = j.at("R").get<std::size_t>();
    c.base_channels = j.at("B").get<std::size_t>();
    c.classes = j.at("K").get<std::size_t>();
    c.in_channels = j.value("in_channels", std::size_t{1});
    c.groups = j.value("groups", std::size_t{8});
    c.edge_stream = j.value("edge_stream", true);
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- backbone --------------------------------------------------------------

Backbone::Backbone(const ModelConfig& config, Rng& rng) : resolutions_(config.resolutions) {
  const std::size_t R = config.resolutions;
  stem_ = Conv3d("backbone.stem", config.in_channels, config.level_channels(0), 3, 1, 1, rng);
  for (std::size_t r = 0; r < R; ++r) {
    if (r > 0) {
      down_.emplace_back("backbone.down" + std::to_string(r), config.level_channels(r - 1),
                         config.level_channels(r), 3, 2, 1, rng);
    }
    encoder_.emplace_back("backbone.enc" + std::to_string(r), config.level_channels(r), config.groups, rng);
  }
  decoder_top_ = ResidualBlock("backbone.dec" + std::to_string(R - 1), config.level_channels(R - 1),
                               config.groups, rng);
  decoder_fuse_.resize(R);
  decoder_.resize(R);
  for (std::size_t r = R - 1; r-- > 0;) {
    decoder_fuse_[r] = Conv3d("backbone.fuse" + std::to_string(r),
                              config.level_channels(r + 1) + config.level_channels(r),
                              config.level_channels(r), 1, 1, 0, rng);
    decoder_[r] = ResidualBlock("backbone.dec" + std::to_string(r), config.level_channels(r), config.groups, rng);
  }
}

Backbone::Output Backbone::forward(const Tensor& x) const {
  if (x.rank() != 5) throw ShapeError("backbone: expected [N,C,D,H,W], got " + to_string(x.shape()));
  const std::size_t factor = std::size_t{1} << (resolutions_ - 1);
  for (std::size_t axis = 2; axis < 5; ++axis) {
    if (x.dim(axis) % factor != 0) {
      throw ShapeError("backbone: spatial extents " + to_string(x.shape()) + " not divisible by " +
                       std::to_string(factor));
    }
  }
  Output out;
  Tensor h = encoder_[0].forward(stem_.forward(x));
  out.taps.push_back(h);
  for (std::size_t r = 1; r < resolutions_; ++r) {
    h = encoder_[r].forward(down_[r - 1].forward(h));
    out.taps.push_back(h);
  }
  Tensor d = decoder_top_.forward(h);
  out.taps.push_back(d);
  for (std::size_t r = resolutions_ - 1; r-- > 0;) {
    d = trilinear_upsample(d, 2);
    d = decoder_fuse_[r].forward(concat_channels({d, out.taps[r]}));
    d = decoder_[r].forward(d);
  }
  out.features = d;
  return out;
}

void Backbone::collect(std::vector<Parameter>& out) const {
  stem_.collect(out);
  for (std::size_t r = 0; r < resolutions_; ++r) {
    if (r > 0) down_[r - 1].collect(out);
    encoder_[r].collect(out);
  }
  decoder_top_.collect(out);
  for (std::size_t r = resolutions_ - 1; r-- > 0;) {
    decoder_fuse_[r].collect(out);
    decoder_[r].collect(out);
  }
}

// ---- full model ------------------------------------------------------------

EgModel::EgModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t R = config_.resolutions, B = config_.base_channels;
  backbone_ = Backbone(config_, rng);
  if (config_.edge_stream) {
    edge_entry_ = Conv3d("edge.entry", config_.level_channels(R - 1), B, 1, 1, 0, rng);
    edge_blocks_.resize(R);
    gates_.resize(R);
    for (std::size_t r = R; r-- > 0;) {
      edge_blocks_[r] = ResidualBlock("edge.block" + std::to_string(r), B, config_.groups, rng);
      gates_[r] = EdgeGatedLayer("edge.gate" + std::to_string(r), B, config_.level_channels(r), r, rng);
    }
    edge_head_ = Conv3d("edge.head", B, 1, 1, 1, 0, rng);
    head_ = Conv3d("fusion.head", 2 * B, config_.classes, 1, 1, 0, rng);
  } else {
    head_ = Conv3d("semantic.head", B, config_.classes, 1, 1, 0, rng);
  }
}

EgModel::EdgeOutput EgModel::edge_stream_forward(const std::vector<Tensor>& taps) const {
  if (!config_.edge_stream) throw std::logic_error("edge stream disabled in this model");
  const std::size_t R = config_.resolutions;
  if (taps.size() != R + 1) {
    throw ShapeError("edge stream: expected " + std::to_string(R + 1) + " taps, got " +
                     std::to_string(taps.size()));
  }
  Tensor e = edge_entry_.forward(taps[R]);
  for (std::size_t r = R; r-- > 0;) {
    e = edge_blocks_[r].forward(e);
    const std::size_t target = taps[r].dim(2);
    if (target % e.dim(2) != 0) {
      throw ShapeError("edge stream: tap " + std::to_string(r) + " resolution " + to_string(taps[r].shape()) +
                       " is not an integer multiple of " + to_string(e.shape()));
    }
    e = trilinear_upsample(e, target / e.dim(2));
    e = gates_[r].forward(e, taps[r]);
  }
  return {e, edge_head_.forward(e)};
}

EgModel::Output EgModel::forward(const Tensor& x) const {
  if (x.rank() != 5 || x.dim(1) != config_.in_channels) {
    throw ShapeError("model: expected [N," + std::to_string(config_.in_channels) + ",D,H,W], got " +
                     to_string(x.shape()));
  }
  Backbone::Output bb = backbone_.forward(x);
  Output out;
  if (!config_.edge_stream) {
    out.semantic_logits = head_.forward(bb.features);
    return out;
  }
  EdgeOutput edge = edge_stream_forward(bb.taps);
  out.semantic_logits = head_.forward(concat_channels({bb.features, edge.features}));
  out.edge_logits = edge.logits;
  out.edge_features = edge.features;
  return out;
}

std::vector<Parameter> EgModel::parameters() const {
  std::vector<Parameter> out;
  backbone_.collect(out);
  if (config_.edge_stream) {
    edge_entry_.collect(out);
    for (std::size_t r = config_.resolutions; r-- > 0;) {
      edge_blocks_[r].collect(out);
      gates_[r].collect(out);
    }
    edge_head_.collect(out);
  }
  head_.collect(out);
  return out;
}

std::size_t EgModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

}  // namespace egcnn::nn
