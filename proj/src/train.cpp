#include "egcnn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>

#include "egcnn/edges.hpp"
#include "egcnn/ops.hpp"
#include "egcnn/volume_io.hpp"
#include "json.hpp"

namespace egcnn::train {

namespace fs = std::filesystem;

// ---- optimisation ----------------------------------------------------------

double lr_schedule(double alpha0, std::size_t epoch, std::size_t total_epochs) {
  if (epoch > total_epochs) {
    throw std::invalid_argument("lr_schedule: epoch " + std::to_string(epoch) + " beyond N_e = " +
                                std::to_string(total_epochs));
  }
  if (total_epochs == 0) return alpha0;
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return alpha0 * std::pow(frac, 0.9);
}

void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
               std::uint64_t step, double lr, const AdamHyper& hyper, const std::string& name) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_step: buffers for " + name + " are not congruent");
  }
  if (step == 0) throw std::invalid_argument("adam_step: step counter starts at 1");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("adam_step: non-finite gradient " + std::to_string(grad[i]) + " in " + name + "[" +
                         std::to_string(i) + "] at step " + std::to_string(step));
    }
  }
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
    v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

Adam::Adam(std::vector<nn::Parameter> params, AdamHyper hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++step_;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].value;
    std::span<const double> g;
    if (t.has_grad()) {
      g = t.grad_view();
    } else {
      zeros.assign(t.numel(), 0.0);
      g = zeros;
    }
    adam_step(t.mutable_data(), g, m_[i], v_[i], step_, lr, hyper_, params_[i].name);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void Adam::load_state(std::uint64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw std::invalid_argument("adam: state has " + std::to_string(m.size()) + " buffers, optimiser has " +
                                std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (m[i].size() != params_[i].value.numel() || v[i].size() != params_[i].value.numel()) {
      throw std::invalid_argument("adam: state size mismatch for " + params_[i].name);
    }
  }
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---- configuration ---------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(alpha0 > 0.0)) throw std::invalid_argument("train config: alpha0 must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw std::invalid_argument("train config: Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw std::invalid_argument("train config: Adam eps must be positive");
  weights.validate();
  model.validate();
}

std::string TrainConfig::to_text() const {
  nlohmann::ordered_json j;
  j["format"] = "egcnn-train";
  j["version"] = 1;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["alpha0"] = alpha0;
  j["adam"] = {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
  j["loss"] = {{"lambda1", weights.lambda1},
               {"lambda2", weights.lambda2},
               {"dice_eps", weights.dice_eps},
               {"tau", weights.tau},
               {"consistency", weights.consistency},
               {"consistency_full_volume", weights.consistency_full_volume},
               {"dice_per_class", weights.dice_per_class}};
  j["seed"] = seed;
  j["model"] = nlohmann::ordered_json::parse(model.to_text());
  j["manifest"] = manifest;
  j["checkpoint_every"] = checkpoint_every;
  j["eval_every"] = eval_every;
  j["stochastic_consistency"] = stochastic_consistency;
  return j.dump(2);
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.alpha0 = j.value("alpha0", c.alpha0);
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      c.weights.lambda1 = l.value("lambda1", c.weights.lambda1);
      c.weights.lambda2 = l.value("lambda2", c.weights.lambda2);
      c.weights.dice_eps = l.value("dice_eps", c.weights.dice_eps);
      c.weights.tau = l.value("tau", c.weights.tau);
      c.weights.consistency = l.value("consistency", c.weights.consistency);
      c.weights.consistency_full_volume = l.value("consistency_full_volume", c.weights.consistency_full_volume);
      c.weights.dice_per_class = l.value("dice_per_class", c.weights.dice_per_class);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) c.model = nn::ModelConfig::from_text(j.at("model").dump());
    c.manifest = j.value("manifest", c.manifest);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.stochastic_consistency = j.value("stochastic_consistency", c.stochastic_consistency);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("train config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig c = from_text(ss.str());
  if (!c.manifest.empty() && fs::path(c.manifest).is_relative()) {
    c.manifest = (path.parent_path() / c.manifest).lexically_normal().string();
  }
  return c;
}

// ---- data plumbing ---------------------------------------------------------

std::vector<Sample> load_samples(const data::Manifest& manifest, data::Split split) {
  std::vector<Sample> out;
  for (const auto& e : manifest.select(split)) {
    const fs::path path = manifest.resolve(e);
    try {
      data::VolumeRecord rec = data::load_volume(path);
      out.push_back({e.id, data::normalized_image(rec), std::move(rec.labels), rec.classes});
    } catch (const std::exception& ex) {
      throw std::runtime_error("record '" + e.id + "' (" + path.string() + "): " + ex.what());
    }
  }
  return out;
}

std::pair<Tensor, LabelVolume> make_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ShapeError("make_batch: empty batch");
  const Shape& s0 = samples.front()->image.shape();
  std::vector<double> x;
  LabelVolume labels(samples.size(), s0[2], s0[3], s0[4]);
  const std::size_t sp = labels.voxels_per_sample();
  x.reserve(samples.size() * numel(s0));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    if (s.image.shape() != s0) {
      throw ShapeError("make_batch: record '" + s.id + "' has shape " + to_string(s.image.shape()) +
                       " but record '" + samples.front()->id + "' has " + to_string(s0));
    }
    auto v = s.image.data();
    x.insert(x.end(), v.begin(), v.end());
    std::copy(s.labels.values.begin(), s.labels.values.end(),
              labels.values.begin() + static_cast<std::ptrdiff_t>(i * sp));
  }
  return {Tensor::from({samples.size(), s0[1], s0[2], s0[3], s0[4]}, std::move(x)), std::move(labels)};
}

namespace {

void check_compatible(const nn::ModelConfig& model, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    if (s.classes != model.classes) {
      throw std::invalid_argument("record '" + s.id + "' has K = " + std::to_string(s.classes) +
                                  " but the model predicts " + std::to_string(model.classes) + " classes");
    }
    if (s.image.dim(1) != model.in_channels) {
      throw std::invalid_argument("record '" + s.id + "' has " + std::to_string(s.image.dim(1)) +
                                  " channels but the model expects " + std::to_string(model.in_channels));
    }
  }
}

std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

std::vector<double> positive_mask(const Tensor& logits) {
  auto v = logits.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? 1.0 : 0.0;
  return out;
}

// Metrics and loss terms of one forward pass.
void accumulate_batch(metrics::MetricsAccumulator& acc, const nn::EgModel::Output& out, const LabelVolume& labels,
                      std::size_t classes, const loss::LossBundle& bundle) {
  acc.add_volumes(argmax_channels(out.semantic_logits), labels);
  if (out.edge_logits.defined()) {
    const auto truth = edges::edges_from_labels(labels, classes);
    auto tv = truth.mask.data();
    acc.add_edges(positive_mask(out.edge_logits), std::vector<double>(tv.begin(), tv.end()), labels.batch);
  }
  acc.add_losses({bundle.semantic.item(), bundle.edge.item(), bundle.consistency.item(), bundle.total.item()},
                 labels.batch);
}

std::string epoch_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04zu.egck", epoch);
  return buf;
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

}  // namespace

nn::EgModel model_from_checkpoint(const Checkpoint& ckpt) {
  nn::EgModel model(ckpt.model);
  restore_parameters(ckpt.params, model);
  return model;
}

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (config.manifest.empty()) throw std::invalid_argument("train config: manifest path is required");
  if (options.out_dir.empty()) throw std::invalid_argument("train: output directory is required");
  fs::create_directories(options.out_dir);

  const data::Manifest manifest = data::Manifest::load(config.manifest);
  const std::vector<Sample> train_set = load_samples(manifest, data::Split::Train);
  const std::vector<Sample> val_set = load_samples(manifest, data::Split::Val);
  if (train_set.empty()) throw std::invalid_argument("train: manifest has no training records");
  check_compatible(config.model, train_set);
  check_compatible(config.model, val_set);

  nn::EgModel model(config.model);
  Adam adam(model.parameters(), config.adam);
  std::mt19937_64 rng(config.seed);
  const std::string config_text = config.to_text();
  std::size_t start = 0;

  if (options.resume) {
    const Checkpoint ck = load_checkpoint(*options.resume);
    if (!(ck.model == config.model)) throw std::invalid_argument("resume: model config differs from the checkpoint");
    if (ck.train_config != config_text) {
      throw std::invalid_argument("resume: training config differs from the one stored in the checkpoint");
    }
    if (ck.epoch > config.epochs) throw std::invalid_argument("resume: checkpoint is past the final epoch");
    restore_parameters(ck.params, model);
    adam.load_state(ck.adam_step, ck.adam_m, ck.adam_v);
    std::istringstream rs(ck.rng_state);
    rs >> rng;
    if (!rs) throw std::invalid_argument("resume: unreadable RNG state in checkpoint");
    start = ck.epoch;
  }

  auto save = [&](const fs::path& path, std::size_t epoch) {
    Checkpoint ck;
    ck.model = config.model;
    ck.epoch = epoch;
    ck.adam_step = adam.steps();
    ck.rng_state = rng_text(rng);
    ck.train_config = config_text;
    ck.params = snapshot_parameters(model);
    ck.adam_m = adam.first_moments();
    ck.adam_v = adam.second_moments();
    save_checkpoint(ck, path);
  };

  const fs::path metrics_path = options.out_dir / "metrics.jsonl";
  std::ofstream metrics_out(metrics_path, options.resume ? std::ios::app : std::ios::trunc);
  if (!metrics_out) throw std::runtime_error("train: cannot write " + metrics_path.string());
  auto emit = [&](const metrics::MetricsRecord& r) {
    metrics_out << r.to_json_line() << '\n';
    metrics_out.flush();
  };

  TrainResult result;
  result.epochs_completed = start;
  const std::size_t classes = config.model.classes;
  for (std::size_t epoch = start; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(config.alpha0, epoch, config.epochs);
    const auto order = permutation(train_set.size(), rng);
    metrics::MetricsAccumulator acc(classes);
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      std::vector<const Sample*> members;
      for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i) {
        members.push_back(&train_set[order[i]]);
      }
      auto [x, labels] = make_batch(members);
      adam.zero_grad();
      const auto out = model.forward(x);
      loss::TotalLossOptions lo;
      lo.stochastic = config.stochastic_consistency;
      lo.seed = config.stochastic_consistency ? rng() : 0;
      const auto bundle = loss::total_loss(out.semantic_logits, out.edge_logits, labels, config.weights, lo);
      accumulate_batch(acc, out, labels, classes, bundle);
      backward(bundle.total);
      adam.step(lr);
    }
    metrics::MetricsRecord rec = acc.finish(static_cast<long>(epoch), "train");
    rec.learning_rate = lr;
    emit(rec);
    result.history.push_back(rec);
    const std::size_t done = epoch + 1;
    result.epochs_completed = done;
    if (options.log) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *options.log << "epoch " << done << "/" << config.epochs << " lr " << std::setprecision(4) << lr << " loss "
                   << rec.losses->total << " fg-dice " << rec.mean_foreground << " (" << std::fixed
                   << std::setprecision(1) << secs << " s)" << std::defaultfloat << std::endl;
    }
    if (done == config.epochs) break;
    if (config.eval_every != 0 && done % config.eval_every == 0 && !val_set.empty()) {
      emit(evaluate_model(model, val_set, config.weights, static_cast<long>(done), "val"));
    }
    const bool stop = options.stop_after && done == *options.stop_after;
    if ((config.checkpoint_every != 0 && done % config.checkpoint_every == 0) || stop) {
      save(options.out_dir / epoch_name(done), done);
    }
    if (stop) {
      result.final_checkpoint = options.out_dir / epoch_name(done);
      return result;
    }
  }

  result.final_checkpoint = options.out_dir / "final.egck";
  save(result.final_checkpoint, result.epochs_completed);
  if (!val_set.empty()) {
    result.val = evaluate_model(model, val_set, config.weights, static_cast<long>(result.epochs_completed), "val");
    emit(*result.val);
  }
  return result;
}

// ---- evaluation ------------------------------------------------------------

metrics::MetricsRecord evaluate_model(const nn::EgModel& model, const std::vector<Sample>& samples,
                                      const loss::LossWeights& weights, long epoch, const std::string& split) {
  NoGradGuard no_grad;
  const std::size_t classes = model.config().classes;
  check_compatible(model.config(), samples);
  metrics::MetricsAccumulator acc(classes);
  for (const auto& s : samples) {
    auto [x, labels] = make_batch({&s});
    const auto out = model.forward(x);
    const auto bundle = loss::total_loss(out.semantic_logits, out.edge_logits, labels, weights);
    accumulate_batch(acc, out, labels, classes, bundle);
  }
  return acc.finish(epoch, split);
}

metrics::MetricsRecord evaluate(const fs::path& checkpoint, const fs::path& manifest_path, data::Split split) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const nn::EgModel model = model_from_checkpoint(ck);
  loss::LossWeights weights;
  if (!ck.train_config.empty()) weights = TrainConfig::from_text(ck.train_config).weights;
  const auto samples = load_samples(data::Manifest::load(manifest_path), split);
  if (samples.empty()) {
    throw std::invalid_argument("evaluate: manifest has no " + std::string(data::split_name(split)) + " records");
  }
  return evaluate_model(model, samples, weights, static_cast<long>(ck.epoch), std::string(data::split_name(split)));
}

// ---- prediction ------------------------------------------------------------

namespace {

void render_slice(std::ostream& os, const std::string& title, std::size_t height, std::size_t width,
                  const std::function<char(std::size_t, std::size_t)>& cell) {
  os << title << '\n';
  for (std::size_t h = 0; h < height; ++h) {
    for (std::size_t w = 0; w < width; ++w) os << cell(h, w);
    os << '\n';
  }
  os << '\n';
}

}  // namespace

PredictOutput predict(const fs::path& checkpoint, const fs::path& input, const fs::path& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const nn::EgModel model = model_from_checkpoint(ck);
  const data::VolumeRecord rec = data::load_volume(input);
  Sample sample{rec.id, data::normalized_image(rec), rec.labels, rec.classes};
  check_compatible(ck.model, {sample});

  NoGradGuard no_grad;
  const auto out = model.forward(sample.image);
  const LabelVolume pred = argmax_channels(out.semantic_logits);
  std::vector<float> edge_prob(rec.voxels(), 0.0f);
  if (out.edge_logits.defined()) {
    auto p = sigmoid(out.edge_logits).data();
    for (std::size_t i = 0; i < p.size(); ++i) edge_prob[i] = static_cast<float>(p[i]);
  }

  fs::create_directories(out_dir);
  PredictOutput paths{out_dir / (rec.id + "_labels.egv1"), out_dir / (rec.id + "_edges.egv1"),
                      out_dir / (rec.id + "_slices.txt")};

  data::VolumeRecord labels_rec = rec;
  labels_rec.labels = pred;
  data::save_volume(labels_rec, paths.labels);

  data::VolumeRecord edge_rec = rec;
  edge_rec.channels = 1;
  edge_rec.image = edge_prob;
  edge_rec.labels = pred;
  data::save_volume(edge_rec, paths.edge_probability);

  const std::size_t d = rec.depth / 2, H = rec.height, W = rec.width;
  const std::size_t base = d * H * W;
  float lo = rec.image[base], hi = rec.image[base];
  for (std::size_t i = 0; i < H * W; ++i) {
    lo = std::min(lo, rec.image[base + i]);
    hi = std::max(hi, rec.image[base + i]);
  }
  static constexpr char kRamp[] = " .:-=+*#%@";
  auto ramp = [](double t) { return kRamp[static_cast<std::size_t>(std::clamp(t, 0.0, 1.0) * 9.0 + 0.5)]; };
  auto label_char = [](std::int32_t l) { return l == 0 ? '.' : static_cast<char>(l < 10 ? '0' + l : '+'); };

  std::ofstream txt(paths.render);
  if (!txt) throw std::runtime_error("predict: cannot write " + paths.render.string());
  txt << "record " << rec.id << ", axial slice d = " << d << " of " << rec.depth << "\n\n";
  render_slice(txt, "image (channel 0)", H, W, [&](std::size_t h, std::size_t w) {
    return ramp(hi > lo ? (rec.image[base + h * W + w] - lo) / (hi - lo) : 0.0);
  });
  render_slice(txt, "reference labels", H, W,
               [&](std::size_t h, std::size_t w) { return label_char(rec.labels.values[base + h * W + w]); });
  render_slice(txt, "predicted labels", H, W,
               [&](std::size_t h, std::size_t w) { return label_char(pred.values[base + h * W + w]); });
  render_slice(txt, "edge probability", H, W,
               [&](std::size_t h, std::size_t w) { return ramp(edge_prob[base + h * W + w]); });
  if (!txt) throw std::runtime_error("predict: write failed for " + paths.render.string());
  return paths;
}

}  // namespace egcnn::train
