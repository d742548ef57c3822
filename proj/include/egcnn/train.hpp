#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "egcnn/checkpoint.hpp"
#include "egcnn/data.hpp"
#include "egcnn/losses.hpp"
#include "egcnn/metrics.hpp"
#include "egcnn/nn.hpp"

namespace egcnn::train {

// alpha0 * (1 - e / N_e)^0.9. Throws std::invalid_argument when e > N_e.
double lr_schedule(double alpha0, std::size_t epoch, std::size_t total_epochs);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of a single buffer; `step` counts from 1.
// Throws NumericError naming `name` and the index of a non-finite gradient.
void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
               std::uint64_t step, double lr, const AdamHyper& hyper, const std::string& name = "param");

/// Adam over a fixed parameter list. Parameters without a gradient buffer
/// are treated as having zero gradient.
class Adam {
 public:
  Adam(std::vector<nn::Parameter> params, AdamHyper hyper);

  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const noexcept { return step_; }
  const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }
  void load_state(std::uint64_t step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

 private:
  std::vector<nn::Parameter> params_;
  AdamHyper hyper_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  std::size_t epochs = 1;  // N_e; 0 writes the initial checkpoint only
  std::size_t batch_size = 2;
  double alpha0 = 1e-4;
  AdamHyper adam;
  loss::LossWeights weights;
  std::uint64_t seed = 0;
  nn::ModelConfig model;
  std::string manifest;              // relative paths resolve against the config file
  std::size_t checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  std::size_t eval_every = 0;        // epochs between validation passes; 0 = final only
  bool stochastic_consistency = false;

  void validate() const;
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);  // resolves `manifest`
};

/// A normalized volume ready for the network.
struct Sample {
  std::string id;
  Tensor image;  // [1, C, D, H, W]
  LabelVolume labels;
  std::size_t classes = 0;
};

std::vector<Sample> load_samples(const data::Manifest& manifest, data::Split split);

// Stacks samples into one batch; throws ShapeError naming the mismatching ids.
std::pair<Tensor, LabelVolume> make_batch(const std::vector<const Sample*>& samples);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> stop_after;  // save a checkpoint and return after this epoch
  std::ostream* log = nullptr;            // progress lines; nullptr = silent
};

struct TrainResult {
  std::vector<metrics::MetricsRecord> history;  // train records of the epochs run
  std::optional<metrics::MetricsRecord> val;    // final validation pass, if any
  std::filesystem::path final_checkpoint;
  std::size_t epochs_completed = 0;
};

/// Writes metrics.jsonl (appended on resume), epoch_NNNN.egck at the
/// checkpoint cadence and final.egck when all epochs are done.
TrainResult train(const TrainConfig& config, const TrainOptions& options);

// Deterministic metrics of a model on samples (no Gumbel noise).
metrics::MetricsRecord evaluate_model(const nn::EgModel& model, const std::vector<Sample>& samples,
                                      const loss::LossWeights& weights, long epoch, const std::string& split);

nn::EgModel model_from_checkpoint(const Checkpoint& ckpt);

metrics::MetricsRecord evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                                data::Split split);

struct PredictOutput {
  std::filesystem::path labels;
  std::filesystem::path edge_probability;
  std::filesystem::path render;
};

/// Writes <id>_labels.egv1 (input image, predicted labels),
/// <id>_edges.egv1 (edge probability image, predicted labels; without an
/// edge head the probability image is all zero) and <id>_slices.txt (axial
/// mid-slice renders).
PredictOutput predict(const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                      const std::filesystem::path& out_dir);

}  // namespace egcnn::train
