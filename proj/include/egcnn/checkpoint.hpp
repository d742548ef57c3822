#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "egcnn/nn.hpp"
#include "egcnn/volume_io.hpp"

namespace egcnn {

struct ParameterBlob {
  std::string name;
  Shape shape;
  std::vector<double> values;
  bool operator==(const ParameterBlob&) const = default;
};

/// Complete training state at an epoch boundary.
struct Checkpoint {
  nn::ModelConfig model;
  std::size_t epoch = 0;  // epochs completed
  std::uint64_t adam_step = 0;
  std::string rng_state;     // textual std::mt19937_64 state of the shuffling stream
  std::string train_config;  // TrainConfig text the run was started with
  std::vector<ParameterBlob> params;
  std::vector<std::vector<double>> adam_m;  // empty, or one buffer per parameter
  std::vector<std::vector<double>> adam_v;

  bool operator==(const Checkpoint&) const = default;
};

inline constexpr char kCheckpointMagic[4] = {'E', 'G', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// "EGCK" | u16 version | u32 header length | JSON header | f64 LE parameter
// values, then Adam first and second moments, in header order.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies the model's current parameter values into blobs.
std::vector<ParameterBlob> snapshot_parameters(const nn::EgModel& model);
// Overwrites the model's parameters; names and shapes must match exactly.
void restore_parameters(const std::vector<ParameterBlob>& blobs, nn::EgModel& model);

}  // namespace egcnn
