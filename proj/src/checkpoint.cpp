#include "egcnn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace egcnn {

using data::FormatError;

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_doubles(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
  for (double d : v) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  const bool moments = !ckpt.adam_m.empty();
  if (moments && (ckpt.adam_m.size() != ckpt.params.size() || ckpt.adam_v.size() != ckpt.params.size())) {
    throw std::invalid_argument("checkpoint: moment buffers do not match the parameter list");
  }
  nlohmann::ordered_json h;
  h["version"] = kCheckpointVersion;
  h["model"] = nlohmann::ordered_json::parse(ckpt.model.to_text());
  h["epoch"] = ckpt.epoch;
  h["adam_step"] = ckpt.adam_step;
  h["rng_state"] = ckpt.rng_state;
  h["train_config"] = ckpt.train_config;
  h["moments"] = moments;
  h["parameters"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& p = ckpt.params[i];
    if (p.values.size() != numel(p.shape)) {
      throw std::invalid_argument("checkpoint: parameter " + p.name + " has inconsistent shape");
    }
    if (moments && (ckpt.adam_m[i].size() != p.values.size() || ckpt.adam_v[i].size() != p.values.size())) {
      throw std::invalid_argument("checkpoint: moments for " + p.name + " have the wrong size");
    }
    h["parameters"].push_back({{"name", p.name}, {"shape", p.shape}});
  }
  const std::string header = h.dump();

  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  out.push_back(static_cast<std::uint8_t>(kCheckpointVersion & 0xFF));
  out.push_back(static_cast<std::uint8_t>(kCheckpointVersion >> 8));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((header.size() >> (8 * i)) & 0xFF));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& p : ckpt.params) put_doubles(out, p.values);
  if (moments) {
    for (const auto& m : ckpt.adam_m) put_doubles(out, m);
    for (const auto& v : ckpt.adam_v) put_doubles(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10) throw FormatError("checkpoint: truncated preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  const auto version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unknown version " + std::to_string(version));
  std::size_t header_len = 0;
  for (int i = 0; i < 4; ++i) header_len |= static_cast<std::size_t>(bytes[6 + i]) << (8 * i);
  if (bytes.size() < 10 + header_len) throw FormatError("checkpoint: truncated header");

  Checkpoint ck;
  bool moments = false;
  try {
    const auto h = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + static_cast<std::ptrdiff_t>(header_len));
    ck.model = nn::ModelConfig::from_text(h.at("model").dump());
    ck.epoch = h.at("epoch").get<std::size_t>();
    ck.adam_step = h.at("adam_step").get<std::uint64_t>();
    ck.rng_state = h.at("rng_state").get<std::string>();
    ck.train_config = h.at("train_config").get<std::string>();
    moments = h.at("moments").get<bool>();
    for (const auto& p : h.at("parameters")) {
      ck.params.push_back({p.at("name").get<std::string>(), p.at("shape").get<Shape>(), {}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }

  std::size_t total = 0;
  for (const auto& p : ck.params) total += numel(p.shape);
  const std::size_t expected = 10 + header_len + 8 * total * (moments ? 3 : 1);
  if (bytes.size() != expected) {
    throw FormatError("checkpoint: payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected));
  }
  const std::uint8_t* ptr = bytes.data() + 10 + header_len;
  auto read = [&ptr](std::size_t n) {
    std::vector<double> v(n);
    for (auto& d : v) {
      d = std::bit_cast<double>(get_u64(ptr));
      ptr += 8;
    }
    return v;
  };
  for (auto& p : ck.params) p.values = read(numel(p.shape));
  if (moments) {
    for (const auto& p : ck.params) ck.adam_m.push_back(read(numel(p.shape)));
    for (const auto& p : ck.params) ck.adam_v.push_back(read(numel(p.shape)));
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<ParameterBlob> snapshot_parameters(const nn::EgModel& model) {
  std::vector<ParameterBlob> out;
  for (const auto& p : model.parameters()) {
    auto v = p.value.data();
    out.push_back({p.name, p.value.shape(), std::vector<double>(v.begin(), v.end())});
  }
  return out;
}

void restore_parameters(const std::vector<ParameterBlob>& blobs, nn::EgModel& model) {
  auto params = model.parameters();
  if (params.size() != blobs.size()) {
    throw std::invalid_argument("checkpoint: model has " + std::to_string(params.size()) +
                                " parameters, checkpoint has " + std::to_string(blobs.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != blobs[i].name || params[i].value.shape() != blobs[i].shape) {
      throw std::invalid_argument("checkpoint: parameter " + std::to_string(i) + " is " + blobs[i].name + " " +
                                  to_string(blobs[i].shape) + ", model expects " + params[i].name + " " +
                                  to_string(params[i].value.shape()));
    }
    auto dst = params[i].value.mutable_data();
    std::copy(blobs[i].values.begin(), blobs[i].values.end(), dst.begin());
  }
}

}  // namespace egcnn
