#include "egcnn/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace egcnn::data {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::size_t header_extent(const nlohmann::json& h, const char* key) {
  const auto v = h.at(key).get<std::int64_t>();
  if (v <= 0) throw FormatError(std::string("EGV1: header field ") + key + " must be positive");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const VolumeRecord& record) {
  record.validate();
  if (record.classes > 256) throw FormatError("EGV1: labels are stored as u8, K must be <= 256");

  nlohmann::ordered_json h;
  h["id"] = record.id;
  h["modality"] = modality_name(record.modality);
  h["spacing"] = record.spacing;
  h["C"] = record.channels;
  h["K"] = record.classes;
  h["D"] = record.depth;
  h["H"] = record.height;
  h["W"] = record.width;
  const std::string header = h.dump();

  std::vector<std::uint8_t> out;
  out.reserve(10 + header.size() + 4 * record.image.size() + record.voxels());
  out.insert(out.end(), std::begin(kEgv1Magic), std::end(kEgv1Magic));
  put_u16(out, kEgv1Version);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (float f : record.image) put_u32(out, std::bit_cast<std::uint32_t>(f));
  for (std::int32_t l : record.labels.values) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

VolumeRecord decode_volume(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10) throw FormatError("EGV1: truncated preamble (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kEgv1Magic, 4) != 0) throw FormatError("EGV1: bad magic");
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kEgv1Version) throw FormatError("EGV1: unknown format version " + std::to_string(version));
  const std::size_t header_len = get_u32(bytes.data() + 6);
  if (bytes.size() < 10 + header_len) throw FormatError("EGV1: truncated header");

  VolumeRecord rec;
  try {
    const auto h = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + static_cast<std::ptrdiff_t>(header_len));
    rec.id = h.at("id").get<std::string>();
    rec.modality = parse_modality(h.at("modality").get<std::string>());
    rec.spacing = h.at("spacing").get<std::array<double, 3>>();
    rec.channels = header_extent(h, "C");
    rec.classes = header_extent(h, "K");
    rec.depth = header_extent(h, "D");
    rec.height = header_extent(h, "H");
    rec.width = header_extent(h, "W");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("EGV1: bad header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("EGV1: bad header: ") + e.what());
  }

  const std::size_t voxels = rec.voxels();
  const std::size_t payload = 4 * rec.channels * voxels + voxels;
  const std::size_t expected = 10 + header_len + payload;
  if (bytes.size() < expected) {
    throw FormatError("EGV1: truncated payload (" + std::to_string(bytes.size()) + " of " +
                      std::to_string(expected) + " bytes)");
  }
  if (bytes.size() > expected) throw FormatError("EGV1: trailing bytes after the label payload");

  const std::uint8_t* p = bytes.data() + 10 + header_len;
  rec.image.resize(rec.channels * voxels);
  for (auto& f : rec.image) {
    f = std::bit_cast<float>(get_u32(p));
    p += 4;
  }
  rec.labels = LabelVolume(1, rec.depth, rec.height, rec.width);
  for (std::size_t i = 0; i < voxels; ++i) {
    if (p[i] >= rec.classes) {
      throw FormatError("EGV1: label " + std::to_string(p[i]) + " at voxel " + std::to_string(i) +
                        " outside [0," + std::to_string(rec.classes) + ")");
    }
    rec.labels.values[i] = p[i];
  }
  return rec;
}

void save_volume(const VolumeRecord& record, const std::filesystem::path& path) {
  const auto bytes = encode_volume(record);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("EGV1: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("EGV1: write failed for " + path.string());
}

VolumeRecord load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("EGV1: cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_volume(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace egcnn::data
