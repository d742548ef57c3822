#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "egcnn/data.hpp"

namespace egcnn::data {

/// Malformed or unsupported EGV1 content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kEgv1Magic[4] = {'E', 'G', 'V', '1'};
inline constexpr std::uint16_t kEgv1Version = 1;

/// EGV1 layout, all integers little-endian:
///   "EGV1" | u16 version | u32 header length | header (UTF-8 JSON object with
///   keys id, modality, spacing, C, K, D, H, W in that order) |
///   C*D*H*W f32 image values (W fastest) | D*H*W u8 labels.
std::vector<std::uint8_t> encode_volume(const VolumeRecord& record);
VolumeRecord decode_volume(const std::vector<std::uint8_t>& bytes);

void save_volume(const VolumeRecord& record, const std::filesystem::path& path);
VolumeRecord load_volume(const std::filesystem::path& path);

}  // namespace egcnn::data
