#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "egcnn/labels.hpp"
#include "egcnn/tensor.hpp"

namespace egcnn::data {

enum class Modality { Mri, Ct };

std::string_view modality_name(Modality m) noexcept;  // "mri" / "ct"
Modality parse_modality(std::string_view name);

/// One labeled volume. The image is kept in 32-bit floats, the precision of
/// the on-disk format, and widened to 64 bits when it enters the network.
struct VolumeRecord {
  std::string id;
  Modality modality = Modality::Mri;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm, informational only
  std::size_t channels = 1;
  std::size_t classes = 1;
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<float> image;  // [C, D, H, W], W fastest
  LabelVolume labels;        // batch 1

  std::size_t voxels() const noexcept { return depth * height * width; }
  // Throws ShapeError / std::out_of_range when the fields disagree.
  void validate() const;
  // Raw image as a [1, C, D, H, W] tensor (no normalization).
  Tensor image_tensor() const;
  bool operator==(const VolumeRecord&) const = default;
};

struct PhantomSpec {
  std::array<std::size_t, 3> extent{32, 32, 32};
  std::size_t classes = 3;  // background, organ, lesion
  Modality modality = Modality::Mri;
  std::size_t organ_count = 1;
  double organ_radius_min = 8.0, organ_radius_max = 11.0;  // voxels, per axis
  std::size_t lesion_count = 1;
  double lesion_radius_min = 3.0, lesion_radius_max = 5.0;
  // Per-label intensity means; index 0 is body tissue. Defaults depend on
  // the modality when left empty.
  std::vector<double> class_means;
  double noise_std = 20.0;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument for degenerate radii or extents.
  void validate() const;
  std::string to_text() const;
  static PhantomSpec from_text(const std::string& text);
};

/// Nested-ellipsoid phantom. Label 1 marks organ ellipsoids; each deeper
/// label k >= 2 is an ellipsoid intersected with label k-1's region eroded by
/// one voxel, so every voxel of label k has only labels >= k-1 among its 26
/// neighbours. MRI-like phantoms are exactly zero outside the body
/// ellipsoid; CT-like phantoms sit at -1000 there.
VolumeRecord generate_phantom(const PhantomSpec& spec, const std::string& id = "phantom");

// Zero-mean, unit-std over non-zero voxels; exact zeros stay zero.
Tensor normalize_mri(const Tensor& image);
// clamp(x / 1000, -1, 1).
Tensor normalize_ct(const Tensor& image);
// Image tensor [1, C, D, H, W] normalized per the record's modality.
Tensor normalized_image(const VolumeRecord& record);

/// Seeded permutation of [0, count) split into train and val index lists.
/// The train side gets round(count * train_fraction) entries, clamped so both
/// sides are non-empty.
struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
SplitIndices split_indices(std::size_t count, double train_fraction, std::uint64_t seed);

template <class T>
std::pair<std::vector<T>, std::vector<T>> split_dataset(const std::vector<T>& records, double train_fraction,
                                                        std::uint64_t seed) {
  const SplitIndices s = split_indices(records.size(), train_fraction, seed);
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i : s.train) out.first.push_back(records[i]);
  for (std::size_t i : s.val) out.second.push_back(records[i]);
  return out;
}

enum class Split { Train, Val };
std::string_view split_name(Split s) noexcept;
Split parse_split(std::string_view name);

/// Dataset listing: record ids, EGV1 paths and split assignment.
struct Manifest {
  struct Entry {
    std::string id;
    std::string path;  // relative paths resolve against the manifest's directory
    Split split = Split::Train;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;
  std::filesystem::path base_dir;

  std::vector<Entry> select(Split split) const;
  std::filesystem::path resolve(const Entry& e) const;

  std::string to_text() const;
  static Manifest from_text(const std::string& text, std::filesystem::path base_dir = {});
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);
};

// Per-record seed derived from a dataset seed (SplitMix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept;

}  // namespace egcnn::data
