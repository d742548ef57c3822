#include "egcnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace egcnn::data {

namespace {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radius;

  bool contains(std::size_t d, std::size_t h, std::size_t w) const {
    const double p[3] = {static_cast<double>(d), static_cast<double>(h), static_cast<double>(w)};
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double t = (p[a] - center[a]) / radius[a];
      s += t * t;
    }
    return s <= 1.0;
  }
};

std::vector<double> default_means(Modality m, std::size_t classes) {
  std::vector<double> means = m == Modality::Mri ? std::vector<double>{100.0, 180.0, 260.0}
                                                 : std::vector<double>{40.0, 150.0, 300.0};
  while (means.size() < std::max<std::size_t>(classes, 1)) means.push_back(means.back() + 80.0);
  return means;
}

// Voxels of `region` whose in-volume 26-neighbours all lie in `region`.
std::vector<char> erode(const std::vector<char>& region, const std::array<std::size_t, 3>& e) {
  std::vector<char> out(region.size(), 0);
  for (std::size_t d = 0; d < e[0]; ++d) {
    for (std::size_t h = 0; h < e[1]; ++h) {
      for (std::size_t w = 0; w < e[2]; ++w) {
        const std::size_t idx = (d * e[1] + h) * e[2] + w;
        if (!region[idx]) continue;
        bool interior = true;
        for (int dd = -1; dd <= 1 && interior; ++dd) {
          for (int dh = -1; dh <= 1 && interior; ++dh) {
            for (int dw = -1; dw <= 1 && interior; ++dw) {
              const long nd = static_cast<long>(d) + dd, nh = static_cast<long>(h) + dh,
                         nw = static_cast<long>(w) + dw;
              if (nd < 0 || nh < 0 || nw < 0 || nd >= static_cast<long>(e[0]) ||
                  nh >= static_cast<long>(e[1]) || nw >= static_cast<long>(e[2])) {
                continue;
              }
              if (!region[(static_cast<std::size_t>(nd) * e[1] + static_cast<std::size_t>(nh)) * e[2] +
                          static_cast<std::size_t>(nw)]) {
                interior = false;
              }
            }
          }
        }
        out[idx] = interior ? 1 : 0;
      }
    }
  }
  return out;
}

}  // namespace

std::string_view modality_name(Modality m) noexcept { return m == Modality::Mri ? "mri" : "ct"; }

Modality parse_modality(std::string_view name) {
  if (name == "mri") return Modality::Mri;
  if (name == "ct") return Modality::Ct;
  throw std::invalid_argument("unknown modality '" + std::string(name) + "' (expected mri or ct)");
}

void VolumeRecord::validate() const {
  if (channels == 0 || depth == 0 || height == 0 || width == 0) {
    throw ShapeError("volume record '" + id + "': empty extent");
  }
  if (image.size() != channels * voxels()) {
    throw ShapeError("volume record '" + id + "': image has " + std::to_string(image.size()) + " values, expected " +
                     std::to_string(channels * voxels()));
  }
  if (labels.batch != 1 || labels.depth != depth || labels.height != height || labels.width != width ||
      labels.values.size() != voxels()) {
    throw ShapeError("volume record '" + id + "': labels not congruent with the image");
  }
  if (classes == 0) throw std::out_of_range("volume record '" + id + "': class count must be >= 1");
  check_label_range(labels, classes);
}

Tensor VolumeRecord::image_tensor() const {
  validate();
  std::vector<double> v(image.begin(), image.end());
  return Tensor::from({1, channels, depth, height, width}, std::move(v));
}

// ---- phantoms --------------------------------------------------------------

void PhantomSpec::validate() const {
  for (std::size_t e : extent) {
    if (e == 0) throw std::invalid_argument("phantom spec: extent must be positive");
  }
  if (classes == 0) throw std::invalid_argument("phantom spec: classes must be >= 1");
  if (classes > 256) throw std::invalid_argument("phantom spec: at most 256 classes fit the label format");
  if (!(organ_radius_min > 0.0) || organ_radius_max < organ_radius_min) {
    throw std::invalid_argument("phantom spec: degenerate organ radii [" + std::to_string(organ_radius_min) + ", " +
                                std::to_string(organ_radius_max) + "]");
  }
  if (!(lesion_radius_min > 0.0) || lesion_radius_max < lesion_radius_min) {
    throw std::invalid_argument("phantom spec: degenerate lesion radii [" + std::to_string(lesion_radius_min) +
                                ", " + std::to_string(lesion_radius_max) + "]");
  }
  if (lesion_radius_max > organ_radius_max) {
    throw std::invalid_argument("phantom spec: lesions cannot be larger than organs");
  }
  if (classes >= 2) {
    if (organ_count == 0) throw std::invalid_argument("phantom spec: need at least one organ");
    for (std::size_t e : extent) {
      if (static_cast<double>(e) < 2.0 * organ_radius_max + 3.0) {
        throw std::invalid_argument("phantom spec: organ radius " + std::to_string(organ_radius_max) +
                                    " does not fit extent " + std::to_string(e));
      }
    }
  }
  if (!class_means.empty() && class_means.size() < classes) {
    throw std::invalid_argument("phantom spec: need one intensity mean per class");
  }
  if (noise_std < 0.0) throw std::invalid_argument("phantom spec: noise_std must be >= 0");
}

std::string PhantomSpec::to_text() const {
  nlohmann::ordered_json j;
  j["format"] = "egcnn-phantom";
  j["version"] = 1;
  j["extent"] = extent;
  j["classes"] = classes;
  j["modality"] = modality_name(modality);
  j["organ_count"] = organ_count;
  j["organ_radius"] = {organ_radius_min, organ_radius_max};
  j["lesion_count"] = lesion_count;
  j["lesion_radius"] = {lesion_radius_min, lesion_radius_max};
  j["class_means"] = class_means;
  j["noise_std"] = noise_std;
  j["seed"] = seed;
  return j.dump(2);
}

PhantomSpec PhantomSpec::from_text(const std::string& text) {
  PhantomSpec s;
  try {
    const auto j = nlohmann::json::parse(text);
    s.extent = j.value("extent", s.extent);
    s.classes = j.value("classes", s.classes);
    s.modality = parse_modality(j.value("modality", std::string("mri")));
    s.organ_count = j.value("organ_count", s.organ_count);
    if (j.contains("organ_radius")) {
      s.organ_radius_min = j.at("organ_radius").at(0).get<double>();
      s.organ_radius_max = j.at("organ_radius").at(1).get<double>();
    }
    s.lesion_count = j.value("lesion_count", s.lesion_count);
    if (j.contains("lesion_radius")) {
      s.lesion_radius_min = j.at("lesion_radius").at(0).get<double>();
      s.lesion_radius_max = j.at("lesion_radius").at(1).get<double>();
    }
    s.class_means = j.value("class_means", s.class_means);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

VolumeRecord generate_phantom(const PhantomSpec& spec, const std::string& id) {
  spec.validate();
  const auto& e = spec.extent;
  const std::size_t n = e[0] * e[1] * e[2];
  std::mt19937_64 rng(spec.seed);
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  std::vector<std::int32_t> labels(n, 0);
  std::vector<std::vector<Ellipsoid>> levels;  // levels[k-1] holds label k's ellipsoids
  std::vector<char> parent_region;
  for (std::size_t k = 1; k < spec.classes; ++k) {
    std::vector<Ellipsoid> shapes;
    if (k == 1) {
      for (std::size_t i = 0; i < spec.organ_count; ++i) {
        Ellipsoid el{};
        for (int a = 0; a < 3; ++a) {
          el.radius[a] = uniform(spec.organ_radius_min, spec.organ_radius_max);
          el.center[a] = uniform(el.radius[a] + 1.0, static_cast<double>(e[a]) - 2.0 - el.radius[a]);
        }
        shapes.push_back(el);
      }
    } else {
      const auto& parents = levels[k - 2];
      const double shrink = std::pow(0.6, static_cast<double>(k - 2));
      for (std::size_t i = 0; i < spec.lesion_count && !parents.empty(); ++i) {
        const Ellipsoid& parent = parents[static_cast<std::size_t>(uniform(0.0, 1.0) * parents.size()) %
                                          parents.size()];
        Ellipsoid el{};
        for (int a = 0; a < 3; ++a) {
          el.radius[a] = shrink * uniform(spec.lesion_radius_min, spec.lesion_radius_max);
          const double slack = std::max(0.0, 0.5 * (parent.radius[a] - el.radius[a]));
          el.center[a] = parent.center[a] + uniform(-slack, slack);
        }
        shapes.push_back(el);
      }
    }

    std::vector<char> region(n, 0);
    const std::vector<char> allowed = k == 1 ? std::vector<char>(n, 1) : erode(parent_region, e);
    for (std::size_t d = 0; d < e[0]; ++d) {
      for (std::size_t h = 0; h < e[1]; ++h) {
        for (std::size_t w = 0; w < e[2]; ++w) {
          const std::size_t idx = (d * e[1] + h) * e[2] + w;
          if (!allowed[idx]) continue;
          for (const auto& el : shapes) {
            if (el.contains(d, h, w)) {
              region[idx] = 1;
              break;
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (region[i]) labels[i] = static_cast<std::int32_t>(k);
    }
    levels.push_back(std::move(shapes));
    parent_region = std::move(region);
  }

  const std::vector<double> means = spec.class_means.empty() ? default_means(spec.modality, spec.classes)
                                                             : spec.class_means;
  const double outside = spec.modality == Modality::Mri ? 0.0 : -1000.0;
  const Ellipsoid body{{0.5 * (e[0] - 1.0), 0.5 * (e[1] - 1.0), 0.5 * (e[2] - 1.0)},
                       {0.48 * e[0], 0.48 * e[1], 0.48 * e[2]}};
  std::normal_distribution<double> noise(0.0, 1.0);

  VolumeRecord rec;
  rec.id = id;
  rec.modality = spec.modality;
  rec.channels = 1;
  rec.classes = spec.classes;
  rec.depth = e[0];
  rec.height = e[1];
  rec.width = e[2];
  rec.image.resize(n);
  for (std::size_t d = 0; d < e[0]; ++d) {
    for (std::size_t h = 0; h < e[1]; ++h) {
      for (std::size_t w = 0; w < e[2]; ++w) {
        const std::size_t idx = (d * e[1] + h) * e[2] + w;
        const std::int32_t lab = labels[idx];
        double v = outside;
        if (lab > 0 || body.contains(d, h, w)) v = means[static_cast<std::size_t>(lab)] + spec.noise_std * noise(rng);
        rec.image[idx] = static_cast<float>(v);
      }
    }
  }
  rec.labels = LabelVolume(1, e[0], e[1], e[2]);
  rec.labels.values = std::move(labels);
  return rec;
}

// ---- normalization ---------------------------------------------------------

Tensor normalize_mri(const Tensor& image) {
  auto v = image.data();
  double sum = 0.0;
  std::size_t count = 0;
  for (double x : v) {
    if (x != 0.0) {
      sum += x;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("normalize_mri: image has no non-zero voxels");
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (double x : v) {
    if (x != 0.0) ss += (x - mean) * (x - mean);
  }
  const double std_dev = std::sqrt(ss / static_cast<double>(count));
  if (!(std_dev > 0.0)) throw std::invalid_argument("normalize_mri: non-zero voxels have zero variance");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] == 0.0 ? 0.0 : (v[i] - mean) / std_dev;
  return Tensor::from(image.shape(), std::move(out));
}

Tensor normalize_ct(const Tensor& image) {
  auto v = image.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp(v[i] / 1000.0, -1.0, 1.0);
  return Tensor::from(image.shape(), std::move(out));
}

Tensor normalized_image(const VolumeRecord& record) {
  Tensor raw = record.image_tensor();
  return record.modality == Modality::Mri ? normalize_mri(raw) : normalize_ct(raw);
}

// ---- splitting -------------------------------------------------------------

SplitIndices split_indices(std::size_t count, double train_fraction, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("split_dataset: empty input");
  if (count < 2) throw std::invalid_argument("split_dataset: need at least 2 records");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split_dataset: train fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = count - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(count)));
  n_train = std::clamp<std::size_t>(n_train, 1, count - 1);
  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return out;
}

std::string_view split_name(Split s) noexcept { return s == Split::Train ? "train" : "val"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  throw std::invalid_argument("unknown split '" + std::string(name) + "' (expected train or val)");
}

// ---- manifest --------------------------------------------------------------

std::vector<Manifest::Entry> Manifest::select(Split split) const {
  std::vector<Entry> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

std::filesystem::path Manifest::resolve(const Entry& e) const {
  std::filesystem::path p(e.path);
  return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

std::string Manifest::to_text() const {
  nlohmann::ordered_json j;
  j["format"] = "egcnn-manifest";
  j["version"] = 1;
  j["records"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json r;
    r["id"] = e.id;
    r["path"] = e.path;
    r["split"] = split_name(e.split);
    j["records"].push_back(std::move(r));
  }
  return j.dump(2);
}

Manifest Manifest::from_text(const std::string& text, std::filesystem::path base_dir) {
  Manifest m;
  m.base_dir = std::move(base_dir);
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", std::string()) != "egcnn-manifest") {
      throw std::invalid_argument("manifest: missing format tag 'egcnn-manifest'");
    }
    for (const auto& r : j.at("records")) {
      m.entries.push_back({r.at("id").get<std::string>(), r.at("path").get<std::string>(),
                           parse_split(r.at("split").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("manifest: ") + e.what());
  }
  return m;
}

void Manifest::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("manifest: cannot write " + path.string());
  out << to_text() << '\n';
}

Manifest Manifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), path.parent_path());
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace egcnn::data
