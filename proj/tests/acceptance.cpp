// Acceptance harness: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "egcnn/data.hpp"
#include "egcnn/edges.hpp"
#include "egcnn/gradcheck.hpp"
#include "egcnn/kernels.hpp"
#include "egcnn/losses.hpp"
#include "egcnn/metrics.hpp"
#include "egcnn/nn.hpp"
#include "egcnn/ops.hpp"
#include "egcnn/train.hpp"
#include "egcnn/volume_io.hpp"
#include "support/dataset.hpp"
#include "support/oracles.hpp"

using namespace egcnn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

train::TrainOptions out_to(const fs::path& dir) {
  train::TrainOptions o;
  o.out_dir = dir;
  return o;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  const std::size_t n = numel(shape);
  return Tensor::from(std::move(shape), oracle::random_values(n, seed));
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

// ---- gradient suite --------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = gradcheck::run_suite();
  const double secs = seconds_since(t0);
  std::size_t failed = 0;
  double worst_ratio = 0.0;
  std::string worst_name;
  for (const auto& r : results) {
    if (!r.passed()) {
      ++failed;
      std::cerr << "  gradient check failed: " << r.module << "/" << r.name << " error " << r.error << " >= "
                << r.tolerance << "\n";
    }
    const double ratio = r.error / r.tolerance;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst_name = r.module + "/" + r.name;
    }
  }
  Outcome o;
  o.pass = failed == 0 && secs < 60.0 && !results.empty();
  o.detail = std::to_string(results.size()) + " checks, " + std::to_string(failed) + " failed, worst " + worst_name +
             " at " + fmt("%.3g", worst_ratio) + " of tolerance, " + fmt("%.1f", secs) + " s (limit 60 s)";
  return o;
}

// ---- oracle suite ----------------------------------------------------------

double conv_oracle_sweep(std::size_t& cases) {
  const kernels::Isa saved = kernels::active_isa();
  std::vector<kernels::Isa> isas{kernels::Isa::Scalar};
  if (kernels::avx2::available()) isas.push_back(kernels::Isa::Avx2);
  std::uint64_t seed = 1000;
  double worst = 0.0;
  for (auto isa : isas) {
    kernels::set_active_isa(isa);
    for (std::size_t d = 1; d <= 5; ++d)
      for (std::size_t h = 1; h <= 5; h += 2)
        for (std::size_t k = 1; k <= 3; ++k)
          for (std::size_t stride = 1; stride <= 2; ++stride)
            for (std::size_t pad = 0; pad <= 1; ++pad) {
              if (d + 2 * pad < k || h + 2 * pad < k) continue;
              const std::size_t c = 1 + (d % 2), f = 1 + (k % 3);
              const oracle::Dims5 xd{2, c, d, h, d}, kd{f, c, k, k, k};
              const Tensor x = random_tensor({xd.n, xd.c, xd.d, xd.h, xd.w}, ++seed);
              const Tensor w = random_tensor({kd.n, kd.c, kd.d, kd.h, kd.w}, ++seed);
              const Tensor b = random_tensor({f}, ++seed);
              const auto bias = values(b);
              const auto expect = oracle::conv3d(values(x), xd, values(w), kd, &bias, stride, pad);
              worst = std::max(worst, oracle::max_abs_diff(values(conv3d(x, w, b, stride, pad)), expect));
              ++cases;
            }
  }
  kernels::set_active_isa(saved);
  return worst;
}

double gate_oracle_sweep(std::size_t& cases) {
  std::uint64_t seed = 2000;
  double worst = 0.0;
  for (std::size_t ext = 1; ext <= 4; ++ext)
    for (std::size_t ce = 1; ce <= 3; ++ce)
      for (std::size_t cm = 1; cm <= 3; ++cm) {
        nn::Rng rng(++seed);
        nn::EdgeGatedLayer gate("g", ce, cm, 0, rng);
        for (Tensor* t : {&gate.proj_edge.weight, &gate.proj_main.weight, &gate.proj_edge.bias, &gate.proj_main.bias}) {
          const auto v = oracle::random_values(t->numel(), ++seed);
          std::copy(v.begin(), v.end(), t->mutable_data().begin());
        }
        const Tensor e = random_tensor({1, ce, ext, ext, ext}, ++seed);
        const Tensor m = random_tensor({1, cm, ext, ext, ext}, ++seed);
        const auto expect = oracle::gate(values(e), ce, values(m), cm, ext * ext * ext, values(gate.proj_edge.weight),
                                         gate.proj_edge.bias.at(0), values(gate.proj_main.weight),
                                         gate.proj_main.bias.at(0));
        worst = std::max(worst, oracle::max_abs_diff(values(gate.forward(e, m)), expect));
        ++cases;
      }
  return worst;
}

LabelVolume random_labels(std::size_t d, std::size_t h, std::size_t w, std::size_t classes, std::uint64_t seed) {
  LabelVolume l(1, d, h, w);
  std::mt19937_64 rng(seed);
  for (auto& v : l.values) v = static_cast<std::int32_t>(rng() % classes);
  return l;
}

double bce_oracle_sweep(std::size_t& cases) {
  std::uint64_t seed = 3000;
  double worst = 0.0;
  for (std::size_t e = 1; e <= 4; ++e)
    for (std::size_t k = 2; k <= 3; ++k) {
      const auto labels = random_labels(e, e, e, k, ++seed);
      const auto em = edges::edges_from_labels(labels, k);
      const auto logits = oracle::random_values(em.mask.numel(), ++seed, -4.0, 4.0);
      const double got = loss::balanced_bce(Tensor::from(em.mask.shape(), logits), em).item();
      worst = std::max(worst, std::abs(got - oracle::balanced_bce(logits, values(em.mask))));
      ++cases;
    }
  return worst;
}

double edges_oracle_sweep(std::size_t& cases) {
  std::uint64_t seed = 4000;
  double worst = 0.0;
  for (std::size_t d = 1; d <= 4; ++d)
    for (std::size_t h = 1; h <= 4; ++h)
      for (std::size_t w = 1; w <= 4; ++w)
        for (std::size_t k = 2; k <= 3; ++k) {
          const auto l = random_labels(d, h, w, k, ++seed);
          worst = std::max(worst, oracle::max_abs_diff(values(edges::edges_from_labels(l, k).mask),
                                                       oracle::edges(l.values, k, d, h, w)));
          ++cases;
        }
  return worst;
}

double composite_oracle_sweep(std::size_t& cases) {
  std::uint64_t seed = 5000;
  double worst = 0.0;
  for (std::size_t d = 1; d <= 4; ++d)
    for (std::size_t h = 1; h <= 4; ++h)
      for (std::size_t k = 3; k <= 4; ++k) {
        const auto p = random_labels(d, h, 4, k, ++seed);
        const auto t = random_labels(d, h, 4, k, ++seed);
        const auto got = metrics::composite_dice(p, t, k);
        const auto expect = oracle::composite(p.values, t.values);
        if (!got) return INFINITY;
        worst = std::max({worst, std::abs(got->organ - expect[0]), std::abs(got->lesion - expect[1]),
                          std::abs(got->composite - expect[2])});
        ++cases;
      }
  return worst;
}

Outcome oracle_suite() {
  struct Part {
    const char* name;
    std::function<double(std::size_t&)> run;
  };
  const std::vector<Part> parts = {{"conv3d", conv_oracle_sweep},
                                   {"edge_gated_forward", gate_oracle_sweep},
                                   {"balanced_bce", bce_oracle_sweep},
                                   {"edges_from_labels", edges_oracle_sweep},
                                   {"composite_dice", composite_oracle_sweep}};
  Outcome o;
  o.pass = true;
  for (const auto& p : parts) {
    std::size_t cases = 0;
    const double worst = p.run(cases);
    const bool ok = worst <= 1e-12 && cases > 0;
    o.pass = o.pass && ok;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += std::string(p.name) + " " + std::to_string(cases) + " cases max " + fmt("%.2g", worst);
  }
  return o;
}

// ---- loss identities -------------------------------------------------------

Outcome loss_identities() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  // Half overlap: 8 target voxels, prediction covers 4 of them.
  std::vector<double> t8(16, 0.0), p4(16, 0.0);
  for (std::size_t i = 0; i < 8; ++i) t8[i] = 1.0;
  for (std::size_t i = 0; i < 4; ++i) p4[i] = 1.0;
  const double half = loss::dice_loss(Tensor::from({1, 1, 16}, p4), Tensor::from({1, 1, 16}, t8)).item();
  expect(std::abs(half - 1.0 / 3.0) < 1e-4, "dice half-overlap " + fmt("%.6f", half));

  // Additivity of the total on a random prediction.
  LabelVolume labels(1, 4, 4, 4);
  for (std::size_t i = 0; i < labels.size(); ++i) labels.values[i] = static_cast<std::int32_t>((i * 7 / 5) % 3);
  const Tensor sem = random_tensor({1, 3, 4, 4, 4}, 77);
  const Tensor edge = random_tensor({1, 1, 4, 4, 4}, 78);
  const auto b = loss::total_loss(sem, edge, labels, {});
  expect(b.total.item() == (b.semantic.item() + b.consistency.item()) + b.edge.item(), "total additivity");

  double worst_consistency = 0.0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const std::size_t k = 2 + seed % 3;
    const auto l = random_labels(4, 4, 4, k, 90 + seed);
    worst_consistency = std::max(worst_consistency, std::abs(loss::consistency_loss(one_hot(l, k), l).item()));
  }
  expect(worst_consistency < 1e-10, "consistency of one-hot " + fmt("%.3g", worst_consistency));

  expect(train::lr_schedule(1e-4, 0, 200) == 1e-4, "lr at epoch 0");
  expect(train::lr_schedule(1e-4, 200, 200) == 0.0, "lr at the last epoch");
  const double mid = train::lr_schedule(1e-4, 100, 200);
  expect(std::abs(mid - 1e-4 * std::pow(0.5, 0.9)) < 1e-12, "lr midpoint");

  Outcome o;
  o.pass = failures.empty();
  o.detail = "dice half-overlap " + fmt("%.6f", half) + ", one-hot consistency max " + fmt("%.2g", worst_consistency) +
             ", lr midpoint " + fmt("%.10g", mid);
  for (const auto& f : failures) o.detail += "; failed: " + f;
  return o;
}

// ---- overfit ---------------------------------------------------------------

Outcome overfit(const fs::path& work) {
  const fs::path dir = work / "overfit";
  fs::remove_all(dir);
  const auto manifest = test::write_phantom_set(dir / "data", 4, 4, data::PhantomSpec{}, 2024);
  train::TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 2;
  cfg.seed = 1;
  cfg.manifest = manifest.string();
  cfg.model.seed = 1;
  const auto t0 = Clock::now();
  const auto r = train::train(cfg, out_to(dir / "run"));
  const double secs = seconds_since(t0);
  const auto& last = r.history.back();
  // Final-parameter Dice, evaluated without an update in between.
  const auto fin = train::evaluate(r.final_checkpoint, manifest, data::Split::Train);

  Outcome o;
  o.pass = fin.mean_foreground >= 0.90 && secs <= 600.0;
  std::ostringstream d;
  d << "mean foreground Dice " << fmt("%.4f", fin.mean_foreground) << " (need >= 0.90), class Dice [";
  for (std::size_t c = 0; c < fin.class_dice.size(); ++c) d << (c ? ", " : "") << fmt("%.3f", fin.class_dice[c]);
  d << "], last epoch train " << fmt("%.4f", last.mean_foreground) << ", " << fmt("%.0f", secs)
    << " s (limit 600 s)";
  o.detail = d.str();
  return o;
}

// ---- ablation --------------------------------------------------------------

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

Outcome ablation(const fs::path& work, std::size_t epochs) {
  const fs::path dir = work / "ablation";
  fs::remove_all(dir);
  const auto manifest = test::write_phantom_set(dir / "data", 30, 24, data::PhantomSpec{}, 4048);
  std::vector<double> with, without, edge;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (bool edge_stream : {true, false}) {
      train::TrainConfig cfg;
      cfg.epochs = epochs;
      cfg.batch_size = 2;
      cfg.seed = seed;
      cfg.manifest = manifest.string();
      cfg.model.seed = seed;
      cfg.model.edge_stream = edge_stream;
      const auto r = train::train(cfg, out_to(dir / ((edge_stream ? "eg_" : "base_") + std::to_string(seed))));
      if (!r.val) throw std::runtime_error("ablation: no validation record");
      (edge_stream ? with : without).push_back(r.val->mean_foreground);
      if (edge_stream) edge.push_back(r.val->edge_dice.value_or(0.0));
      std::cerr << "  ablation seed " << seed << (edge_stream ? " with" : " without") << " edge stream: val Dice "
                << r.val->mean_foreground << "\n";
    }
  }
  const double secs = seconds_since(t0);
  const auto [mw, sw] = mean_std(with);
  const auto [mo, so] = mean_std(without);
  const auto [me, se] = mean_std(edge);
  Outcome o;
  o.pass = mw >= mo - 0.01 && me >= 0.60 && secs <= 5400.0;
  o.detail = "val mean foreground Dice with " + fmt("%.4f", mw) + " +/- " + fmt("%.4f", sw) + ", without " +
             fmt("%.4f", mo) + " +/- " + fmt("%.4f", so) + " (need with >= without - 0.01); edge Dice " +
             fmt("%.4f", me) + " +/- " + fmt("%.4f", se) + " (need >= 0.60); improvement " +
             (mw > mo ? "observed" : "not observed") + "; " + std::to_string(epochs) + " epochs, " +
             fmt("%.0f", secs) + " s (limit 5400 s)";
  return o;
}

// ---- determinism -----------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + EGCNN_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

Outcome determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  data::PhantomSpec spec;
  spec.extent = {16, 16, 16};
  spec.organ_radius_min = 4.0;
  spec.organ_radius_max = 5.5;
  spec.lesion_radius_min = 1.5;
  spec.lesion_radius_max = 2.5;
  const auto manifest = test::write_phantom_set(dir / "data", 5, 4, spec, 77);
  train::TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 2;
  cfg.seed = 3;
  cfg.eval_every = 2;
  cfg.manifest = manifest.string();
  cfg.model.resolutions = 2;
  cfg.model.base_channels = 4;
  cfg.model.seed = 3;
  cfg.stochastic_consistency = true;
  write_file(dir / "train.json", cfg.to_text());

  const std::string config = "train --quiet --config " + quoted(dir / "train.json");
  int rc = run_cli(config + " --out " + quoted(dir / "a"));
  rc |= run_cli(config + " --out " + quoted(dir / "b"));
  rc |= run_cli(config + " --out " + quoted(dir / "c") + " --stop-after 2");
  rc |= run_cli(config + " --out " + quoted(dir / "c") + " --resume " + quoted(dir / "c" / "epoch_0002.egck"));

  const std::string ma = read_file(dir / "a" / "metrics.jsonl");
  const bool same_metrics = !ma.empty() && ma == read_file(dir / "b" / "metrics.jsonl");
  const std::string ca = read_file(dir / "a" / "final.egck");
  const bool same_ckpt = !ca.empty() && ca == read_file(dir / "b" / "final.egck");
  const bool resume_ckpt = !ca.empty() && ca == read_file(dir / "c" / "final.egck");
  const bool resume_metrics = ma == read_file(dir / "c" / "metrics.jsonl");

  Outcome o;
  o.pass = rc == 0 && same_metrics && same_ckpt && resume_ckpt && resume_metrics;
  o.detail = std::string("cli exit ") + (rc == 0 ? "ok" : "non-zero") + ", repeated metrics " +
             (same_metrics ? "identical" : "differ") + ", repeated checkpoint " + (same_ckpt ? "identical" : "differ") +
             ", resumed checkpoint " + (resume_ckpt ? "identical" : "differs") + ", resumed metrics " +
             (resume_metrics ? "identical" : "differ");
  return o;
}

// ---- format ----------------------------------------------------------------

std::vector<std::uint8_t> worked_example() {
  const std::string header =
      R"({"id":"ex","modality":"mri","spacing":[1.0,1.0,1.0],"C":1,"K":2,"D":2,"H":2,"W":2})";
  std::vector<std::uint8_t> b = {0x45, 0x47, 0x56, 0x31, 0x01, 0x00, 0x52, 0x00, 0x00, 0x00};
  b.insert(b.end(), header.begin(), header.end());
  const std::uint8_t image[32] = {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x80,
                                  0x3f, 0x00, 0x00, 0xc0, 0x3f, 0x00, 0x00, 0x00, 0xc0, 0x00, 0x00,
                                  0xc8, 0x42, 0x00, 0x00, 0x80, 0x3e, 0x00, 0x00, 0x40, 0xbf};
  b.insert(b.end(), std::begin(image), std::end(image));
  const std::uint8_t labels[8] = {0, 0, 0, 0, 1, 1, 0, 1};
  b.insert(b.end(), std::begin(labels), std::end(labels));
  return b;
}

Outcome format() {
  std::size_t trips = 0, identical = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    data::PhantomSpec spec;
    spec.extent = {12, 12, 12};
    spec.organ_radius_min = 3.0;
    spec.organ_radius_max = 4.0;
    spec.lesion_radius_min = 1.0;
    spec.lesion_radius_max = 2.0;
    spec.classes = 2 + seed % 3;
    spec.modality = seed % 2 ? data::Modality::Ct : data::Modality::Mri;
    spec.seed = seed;
    auto rec = data::generate_phantom(spec, "rt_" + std::to_string(seed));
    rec.spacing = {1.0 + 0.25 * static_cast<double>(seed), 0.8, 2.5};
    const auto bytes = data::encode_volume(rec);
    const auto back = data::decode_volume(bytes);
    ++trips;
    if (back == rec && data::encode_volume(back) == bytes) ++identical;
  }
  const auto bytes = worked_example();
  bool example = false;
  try {
    const auto r = data::decode_volume(bytes);
    example = bytes.size() == 132 && r.id == "ex" && r.modality == data::Modality::Mri && r.channels == 1 &&
              r.classes == 2 && r.depth == 2 && r.height == 2 && r.width == 2 &&
              r.image == std::vector<float>{0.0f, 0.5f, 1.0f, 1.5f, -2.0f, 100.0f, 0.25f, -0.75f} &&
              r.labels.values == std::vector<std::int32_t>{0, 0, 0, 0, 1, 1, 0, 1} && data::encode_volume(r) == bytes;
  } catch (const std::exception& e) {
    std::cerr << "  worked example: " << e.what() << "\n";
  }
  Outcome o;
  o.pass = identical == trips && example;
  o.detail = std::to_string(identical) + "/" + std::to_string(trips) + " round trips identical, worked example " +
             (example ? "parses exactly" : "mismatch");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria harness"};
  std::vector<std::string> only;
  std::string work = (fs::temp_directory_path() / "egcnn-acceptance").string();
  std::size_t ablation_epochs = 60;
  bool strict = false;
  app.add_option("--only", only, "Run only these criteria")
      ->check(CLI::IsMember({"gradient", "oracle", "loss", "overfit", "ablation", "determinism", "format"}));
  app.add_option("--work", work, "Scratch directory for datasets and runs")->capture_default_str();
  app.add_option("--ablation-epochs", ablation_epochs, "Epochs per ablation run")->capture_default_str();
  app.add_flag("--strict", strict, "Exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  const std::set<std::string> selected(only.begin(), only.end());
  auto wanted = [&](const std::string& key) { return selected.empty() || selected.count(key) > 0; };
  fs::create_directories(work);

  struct Criterion {
    std::string key;
    std::string title;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"gradient", "gradient suite", gradient_suite},
      {"oracle", "oracle suite", oracle_suite},
      {"loss", "loss identities", loss_identities},
      {"overfit", "overfit", [&] { return overfit(work); }},
      {"ablation", "ablation", [&] { return ablation(work, ablation_epochs); }},
      {"determinism", "determinism", [&] { return determinism(work); }},
      {"format", "format", format},
  };

  std::size_t failed = 0, errors = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.key)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
      ++errors;
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.title << ": " << o.detail << std::endl;
  }
  if (errors > 0) return 2;
  return strict && failed > 0 ? 1 : 0;
}
