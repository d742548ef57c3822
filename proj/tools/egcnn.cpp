// egcnn command-line interface: phantom generation, training, evaluation,
// prediction and finite-difference gradient checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>

#include "CLI11.hpp"
#include "egcnn/data.hpp"
#include "egcnn/gradcheck.hpp"
#include "egcnn/kernels.hpp"
#include "egcnn/train.hpp"
#include "egcnn/volume_io.hpp"

namespace fs = std::filesystem;
using namespace egcnn;

namespace {

struct GenArgs {
  std::size_t count = 10;
  std::size_t extent = 32;
  std::size_t classes = 3;
  std::uint64_t seed = 0;
  std::string modality = "mri";
  double train_fraction = 0.8;
  std::string spec;
  std::string out;
};

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

int run_gen(const GenArgs& a) {
  data::PhantomSpec base;
  if (!a.spec.empty()) {
    // The spec file fixes extent, classes, modality and radii as written.
    base = data::PhantomSpec::from_text(read_text(a.spec));
  } else {
    base.extent = {a.extent, a.extent, a.extent};
    base.classes = a.classes;
    base.modality = data::parse_modality(a.modality);
    const double s = static_cast<double>(a.extent) / 32.0;
    base.organ_radius_min *= s;
    base.organ_radius_max *= s;
    base.lesion_radius_min *= s;
    base.lesion_radius_max *= s;
  }
  base.seed = a.seed;
  base.validate();

  fs::create_directories(a.out);
  {
    std::ofstream spec_out(fs::path(a.out) / "phantom.json");
    spec_out << base.to_text() << '\n';
  }
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < a.count; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%03zu", i);
    data::PhantomSpec spec = base;
    spec.seed = data::derive_seed(a.seed, i);
    data::save_volume(data::generate_phantom(spec, id), fs::path(a.out) / (std::string(id) + ".egv1"));
    ids.push_back(id);
  }
  data::Manifest manifest;
  if (a.count >= 2 && a.train_fraction < 1.0) {
    const auto split = data::split_indices(a.count, a.train_fraction, a.seed);
    for (std::size_t i : split.train) manifest.entries.push_back({ids[i], ids[i] + ".egv1", data::Split::Train});
    for (std::size_t i : split.val) manifest.entries.push_back({ids[i], ids[i] + ".egv1", data::Split::Val});
  } else {
    for (const auto& id : ids) manifest.entries.push_back({id, id + ".egv1", data::Split::Train});
  }
  manifest.save(fs::path(a.out) / "manifest.json");
  std::cout << "wrote " << a.count << " phantoms and manifest.json to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string out;
  bool no_edge_stream = false;
  std::string resume;
  std::size_t stop_after = 0;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  train::TrainConfig cfg = train::TrainConfig::load(a.config);
  if (a.no_edge_stream) cfg.model.edge_stream = false;
  train::TrainOptions opt;
  opt.out_dir = a.out;
  if (!a.resume.empty()) opt.resume = a.resume;
  if (a.stop_after > 0) opt.stop_after = a.stop_after;
  if (!a.quiet) opt.log = &std::cerr;
  const auto result = train::train(cfg, opt);
  if (!result.history.empty()) std::cout << result.history.back().to_json_line() << '\n';
  if (result.val) std::cout << result.val->to_json_line() << '\n';
  std::cout << "checkpoint " << result.final_checkpoint.string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "val";
  std::string out;
};

int run_eval(const EvalArgs& a) {
  const auto split = data::parse_split(a.split);
  const auto rec = train::evaluate(a.checkpoint, a.manifest, split);
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / ("eval_" + a.split + ".jsonl")
                                     : fs::path(a.out);
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out.string());
  f << rec.to_json_line() << '\n';
  std::cout << rec.to_json_line() << '\n';
  return 0;
}

int run_predict(const std::string& checkpoint, const std::string& input, const std::string& out) {
  const auto paths = train::predict(checkpoint, input, out);
  std::cout << paths.labels.string() << '\n' << paths.edge_probability.string() << '\n' << paths.render.string() << '\n';
  return 0;
}

int run_gradcheck(const std::string& module) {
  const auto results = gradcheck::run_suite(module);
  bool ok = true;
  double total = 0.0;
  for (const auto& r : results) {
    std::printf("%-4s %-12s %-40s rel-err %.3e (tol %.0e) %.2f s\n", r.passed() ? "PASS" : "FAIL", r.module.c_str(),
                r.name.c_str(), r.error, r.tolerance, r.seconds);
    ok = ok && r.passed();
    total += r.seconds;
  }
  std::printf("%zu checks, %s, %.2f s\n", results.size(), ok ? "all passed" : "FAILURES", total);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edge-gated volumetric segmentation toolkit"};
  app.require_subcommand(1);
  std::string isa = "auto";
  app.add_option("--isa", isa, "Convolution kernels: auto, scalar or avx2")
      ->check(CLI::IsMember({"auto", "scalar", "avx2"}));

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate synthetic phantoms and a manifest");
  gen_cmd->add_option("--count", gen.count, "Number of phantoms")->required();
  gen_cmd->add_option("--extent", gen.extent, "Cubic extent in voxels")->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes, "Class count K")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  gen_cmd->add_option("--modality", gen.modality, "mri or ct")->capture_default_str();
  gen_cmd->add_option("--train-fraction", gen.train_fraction, "Train share of the split (1 = everything in train)")->capture_default_str();
  gen_cmd->add_option("--spec", gen.spec, "Phantom spec file; replaces --extent, --classes and --modality")
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", tr.config, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_flag("--no-edge-stream", tr.no_edge_stream, "Train the backbone alone");
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--stop-after", tr.stop_after, "Checkpoint and stop after this epoch");
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch progress on stderr");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--manifest", ev.manifest)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val"}))->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Metrics file (default: next to the checkpoint)");

  std::string pred_ckpt, pred_input, pred_out;
  auto* pred_cmd = app.add_subcommand("predict", "Predict labels and edges for one volume");
  pred_cmd->add_option("--checkpoint", pred_ckpt)->required()->check(CLI::ExistingFile);
  pred_cmd->add_option("--input", pred_input)->required()->check(CLI::ExistingFile);
  pred_cmd->add_option("--out", pred_out)->required();

  std::string module;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suites");
  grad_cmd->add_option("--module", module, "tensor-core, nn-blocks, edge-ops or losses");

  CLI11_PARSE(app, argc, argv);

  try {
    if (isa == "scalar") kernels::set_active_isa(kernels::Isa::Scalar);
    if (isa == "avx2") kernels::set_active_isa(kernels::Isa::Avx2);
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*pred_cmd) return run_predict(pred_ckpt, pred_input, pred_out);
    if (*grad_cmd) return run_gradcheck(module);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
