#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "egcnn/tensor.hpp"

namespace egcnn::gradcheck {

inline constexpr double kTolerance = 1e-4;
// Straight-through consistency path checked through its relaxed forward.
inline constexpr double kSurrogateTolerance = 1e-3;

struct Options {
  double step = 1e-6;              // central-difference step
  std::size_t max_per_tensor = 0;  // 0 = every element; otherwise an evenly strided subset
  std::uint64_t seed = 0;          // weights projecting non-scalar outputs to a scalar
  double abs_floor = 1e-5;         // smallest denominator; covers exactly-zero gradients
};

/// Compares backward() against central differences for every leaf in `wrt`
/// (perturbed in place). Non-scalar outputs of f are reduced with fixed
/// random weights. Returns max |analytic - numeric| / max(|analytic|,
/// |numeric|) over the checked elements, with the denominator taken per
/// tensor as its largest magnitude, floored at options.abs_floor.
double max_relative_error(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                          const Options& options = {});

struct Result {
  std::string module;
  std::string name;
  double error = 0.0;
  double tolerance = kTolerance;
  double seconds = 0.0;
  bool passed() const noexcept { return error < tolerance; }
};

// Modules with finite-difference cases: tensor-core, nn-blocks, edge-ops, losses.
std::vector<std::string> module_names();

// Runs the cases of one module, or all modules when `module` is empty.
// Throws std::invalid_argument for an unknown module.
std::vector<Result> run_suite(const std::string& module = "");

}  // namespace egcnn::gradcheck
