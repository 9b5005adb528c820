#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "saigformer/tensor.hpp"

namespace saig::gradcheck {

struct Options {
  /// Perturbation is step * max(1, |x|).
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Components sampled per leaf; every component when the leaf is smaller.
  size_t max_samples = 48;
  std::uint64_t seed = 7;
};

struct Result {
  std::string name;
  double max_rel_err = 0.0;
  size_t checked = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients of `sum(fn() * R)` (R a fixed random
/// projection) against central finite differences for every leaf.
///
/// The relative error of one component is |a - n| / max(|a|, |n|, floor),
/// where floor = 1e-3 times the largest numeric gradient magnitude of that
/// leaf (and at least 1e-10). Components whose true derivative is negligible
/// against the leaf's gradient scale are therefore compared absolutely.
Result check(const std::string& name, std::vector<Tensor<double>> leaves,
             const std::function<Tensor<double>()>& fn, const Options& options = {});

/// Test hook: when set, the given op's backward is perturbed so the suites can
/// demonstrate that a broken gradient is detected.
void set_corrupt_backward(bool corrupt);
bool corrupt_backward();

/// Known module names: tensor, sat, sai2e, blocks, network, train.
std::vector<std::string> modules();

/// Runs the finite-difference suite of one module (or "all").
std::vector<Result> run(const std::string& module, const Options& options = {});

}  // namespace saig::gradcheck
