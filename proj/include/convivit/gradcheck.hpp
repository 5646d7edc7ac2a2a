#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "convivit/model.hpp"
#include "convivit/tensor.hpp"

namespace convivit {

/// A loss available two ways: on the tape (analytic gradients) and as a
/// 64-bit value without the tape (finite differences).
struct Objective {
  std::function<Tensor()> forward;
  std::function<double()> evaluate;
};

/// sum(w * f()) for fixed random weights w in [-1, 1].
Objective weighted_sum_objective(std::function<Tensor()> f, const Shape& output_shape,
                                 std::uint64_t seed);

struct GradCheckConfig {
  double epsilon = 1e-3;
  double tolerance = 1e-2;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double magnitude_floor = 1e-2;
  /// Entries sampled per tensor; tensors at most this large are checked fully.
  std::int64_t samples_per_tensor = 4;
  std::uint64_t seed = 0;
};

struct GradCheckGroup {
  std::string group;
  std::int64_t checked = 0;
  double max_rel_error = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  std::int64_t checked = 0;
  double max_rel_error = 0.0;
  bool passed() const;
  std::string to_text() const;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

double relative_error(double analytic, double numeric, double floor);

/// Central differences against the tape's gradients, grouped by
/// ParameterStore::group_of(name). Tensors are perturbed in place and restored.
GradCheckReport grad_check(const Objective& objective, std::vector<NamedTensor> params,
                           const GradCheckConfig& config);

/// Whole-model check with a cross-entropy objective on a random batch.
GradCheckReport grad_check_model(ConViViT& model, const Tensor& clips,
                                 const std::vector<std::int64_t>& labels,
                                 const GradCheckConfig& config);

/// Smallest configuration the gradient suite runs on (T=2, 16x16, D=16, depth 1).
ModelConfig micro_model_config(Variant variant);

}  // namespace convivit
