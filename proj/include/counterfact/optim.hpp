#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "counterfact/tensor.hpp"

namespace cfx {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW style)
};

struct AdamState {
  AdamConfig config;
  ParamSet first_moment;
  ParamSet second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(const ParamSet& params, const AdamConfig& config);
};

// One bias-corrected Adam update. Mutates only `params` and `state`.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state);

// Rescales grads in place so their global L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_global_norm(ParamSet& grads, double max_norm);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t probes = 0;
};

// Compares `analytic` against central differences of `loss`. Relative error per scalar is
// |a - c| / (|a| + |c| + 1e-12); the maximum is returned.
GradCheckResult finite_diff_check(const std::function<double(const ParamSet&)>& loss, const ParamSet& params,
                                  const ParamSet& analytic, double epsilon = 1e-6);

}  // namespace cfx
