#include "counterfact/optim.hpp"

#include <cmath>

namespace cfx {

AdamState AdamState::for_params(const ParamSet& params, const AdamConfig& config) {
  if (!(config.learning_rate > 0.0)) throw ConfigError("Adam learning rate must be positive");
  AdamState state;
  state.config = config;
  state.first_moment = params.zeros_like();
  state.second_moment = params.zeros_like();
  return state;
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state) {
  if (!params.same_structure(grads)) throw ShapeError("adam_step: gradient shapes do not match parameters");
  if (!params.same_structure(state.first_moment) || !params.same_structure(state.second_moment)) {
    throw ShapeError("adam_step: optimizer moments do not match parameters");
  }
  const AdamConfig& c = state.config;
  if (!(c.learning_rate > 0.0)) throw ConfigError("Adam learning rate must be positive");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t p = 0; p < params.count(); ++p) {
    auto w = params[p].data();
    auto g = grads[p].data();
    auto m = state.first_moment[p].data();
    auto v = state.second_moment[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.learning_rate * (mhat / (std::sqrt(vhat) + c.epsilon) + c.weight_decay * w[i]);
    }
  }
}

double clip_global_norm(ParamSet& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm && norm > 0.0) grads *= max_norm / norm;
  return norm;
}

GradCheckResult finite_diff_check(const std::function<double(const ParamSet&)>& loss, const ParamSet& params,
                                  const ParamSet& analytic, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw ConfigError("finite_diff_check epsilon must lie in [1e-7, 1e-3]");
  }
  if (!params.same_structure(analytic)) throw ShapeError("finite_diff_check: analytic gradient shape mismatch");

  GradCheckResult result;
  ParamSet probe = params;
  for (std::size_t p = 0; p < probe.count(); ++p) {
    auto w = probe[p].data();
    const auto a = analytic[p].data();
    const std::string& name = probe.entries()[p].name;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double original = w[i];
      w[i] = original + epsilon;
      const double up = loss(probe);
      w[i] = original - epsilon;
      const double down = loss(probe);
      w[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("non-finite loss while probing " + name + "[" + std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double rel = std::abs(a[i] - numeric) / (std::abs(a[i]) + std::abs(numeric) + 1e-12);
      ++result.probes;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = name;
        result.worst_index = i;
        result.analytic = a[i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace cfx
