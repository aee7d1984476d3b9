#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/dataset.hpp"
#include "counterfact/model.hpp"

namespace cfx {

// Encoded history up to (not including) `origin`, ready for autoregressive rollout.
struct RolloutContext {
  std::size_t origin = 0;
  Tensor inputs;                   // origin x input_width, normalized
  EncoderTape tape;                // encoder state after the history rows
};

// `record` in raw units; it is imputed and normalized with the model's statistics.
// origin defaults to the record length (forecast past the last observation).
RolloutContext make_context(const Model& model, const TrajectoryRecord& record, std::size_t origin = 0);
// `normalized` already imputed and normalized; `full_tape` may hold the encoding of at least
// `origin` rows of the same record, which is then reused instead of re-encoding.
RolloutContext make_context_normalized(const Model& model, const TrajectoryRecord& normalized, std::size_t origin,
                                       const EncoderTape* full_tape = nullptr);

void validate_plan(const Schema& schema, const TreatmentPlan& plan);

// Predicted Y_origin .. Y_{origin+tau-1} (tau x d_y). Plan row k is the treatment of step origin-1+k.
// Appended rows carry covariates and statics forward from the last history row, except outcome
// mirrors which take the prediction.
Tensor rollout_normalized(const Model& model, const RolloutContext& ctx, const TreatmentPlan& plan);
Tensor rollout(const Model& model, const RolloutContext& ctx, const TreatmentPlan& plan);  // outcome units

struct CounterfactualResult {
  std::size_t origin = 0;
  std::size_t horizon = 0;
  std::vector<std::string> outcome_names;
  std::vector<TreatmentPlan> plans;
  std::vector<Tensor> trajectories;  // per plan, tau x d_y in outcome units

  nlohmann::json to_json() const;
};

CounterfactualResult counterfactual_compare(const Model& model, const RolloutContext& ctx,
                                            const std::vector<TreatmentPlan>& plans);

// Midpoint Riemann-sum integrated gradients of a scalar function given its gradient.
std::vector<double> integrated_gradients(
    const std::function<std::vector<double>(std::span<const double>)>& gradient, std::span<const double> input,
    std::span<const double> baseline, std::size_t steps);

// Column mean over prediction steps, then softmax.
std::pair<std::vector<double>, std::vector<double>> aggregate_attribution(const Tensor& phi);

struct IgConfig {
  std::size_t steps = 64;
  std::size_t target = 0;  // outcome channel
};

inline constexpr std::size_t kIgVerificationSteps = 256;

struct AttributionReport {
  std::vector<std::string> input_names;
  Tensor phi;                     // tau x input_width, outcome units
  Tensor temporal;                // tau x origin, attribution summed over features per history row
  std::vector<double> omega_raw;
  std::vector<double> omega;
  std::vector<double> baseline;   // normalized, one value per input feature
  std::size_t steps = 0;
  std::size_t target = 0;
  std::string plan_label;
  // Completeness per prediction step: f(input), f(baseline), sum of phi.
  std::vector<double> f_input, f_baseline, phi_sum;

  // Worst relative completeness gap |sum phi - (f(x) - f(b))| / (|f(x) - f(b)| + 1e-12).
  double max_completeness_error() const;
  // Indices of the k largest omega, descending; ties by input order.
  std::vector<std::size_t> top_k(std::size_t k) const;
  nlohmann::json to_json(std::size_t top_k = 5, bool include_phi = false) const;
};

// Attributes every predicted step of `plan` to the history inputs. The path runs from a history
// whose rows all equal `baseline` (defaults to the model's stored cohort mean) to the actual one.
AttributionReport integrated_gradients(const Model& model, const RolloutContext& ctx, const TreatmentPlan& plan,
                                       const IgConfig& cfg, std::span<const double> baseline = {});

struct PreferenceWeights {
  double inside = 0.4;
  double stability = 0.2;
  double endpoint = 0.2;
  double intensity = 0.2;
};

// Integer percentages proportional to `weights` that sum to exactly 100 (largest remainder,
// ties to the lower index). All-zero weights give an even split.
std::vector<int> largest_remainder_percent(std::span<const double> weights);

// Raw heuristic scores per plan on outcome channel `target`.
std::vector<double> preference_scores(const CounterfactualResult& result, double lo, double hi,
                                      const PreferenceWeights& w = {}, std::size_t target = 0);

struct Explanation {
  std::array<std::string, 4> sections;  // context, influential variables, trajectories, preference
  std::vector<std::string> labels;
  std::vector<int> preference;          // percent, sums to 100

  std::string text() const;             // sections joined by blank lines
  nlohmann::json to_json() const;
};

// Deterministic template explanation. `history` is the raw record the context was built from.
Explanation template_explanation(const Model& model, const TrajectoryRecord& history,
                                 const CounterfactualResult& result, const AttributionReport& attribution,
                                 double lo, double hi, const PreferenceWeights& w = {}, std::size_t top_k = 5);

}  // namespace cfx
