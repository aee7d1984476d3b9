#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/model.hpp"
#include "counterfact/training.hpp"
#include "counterfact/tumorsim.hpp"

namespace cfx {

// Root mean squared error over aligned spans. Throws on empty or mismatched input.
double rmse(std::span<const double> pred, std::span<const double> target);

struct ClassificationMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  // Set when the metric's denominator was zero and it was reported as 0.
  bool precision_degenerate = false, recall_degenerate = false, f1_degenerate = false;

  nlohmann::json to_json() const;
};

// Labels must be 0 or 1.
ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> truth);

// Trapezoidal area under the ROC curve with tied scores grouped. Needs both classes.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Expected calibration error over `n_bins` equal-width bins on [0, 1]; a probability of
// exactly 1 falls in the last bin.
double ece(std::span<const double> probs, std::span<const int> labels, std::size_t n_bins = 10);

struct PairedTTest {
  double mean_difference = 0.0;
  double t = 0.0;
  std::size_t df = 0;
  double p_value = 1.0;  // two-sided
};

// Paired two-sided t-test on a - b. Needs at least two pairs; zero spread gives t = +-inf
// (p = 0) unless the mean difference is also zero (t = 0, p = 1).
PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b);

// RMSE per horizon step tau = 1..tau_max in outcome units, with the number of squared errors
// that went into each entry.
struct HorizonRmse {
  std::vector<double> rmse;
  std::vector<std::size_t> count;
};

// Rolling-origin factual evaluation: every origin in [t_min, T - tau_max] of every record is
// rolled out under the recorded treatments and compared with the recorded outcomes.
HorizonRmse factual_horizon_rmse(const Model& model, const PreparedSet& set, std::size_t tau_max,
                                 std::size_t t_min = 1, std::size_t origin_stride = 1);

// Simulator only: predictions under each plan against the oracle trajectory that reuses the
// patient's factual noise. `raw` holds raw records, `truth` the matching ground truth.
HorizonRmse counterfactual_horizon_rmse(const Model& model, const Dataset& raw,
                                        std::span<const tumorsim::PatientTruth> truth,
                                        const tumorsim::SimCohortConfig& sim, std::size_t tau_max,
                                        std::size_t t_min = 1, std::size_t origin_stride = 1,
                                        tumorsim::NoiseMode noise = tumorsim::NoiseMode::Common);

struct EvalReport {
  std::string label;                     // model or mode name, the CSV row key
  HorizonRmse factual;
  std::optional<double> one_step_rmse;   // teacher-forced, every transition (the training validation metric)
  std::optional<HorizonRmse> counterfactual;
  std::optional<ClassificationMetrics> classification;
  std::optional<double> auroc;
  std::optional<double> ece;
  std::uint64_t seed = 0;
  std::string config_digest;

  nlohmann::json to_json() const;
};

// Header "model,tau_1,...,tau_k" then one row per report (factual RMSE).
std::string horizon_rmse_csv(std::span<const EvalReport> reports);

struct ProbeConfig {
  std::size_t epochs = 300;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;   // sequences per step
  std::size_t hidden = 25;
  std::uint64_t seed = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

// Reconstruction of the per-step covariates and outcomes from a frozen encoder.
struct ProbeReport {
  std::vector<std::string> variables;    // covariate then outcome names
  std::vector<double> r2;                // validation R^2, 0 for constant variables
  std::vector<bool> constant;            // zero validation variance
  std::vector<double> train_loss, val_loss;  // masked MSE per epoch, normalized units
  std::string encoder_digest;

  nlohmann::json to_json() const;
};

// Trains a fresh probe decoder on `train_raw` and reports per-variable R^2 on `val_raw`.
// Only the decoder is updated; the model is read-only.
ProbeReport reconstruction_probe(const Model& model, const Dataset& train_raw, const Dataset& val_raw,
                                 const ProbeConfig& cfg,
                                 const std::function<void(std::size_t, double, double)>& on_epoch = {});

struct DeltaR2 {
  std::vector<std::string> variables;
  std::vector<double> delta;      // unbalanced minus balanced; 0 where excluded
  std::vector<bool> excluded;     // constant in either probe

  nlohmann::json to_json() const;
};

// Positive entries mean balancing lost information about the variable.
DeltaR2 delta_r2(const ProbeReport& unbalanced, const ProbeReport& balanced);

// SHA-256 over the encoder parameters.
std::string encoder_digest(const Model& model);

// One row per (patient, step): patient_id, t, B_1..B_D, treatments at t, statics.
std::string export_representations(const Model& model, const Dataset& raw);
void export_representations(const Model& model, const Dataset& raw, const std::filesystem::path& path);

}  // namespace cfx
