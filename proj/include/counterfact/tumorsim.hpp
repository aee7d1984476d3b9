#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/dataset.hpp"
#include "counterfact/rng.hpp"

namespace cfx::tumorsim {

struct TruncatedNormalPrior {
  double mean = 0.0;
  double std = 1.0;
  double lo = -3.0;
  double hi = 3.0;

  // Prior truncated at mean +/- k std.
  static TruncatedNormalPrior symmetric(double mean, double std, double k = 3.0) {
    return {mean, std, mean - k * std, mean + k * std};
  }
  friend bool operator==(const TruncatedNormalPrior&, const TruncatedNormalPrior&) = default;
};

struct ComponentPrior {
  TruncatedNormalPrior rho;      // growth rate, 1/day
  TruncatedNormalPrior beta_c;   // chemo sensitivity, 1/concentration
  TruncatedNormalPrior alpha_r;  // radio linear coefficient, 1/Gy
  TruncatedNormalPrior beta_r;   // radio quadratic coefficient, 1/Gy^2
  friend bool operator==(const ComponentPrior&, const ComponentPrior&) = default;
};

struct PatientParams {
  double rho = 0.0;
  double K = 1.0;  // carrying capacity, cm^3
  double beta_c = 0.0;
  double alpha_r = 0.0;
  double beta_r = 0.0;
  int component = 0;
  friend bool operator==(const PatientParams&, const PatientParams&) = default;
};

struct SimCohortConfig {
  std::size_t n_patients = 1000;
  std::size_t horizon = 30;          // days
  double gamma = 0.0;                // confounding strength
  double d_max = 13.0;               // cm
  double noise_std = 0.01;
  double chemo_half_life = 1.0;      // days
  double chemo_dose = 5.0;           // concentration units
  double radio_dose = 2.0;           // Gy
  std::size_t lookback = 15;         // days in the diameter average
  double volume_floor = 1e-3;        // cm^3
  std::array<ComponentPrior, 3> components = default_components();
  std::array<double, 3> component_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  TruncatedNormalPrior initial_diameter{6.5, 4.0, 1.0, 12.5};  // cm
  std::uint64_t seed = 10;

  // Carrying capacity: the volume of a sphere of diameter d_max.
  double carrying_capacity() const;
  void validate() const;

  nlohmann::json to_json() const;
  static SimCohortConfig from_json(const nlohmann::json& j);

  static std::array<ComponentPrior, 3> default_components();
  friend bool operator==(const SimCohortConfig&, const SimCohortConfig&) = default;
};

struct ChemoState {
  double concentration = 0.0;
};

// Ground truth kept beside a simulated record so its counterfactuals can be re-rolled.
struct PatientTruth {
  PatientParams params;
  std::vector<double> noise;  // epsilon_t for t = 0 .. T-2
};

struct Cohort {
  SimCohortConfig config;
  Dataset dataset;
  std::vector<PatientTruth> truth;
};

PatientParams sample_patient_params(const SimCohortConfig& cfg, RngStream& stream);

// (1 + rho log(K/Y) - beta_c C - (alpha_r d + beta_r d^2) + eps) Y, floored at y_min.
double step_tumor(double volume, double concentration, double radio_gy, const PatientParams& p, double noise,
                  double y_min = 1e-3);

ChemoState decay_and_dose_chemo(ChemoState state, bool took_chemo, const SimCohortConfig& cfg);

double volume_to_diameter(double volume);
double diameter_to_volume(double diameter);

// Treatment probability from the mean of the trailing `lookback` diameters.
double treatment_probability(std::span<const double> diam_history, double gamma, double d_max,
                             std::size_t lookback);

struct Assignment {
  bool chemo = false;
  bool radio = false;
  double probability = 0.0;
};

Assignment assign_treatment(std::span<const double> diam_history, double gamma, double d_max, std::size_t lookback,
                            RngStream& stream);

// Record schema produced by the simulator; the chemo concentration is declared as a
// treatment-driven covariate using the config's half-life and dose.
Schema cohort_schema(const SimCohortConfig& cfg = {});

// Factual trajectories; patient i uses streams derived from (seed, i).
Cohort simulate_cohort(const SimCohortConfig& cfg);
// Single patient (exposed for per-patient parallel generation and tests).
std::pair<TrajectoryRecord, PatientTruth> simulate_patient(const SimCohortConfig& cfg, std::size_t index);

enum class NoiseMode { Common, Zero };

// Outcome trajectory Y_origin .. Y_{origin+tau-1} under `plan`, starting from the recorded state at
// step origin-1 (same origin convention as HistoryWindow). The record must be in raw units.
std::vector<double> counterfactual_oracle(const TrajectoryRecord& record, const PatientTruth& truth,
                                          std::size_t origin, const Tensor& plan, const SimCohortConfig& cfg,
                                          NoiseMode mode = NoiseMode::Common);

inline constexpr const char* kTruthFile = "truth.json";

// Dataset files plus truth sidecar; the manifest provenance embeds the full config.
void save_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort(const std::filesystem::path& dir);
bool has_truth(const std::filesystem::path& dir);

}  // namespace cfx::tumorsim
