#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/dataset.hpp"
#include "counterfact/rng.hpp"

namespace cfx {

// Forward fill, then backward fill leading gaps. The observation mask is kept for audit.
TrajectoryRecord impute_locf_nocb(const TrajectoryRecord& record, const Schema& schema);
Dataset impute_dataset(const Dataset& ds);

// Population mean/std over the training corpus; zero std is replaced by 1.
NormalizationStats zscore_fit(const Dataset& train);
Dataset zscore_apply(const Dataset& ds, const NormalizationStats& stats);
Dataset zscore_invert(const Dataset& ds);
TrajectoryRecord normalize_record(const TrajectoryRecord& r, const Schema& schema, const NormalizationStats& stats);

inline double denormalize_outcome(double z, const NormalizationStats& s, std::size_t j) {
  return z * s.y_std[j] + s.y_mean[j];
}
inline double normalize_outcome(double v, const NormalizationStats& s, std::size_t j) {
  return (v - s.y_mean[j]) / s.y_std[j];
}

// Forecast origin: the first `origin` steps are history; targets are steps origin .. origin + tau_max - 1.
struct HistoryWindow {
  std::size_t record = 0;
  std::size_t origin = 0;
  std::size_t tau_max = 0;
  friend bool operator==(const HistoryWindow&, const HistoryWindow&) = default;
};

// One window per origin in [t_min, T - tau_max]. Empty when T <= tau_max.
std::vector<HistoryWindow> rolling_origin_windows(const TrajectoryRecord& record, std::size_t record_index,
                                                  std::size_t tau_max, std::size_t t_min = 1);
std::vector<HistoryWindow> rolling_origin_windows(const Dataset& ds, std::size_t tau_max, std::size_t t_min = 1);

// Encoder input rows for steps [0, length): X_t, Y_t, V, A_{t-1} (zero at t = 0).
Tensor encoder_inputs(const TrajectoryRecord& record, const Schema& schema, std::size_t length);
Tensor encoder_inputs(const TrajectoryRecord& record, const Schema& schema);

struct Splits {
  Dataset train, val, test;
};

// Patient-level partition after a seeded shuffle. Ratios must sum to 1.
Splits split_patients(const Dataset& ds, const std::vector<double>& ratios, RngStream& stream);

struct ArmSupport {
  std::vector<int> assignment;  // joint treatment tuple
  std::size_t steps = 0;
  double fraction = 0.0;
  bool zero_support = false;
  bool below_minimum = false;
};

struct PositivityReport {
  std::vector<ArmSupport> arms;  // all 2^d_a joint arms, or empty for an empty dataset
  std::vector<std::size_t> channel_positive;
  std::size_t total_steps = 0;
  double min_fraction = 0.0;
  bool ok() const noexcept;
  nlohmann::json to_json() const;
};

PositivityReport positivity_check(const Dataset& ds, double min_fraction = 0.01);

}  // namespace cfx
