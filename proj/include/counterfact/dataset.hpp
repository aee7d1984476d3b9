#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/tensor.hpp"

namespace cfx {

struct OneHotGroup {
  std::string name;
  std::vector<std::size_t> columns;  // indices into the static covariates
  friend bool operator==(const OneHotGroup&, const OneHotGroup&) = default;
};

// A covariate that follows its treatment deterministically: x_{t+1} = decay * x_t + dose * a_t
// (raw units). Rollout advances it with this rule instead of carrying it forward.
struct CovariateDynamics {
  std::size_t x = 0;
  std::size_t treatment = 0;
  double decay = 1.0;
  double dose = 0.0;
  friend bool operator==(const CovariateDynamics&, const CovariateDynamics&) = default;
};

// Column layout shared by every record of a dataset.
struct Schema {
  std::vector<std::string> x_names;
  std::vector<std::string> a_names;
  std::vector<std::string> y_names;
  std::vector<std::string> v_names;
  std::vector<std::string> x_units;
  std::vector<std::string> y_units;
  std::vector<std::string> v_units;
  std::vector<OneHotGroup> onehot_groups;
  // (x index, y index): covariates that restate an outcome. During rollout they take the predicted value.
  std::vector<std::pair<std::size_t, std::size_t>> outcome_mirrors;
  std::vector<CovariateDynamics> covariate_dynamics;

  std::size_t d_x() const noexcept { return x_names.size(); }
  std::size_t d_a() const noexcept { return a_names.size(); }
  std::size_t d_y() const noexcept { return y_names.size(); }
  std::size_t d_v() const noexcept { return v_names.size(); }
  // Encoder input width: X + Y + V + previous A.
  std::size_t input_width() const noexcept { return d_x() + d_y() + d_v() + d_a(); }
  std::vector<std::string> input_names() const;
  bool is_onehot_column(std::size_t v_index) const noexcept;

  void validate() const;
  nlohmann::json to_json() const;
  static Schema from_json(const nlohmann::json& j);

  friend bool operator==(const Schema&, const Schema&) = default;
};

// One patient: statics plus aligned per-step covariates, treatments and outcomes.
struct TrajectoryRecord {
  std::string patient_id;
  std::vector<double> statics;         // d_v
  Tensor x;                            // T x d_x
  Tensor a;                            // T x d_a, entries in {0,1}
  Tensor y;                            // T x d_y
  std::vector<std::uint8_t> observed;  // T x d_x, 1 when the covariate was measured

  std::size_t length() const noexcept { return a.rank() == 2 ? a.dim(0) : 0; }
  void validate(const Schema& schema) const;
  friend bool operator==(const TrajectoryRecord&, const TrajectoryRecord&) = default;
};

// Per-feature z-score statistics. One-hot statics keep mean 0 / std 1.
struct NormalizationStats {
  std::vector<double> x_mean, x_std;
  std::vector<double> y_mean, y_std;
  std::vector<double> v_mean, v_std;

  nlohmann::json to_json() const;
  static NormalizationStats from_json(const nlohmann::json& j);
  friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

struct Dataset {
  Schema schema;
  std::vector<TrajectoryRecord> records;
  std::optional<NormalizationStats> stats;  // present iff the records are normalized
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const noexcept { return records.size(); }
  void validate() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// A treatment sequence applied from some origin onward.
struct TreatmentPlan {
  std::string label;
  Tensor steps;  // tau x d_a, entries in {0,1}

  std::size_t horizon() const noexcept { return steps.rank() == 2 ? steps.dim(0) : 0; }
  static TreatmentPlan constant(std::string label, std::vector<double> assignment, std::size_t horizon);
};

// "None", one plan per single treatment, and "Both" (all treatments) for a two-treatment schema;
// in general: none, each single channel, all channels.
std::vector<TreatmentPlan> default_plans(const Schema& schema, std::size_t horizon);

inline constexpr const char* kFormatVersion = "1";
inline constexpr const char* kTrajectoryFile = "trajectories.csv";
inline constexpr const char* kManifestFile = "manifest.json";

// Trajectory CSV + manifest JSON inside `dir`.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Lower-level CSV access (used by the service for inline histories).
std::string write_trajectory_csv(const Dataset& ds);
std::vector<TrajectoryRecord> parse_trajectory_csv(const std::string& text, const Schema& schema);
// Derives a schema from a CSV header (column prefixes x_, a_, y_, v_).
Schema schema_from_header(const std::string& header_line);

std::string format_double(double v);

}  // namespace cfx
