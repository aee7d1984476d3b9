#include "counterfact/tumorsim.hpp"

#include <cmath>
#include <numbers>

#include "counterfact/fileutil.hpp"

namespace cfx::tumorsim {

using nlohmann::json;

namespace {

json prior_to_json(const TruncatedNormalPrior& p) {
  return {{"mean", p.mean}, {"std", p.std}, {"lo", p.lo}, {"hi", p.hi}};
}

TruncatedNormalPrior prior_from_json(const json& j) {
  return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("lo").get<double>(), j.at("hi").get<double>()};
}

void validate_prior(const TruncatedNormalPrior& p, const std::string& what) {
  if (!(p.std > 0.0) || !(p.lo < p.hi) || !std::isfinite(p.lo) || !std::isfinite(p.hi)) {
    throw ConfigError("degenerate prior for " + what);
  }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

std::array<ComponentPrior, 3> SimCohortConfig::default_components() {
  // Three response phenotypes: baseline, chemo-sensitive, radio-sensitive.
  // Defaults for this implementation, not published values.
  const auto rho = TruncatedNormalPrior::symmetric(0.03, 0.005);
  const auto beta_c = TruncatedNormalPrior::symmetric(0.005, 0.001);
  const auto alpha_r = TruncatedNormalPrior::symmetric(0.015, 0.003);
  const auto beta_r = TruncatedNormalPrior::symmetric(0.0015, 0.0003);
  return {ComponentPrior{rho, beta_c, alpha_r, beta_r},
          ComponentPrior{rho, TruncatedNormalPrior::symmetric(0.0075, 0.0015), alpha_r, beta_r},
          ComponentPrior{rho, beta_c, TruncatedNormalPrior::symmetric(0.0225, 0.0045),
                         TruncatedNormalPrior::symmetric(0.00225, 0.00045)}};
}

double SimCohortConfig::carrying_capacity() const { return diameter_to_volume(d_max); }

void SimCohortConfig::validate() const {
  if (gamma < 0.0) throw ConfigError("gamma must be >= 0");
  if (!(d_max > 0.0)) throw ConfigError("d_max must be > 0");
  if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
  if (lookback < 1) throw ConfigError("lookback must be >= 1");
  if (horizon < 2) throw ConfigError("horizon must be >= 2");
  if (!(chemo_half_life > 0.0)) throw ConfigError("chemo_half_life must be > 0");
  if (chemo_dose < 0.0 || radio_dose < 0.0) throw ConfigError("doses must be >= 0");
  if (!(volume_floor > 0.0)) throw ConfigError("volume_floor must be > 0");
  double wsum = 0.0;
  for (double w : component_weights) {
    if (w < 0.0) throw ConfigError("component weights must be >= 0");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw ConfigError("component weights must not all be zero");
  for (std::size_t c = 0; c < components.size(); ++c) {
    const auto tag = "component " + std::to_string(c) + " ";
    validate_prior(components[c].rho, tag + "rho");
    validate_prior(components[c].beta_c, tag + "beta_c");
    validate_prior(components[c].alpha_r, tag + "alpha_r");
    validate_prior(components[c].beta_r, tag + "beta_r");
    if (components[c].beta_c.lo <= 0.0 || components[c].alpha_r.lo <= 0.0 || components[c].beta_r.lo <= 0.0) {
      throw ConfigError(tag + "sensitivity priors must be truncated above zero");
    }
  }
  validate_prior(initial_diameter, "initial_diameter");
  if (initial_diameter.lo <= 0.0) throw ConfigError("initial_diameter must be truncated above zero");
}

json SimCohortConfig::to_json() const {
  json comps = json::array();
  for (const auto& c : components) {
    comps.push_back({{"rho", prior_to_json(c.rho)},
                     {"beta_c", prior_to_json(c.beta_c)},
                     {"alpha_r", prior_to_json(c.alpha_r)},
                     {"beta_r", prior_to_json(c.beta_r)}});
  }
  return {{"n_patients", n_patients},
          {"horizon", horizon},
          {"gamma", gamma},
          {"d_max", d_max},
          {"noise_std", noise_std},
          {"chemo_half_life", chemo_half_life},
          {"chemo_dose", chemo_dose},
          {"radio_dose", radio_dose},
          {"lookback", lookback},
          {"volume_floor", volume_floor},
          {"components", comps},
          {"component_weights", component_weights},
          {"initial_diameter", prior_to_json(initial_diameter)},
          {"seed", seed}};
}

SimCohortConfig SimCohortConfig::from_json(const json& j) {
  SimCohortConfig c;
  static const std::vector<std::string> known = {
      "n_patients",   "horizon",  "gamma",      "d_max",       "noise_std",         "chemo_half_life",
      "chemo_dose",   "radio_dose", "lookback", "volume_floor", "components",       "component_weights",
      "initial_diameter", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown simulate key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("n_patients", c.n_patients);
  get("horizon", c.horizon);
  get("gamma", c.gamma);
  get("d_max", c.d_max);
  get("noise_std", c.noise_std);
  get("chemo_half_life", c.chemo_half_life);
  get("chemo_dose", c.chemo_dose);
  get("radio_dose", c.radio_dose);
  get("lookback", c.lookback);
  get("volume_floor", c.volume_floor);
  get("seed", c.seed);
  if (j.contains("component_weights")) {
    auto w = j.at("component_weights").get<std::vector<double>>();
    if (w.size() != 3) throw ConfigError("component_weights needs three entries");
    std::copy(w.begin(), w.end(), c.component_weights.begin());
  }
  if (j.contains("components")) {
    const auto& arr = j.at("components");
    if (!arr.is_array() || arr.size() != 3) throw ConfigError("components needs three entries");
    for (std::size_t i = 0; i < 3; ++i) {
      c.components[i] = {prior_from_json(arr[i].at("rho")), prior_from_json(arr[i].at("beta_c")),
                         prior_from_json(arr[i].at("alpha_r")), prior_from_json(arr[i].at("beta_r"))};
    }
  }
  if (j.contains("initial_diameter")) c.initial_diameter = prior_from_json(j.at("initial_diameter"));
  c.validate();
  return c;
}

PatientParams sample_patient_params(const SimCohortConfig& cfg, RngStream& stream) {
  double wsum = 0.0;
  for (double w : cfg.component_weights) wsum += w;
  double u = stream.uniform() * wsum;
  int comp = 2;
  for (int c = 0; c < 3; ++c) {
    if (u < cfg.component_weights[c]) {
      comp = c;
      break;
    }
    u -= cfg.component_weights[c];
  }
  const ComponentPrior& pr = cfg.components[comp];
  auto draw = [&](const TruncatedNormalPrior& p) { return truncated_normal(stream, p.mean, p.std, p.lo, p.hi); };
  PatientParams p;
  p.component = comp;
  p.K = cfg.carrying_capacity();
  p.rho = draw(pr.rho);
  p.beta_c = draw(pr.beta_c);
  p.alpha_r = draw(pr.alpha_r);
  p.beta_r = draw(pr.beta_r);
  return p;
}

double step_tumor(double volume, double concentration, double radio_gy, const PatientParams& p, double noise,
                  double y_min) {
  if (!(volume > 0.0)) throw NumericError("step_tumor requires a positive volume");
  const double factor = 1.0 + p.rho * std::log(p.K / volume) - p.beta_c * concentration -
                        (p.alpha_r * radio_gy + p.beta_r * radio_gy * radio_gy) + noise;
  const double next = factor * volume;
  if (!std::isfinite(next)) throw NumericError("step_tumor produced a non-finite volume");
  return std::max(next, y_min);
}

ChemoState decay_and_dose_chemo(ChemoState state, bool took_chemo, const SimCohortConfig& cfg) {
  const double decay = std::exp2(-1.0 / cfg.chemo_half_life);
  return {state.concentration * decay + (took_chemo ? cfg.chemo_dose : 0.0)};
}

double volume_to_diameter(double volume) {
  if (volume < 0.0) throw NumericError("negative volume");
  return std::cbrt(6.0 * volume / std::numbers::pi);
}

double diameter_to_volume(double diameter) { return std::numbers::pi / 6.0 * diameter * diameter * diameter; }

double treatment_probability(std::span<const double> diam_history, double gamma, double d_max,
                             std::size_t lookback) {
  if (diam_history.empty()) throw ShapeError("diameter history must not be empty");
  const std::size_t n = std::min(lookback, diam_history.size());
  double mean = 0.0;
  for (std::size_t i = diam_history.size() - n; i < diam_history.size(); ++i) mean += diam_history[i];
  mean /= static_cast<double>(n);
  return sigmoid(gamma / d_max * (mean - d_max / 2.0));
}

Assignment assign_treatment(std::span<const double> diam_history, double gamma, double d_max, std::size_t lookback,
                            RngStream& stream) {
  Assignment a;
  a.probability = treatment_probability(diam_history, gamma, d_max, lookback);
  a.chemo = stream.bernoulli(a.probability);
  a.radio = stream.bernoulli(a.probability);
  return a;
}

Schema cohort_schema(const SimCohortConfig& cfg) {
  Schema s;
  s.x_names = {"volume", "chemo_concentration"};
  s.x_units = {"cm3", "concentration"};
  s.a_names = {"chemo", "radio"};
  s.y_names = {"volume"};
  s.y_units = {"cm3"};
  s.v_names = {"component_0", "component_1", "component_2"};
  s.v_units = {"indicator", "indicator", "indicator"};
  s.onehot_groups = {{"component", {0, 1, 2}}};
  s.outcome_mirrors = {{0, 0}};
  s.covariate_dynamics = {{1, 0, std::exp2(-1.0 / cfg.chemo_half_life), cfg.chemo_dose}};
  return s;
}

std::pair<TrajectoryRecord, PatientTruth> simulate_patient(const SimCohortConfig& cfg, std::size_t index) {
  const RngStream patient(cfg.seed, index);
  RngStream param_stream = patient.derive(0);
  RngStream assign_stream = patient.derive(1);
  RngStream noise_stream = patient.derive(2);

  PatientTruth truth;
  truth.params = sample_patient_params(cfg, param_stream);
  const PatientParams& p = truth.params;
  const std::size_t T = cfg.horizon;

  TrajectoryRecord r;
  r.patient_id = "p" + std::to_string(index);
  r.statics = {0.0, 0.0, 0.0};
  r.statics[static_cast<std::size_t>(p.component)] = 1.0;
  r.x = Tensor({T, 2});
  r.a = Tensor({T, 2});
  r.y = Tensor({T, 1});
  r.observed.assign(T * 2, 1);

  double volume = diameter_to_volume(
      truncated_normal(param_stream, cfg.initial_diameter.mean, cfg.initial_diameter.std, cfg.initial_diameter.lo,
                       cfg.initial_diameter.hi));
  ChemoState chemo;
  std::vector<double> diameters;
  diameters.reserve(T);
  truth.noise.reserve(T - 1);
  for (std::size_t t = 0; t < T; ++t) {
    r.x.at(t, 0) = volume;
    r.x.at(t, 1) = chemo.concentration;
    r.y.at(t, 0) = volume;
    // The decision at day t sees diameters through day t-1 (day 0 sees its own).
    const double d_now = volume_to_diameter(volume);
    std::span<const double> hist = t == 0 ? std::span<const double>(&d_now, 1) : std::span<const double>(diameters);
    const Assignment act = assign_treatment(hist, cfg.gamma, cfg.d_max, cfg.lookback, assign_stream);
    diameters.push_back(d_now);
    r.a.at(t, 0) = act.chemo ? 1.0 : 0.0;
    r.a.at(t, 1) = act.radio ? 1.0 : 0.0;

    const ChemoState next = decay_and_dose_chemo(chemo, act.chemo, cfg);
    if (t + 1 < T) {
      const double eps = cfg.noise_std * noise_stream.normal();
      truth.noise.push_back(eps);
      volume = step_tumor(volume, next.concentration, act.radio ? cfg.radio_dose : 0.0, p, eps, cfg.volume_floor);
    }
    chemo = next;
  }
  return {std::move(r), std::move(truth)};
}

Cohort simulate_cohort(const SimCohortConfig& cfg) {
  cfg.validate();
  Cohort c;
  c.config = cfg;
  c.dataset.schema = cohort_schema(cfg);
  c.dataset.provenance = {{"generator", "tumorsim"}, {"config", cfg.to_json()}};
  c.dataset.records.reserve(cfg.n_patients);
  c.truth.reserve(cfg.n_patients);
  for (std::size_t i = 0; i < cfg.n_patients; ++i) {
    auto [rec, truth] = simulate_patient(cfg, i);
    c.dataset.records.push_back(std::move(rec));
    c.truth.push_back(std::move(truth));
  }
  return c;
}

std::vector<double> counterfactual_oracle(const TrajectoryRecord& record, const PatientTruth& truth,
                                          std::size_t origin, const Tensor& plan, const SimCohortConfig& cfg,
                                          NoiseMode mode) {
  if (mode == NoiseMode::Common && truth.noise.empty()) {
    throw Error("record '" + record.patient_id + "' carries no stored noise sequence");
  }
  const std::size_t T = record.length();
  const std::size_t tau = plan.rank() == 2 ? plan.dim(0) : 0;
  if (origin < 1 || origin + tau > T) throw ShapeError("counterfactual plan exceeds the remaining horizon");
  if (plan.rank() != 2 || plan.dim(1) != 2) throw ShapeError("counterfactual plan must be tau x 2");
  if (mode == NoiseMode::Common && truth.noise.size() + 1 < T) throw Error("stored noise is shorter than the record");

  double volume = record.y.at(origin - 1, 0);
  ChemoState chemo{record.x.at(origin - 1, 1)};
  std::vector<double> out;
  out.reserve(tau);
  for (std::size_t k = 0; k < tau; ++k) {
    const std::size_t day = origin - 1 + k;
    const bool c = plan.at(k, 0) != 0.0;
    const bool r = plan.at(k, 1) != 0.0;
    chemo = decay_and_dose_chemo(chemo, c, cfg);
    const double eps = mode == NoiseMode::Common ? truth.noise[day] : 0.0;
    volume = step_tumor(volume, chemo.concentration, r ? cfg.radio_dose : 0.0, truth.params, eps, cfg.volume_floor);
    out.push_back(volume);
  }
  return out;
}

void save_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  save_dataset(cohort.dataset, dir);
  json patients = json::array();
  for (std::size_t i = 0; i < cohort.truth.size(); ++i) {
    const auto& t = cohort.truth[i];
    json noise = json::array();
    for (double e : t.noise) noise.push_back(format_double(e));
    patients.push_back({{"patient_id", cohort.dataset.records[i].patient_id},
                        {"rho", format_double(t.params.rho)},
                        {"K", format_double(t.params.K)},
                        {"beta_c", format_double(t.params.beta_c)},
                        {"alpha_r", format_double(t.params.alpha_r)},
                        {"beta_r", format_double(t.params.beta_r)},
                        {"component", t.params.component},
                        {"noise", noise}});
  }
  json doc = {{"format_version", kFormatVersion}, {"config", cohort.config.to_json()}, {"patients", patients}};
  write_file_atomic(dir / kTruthFile, doc.dump() + "\n");
}

bool has_truth(const std::filesystem::path& dir) { return std::filesystem::exists(dir / kTruthFile); }

Cohort load_cohort(const std::filesystem::path& dir) {
  Cohort c;
  c.dataset = load_dataset(dir);
  json doc;
  try {
    doc = json::parse(read_file(dir / kTruthFile));
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid truth sidecar: ") + e.what());
  }
  c.config = SimCohortConfig::from_json(doc.at("config"));
  auto num = [](const json& j) { return std::stod(j.get<std::string>()); };
  const auto& patients = doc.at("patients");
  if (patients.size() != c.dataset.records.size()) throw ParseError("truth sidecar does not match the dataset");
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto& p = patients[i];
    if (p.at("patient_id").get<std::string>() != c.dataset.records[i].patient_id) {
      throw ParseError("truth sidecar patient order does not match the dataset");
    }
    PatientTruth t;
    t.params.rho = num(p.at("rho"));
    t.params.K = num(p.at("K"));
    t.params.beta_c = num(p.at("beta_c"));
    t.params.alpha_r = num(p.at("alpha_r"));
    t.params.beta_r = num(p.at("beta_r"));
    t.params.component = p.at("component").get<int>();
    for (const auto& e : p.at("noise")) t.noise.push_back(num(e));
    c.truth.push_back(std::move(t));
  }
  return c;
}

}  // namespace cfx::tumorsim
