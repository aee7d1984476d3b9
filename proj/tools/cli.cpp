#include "cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>
#include <toml.hpp>

#include "counterfact/fileutil.hpp"
#include "counterfact/inference.hpp"
#include "counterfact/preprocess.hpp"

namespace cfx::cli {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config documents

namespace {

json toml_node(const toml::node& n, const std::string& path) {
  if (const auto* t = n.as_table()) {
    json j = json::object();
    for (auto&& [k, v] : *t) j[std::string(k.str())] = toml_node(v, path.empty() ? std::string(k.str()) : path + "." + std::string(k.str()));
    return j;
  }
  if (const auto* a = n.as_array()) {
    json j = json::array();
    for (std::size_t i = 0; i < a->size(); ++i) j.push_back(toml_node(*a->get(i), path + "[" + std::to_string(i) + "]"));
    return j;
  }
  if (const auto* v = n.as_integer()) return v->get();
  if (const auto* v = n.as_floating_point()) return v->get();
  if (const auto* v = n.as_boolean()) return v->get();
  if (const auto* v = n.as_string()) return v->get();
  throw ConfigError("config key '" + path + "' holds a date or time, which no setting accepts");
}

template <class T>
T take(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

void only_keys(const json& j, const std::string& section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be a table");
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError("unknown config key '" + section + "." + k + "'");
    }
  }
}

}  // namespace

json toml_to_json(const std::string& text, const std::string& source) {
  try {
    return toml_node(toml::parse(text, source), "");
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(source + ": " + msg.str());
  }
}

json read_config_document(const fs::path& path) {
  const std::string text = read_file(path);
  if (path.extension() == ".toml") return toml_to_json(text, path.string());
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json RunConfig::to_json() const {
  json j;
  if (simulate) j["simulate"] = simulate->to_json();
  j["train"] = train.to_json();
  j["split"] = {{"ratios", split.ratios}, {"seed", split.seed}};
  j["evaluate"] = {{"tau_max", evaluate.tau_max},         {"t_min", evaluate.t_min},
                   {"origin_stride", evaluate.origin_stride}, {"counterfactual", evaluate.counterfactual},
                   {"split", evaluate.split},             {"noise", evaluate.noise}};
  j["probe"] = probe.to_json();
  j["predict"] = {{"horizon", predict.horizon}, {"ig_steps", predict.ig_steps},  {"top_k", predict.top_k},
                  {"target", predict.target},   {"include_phi", predict.include_phi}};
  j["predict"]["target_range"] =
      predict.target_range ? json{predict.target_range->first, predict.target_range->second} : json(nullptr);
  j["serve"] = serve.to_json();
  j["run"] = {{"data", run.data},       {"checkpoint", run.checkpoint}, {"balanced_checkpoint", run.balanced_checkpoint},
              {"patient", run.patient}, {"origin", run.origin},         {"plan", run.plan}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a table of sections");
  RunConfig c;
  for (const auto& [name, s] : j.items()) {
    if (name == "simulate") {
      try {
        c.simulate = tumorsim::SimCohortConfig::from_json(s);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("config section 'simulate': ") + e.what());
      }
      c.simulate->validate();
    } else if (name == "train") {
      c.train = TrainConfig::from_json(s);
    } else if (name == "split") {
      only_keys(s, name, {"ratios", "seed"});
      if (s.contains("ratios")) c.split.ratios = take<std::vector<double>>(s["ratios"], "split.ratios");
      if (s.contains("seed")) c.split.seed = take<std::uint64_t>(s["seed"], "split.seed");
      if (c.split.ratios.size() != 3) throw ConfigError("split.ratios needs three entries (train, val, test)");
    } else if (name == "evaluate") {
      only_keys(s, name, {"tau_max", "t_min", "origin_stride", "counterfactual", "split", "noise"});
      auto& e = c.evaluate;
      if (s.contains("tau_max")) e.tau_max = take<std::size_t>(s["tau_max"], "evaluate.tau_max");
      if (s.contains("t_min")) e.t_min = take<std::size_t>(s["t_min"], "evaluate.t_min");
      if (s.contains("origin_stride")) e.origin_stride = take<std::size_t>(s["origin_stride"], "evaluate.origin_stride");
      if (s.contains("counterfactual")) e.counterfactual = take<bool>(s["counterfactual"], "evaluate.counterfactual");
      if (s.contains("split")) e.split = take<std::string>(s["split"], "evaluate.split");
      if (s.contains("noise")) e.noise = take<std::string>(s["noise"], "evaluate.noise");
      if (e.tau_max == 0 || e.t_min == 0 || e.origin_stride == 0) {
        throw ConfigError("evaluate.tau_max, t_min and origin_stride must be at least 1");
      }
      if (e.split != "train" && e.split != "val" && e.split != "test" && e.split != "all") {
        throw ConfigError("evaluate.split must be train, val, test or all");
      }
      if (e.noise != "common" && e.noise != "zero") throw ConfigError("evaluate.noise must be common or zero");
    } else if (name == "probe") {
      c.probe = ProbeConfig::from_json(s);
    } else if (name == "predict") {
      only_keys(s, name, {"horizon", "ig_steps", "top_k", "target", "target_range", "include_phi"});
      auto& p = c.predict;
      if (s.contains("horizon")) p.horizon = take<std::size_t>(s["horizon"], "predict.horizon");
      if (s.contains("ig_steps")) p.ig_steps = take<std::size_t>(s["ig_steps"], "predict.ig_steps");
      if (s.contains("top_k")) p.top_k = take<std::size_t>(s["top_k"], "predict.top_k");
      if (s.contains("target")) p.target = take<std::size_t>(s["target"], "predict.target");
      if (s.contains("include_phi")) p.include_phi = take<bool>(s["include_phi"], "predict.include_phi");
      if (s.contains("target_range") && !s["target_range"].is_null()) {
        const auto r = take<std::vector<double>>(s["target_range"], "predict.target_range");
        if (r.size() != 2 || !(r[0] < r[1])) throw ConfigError("predict.target_range must be [lo, hi] with lo < hi");
        p.target_range = std::make_pair(r[0], r[1]);
      }
      if (p.horizon == 0) throw ConfigError("predict.horizon must be at least 1");
      if (p.ig_steps < 8) throw ConfigError("predict.ig_steps must be at least 8");
      if (p.top_k == 0) throw ConfigError("predict.top_k must be at least 1");
    } else if (name == "serve") {
      c.serve = ServiceConfig::from_json(s);
    } else if (name == "run") {
      only_keys(s, name, {"data", "checkpoint", "balanced_checkpoint", "patient", "origin", "plan"});
      auto& r = c.run;
      if (s.contains("data")) r.data = take<std::string>(s["data"], "run.data");
      if (s.contains("checkpoint")) r.checkpoint = take<std::string>(s["checkpoint"], "run.checkpoint");
      if (s.contains("balanced_checkpoint")) {
        r.balanced_checkpoint = take<std::string>(s["balanced_checkpoint"], "run.balanced_checkpoint");
      }
      if (s.contains("patient")) r.patient = take<std::string>(s["patient"], "run.patient");
      if (s.contains("origin")) r.origin = take<std::size_t>(s["origin"], "run.origin");
      if (s.contains("plan")) r.plan = take<std::string>(s["plan"], "run.plan");
    } else {
      throw ConfigError("unknown config section '" + name + "'");
    }
  }
  return c;
}

// ---------------------------------------------------------------- key documentation

namespace {

struct KeyInfo {
  const char* unit;
  const char* description;
};

const std::map<std::string, KeyInfo>& key_info() {
  static const std::map<std::string, KeyInfo> m = {
      {"simulate.n_patients", {"patients", "cohort size"}},
      {"simulate.horizon", {"days", "trajectory length T"}},
      {"simulate.gamma", {"dimensionless", "confounding strength of tumour size on treatment"}},
      {"simulate.d_max", {"cm", "maximum tumour diameter"}},
      {"simulate.noise_std", {"1/day", "std of the additive growth-rate noise"}},
      {"simulate.chemo_half_life", {"days", "chemotherapy concentration half-life"}},
      {"simulate.chemo_dose", {"concentration units", "concentration added per chemo day"}},
      {"simulate.radio_dose", {"Gy", "radiotherapy dose per radio day"}},
      {"simulate.lookback", {"days", "window of the mean diameter driving assignment"}},
      {"simulate.volume_floor", {"cm^3", "lower clamp on tumour volume"}},
      {"simulate.components[].rho.mean", {"1/day", "growth rate prior mean"}},
      {"simulate.components[].rho.std", {"1/day", "growth rate prior std"}},
      {"simulate.components[].rho.lo", {"1/day", "growth rate truncation low"}},
      {"simulate.components[].rho.hi", {"1/day", "growth rate truncation high"}},
      {"simulate.components[].beta_c.mean", {"1/concentration", "chemo sensitivity prior mean"}},
      {"simulate.components[].beta_c.std", {"1/concentration", "chemo sensitivity prior std"}},
      {"simulate.components[].beta_c.lo", {"1/concentration", "chemo sensitivity truncation low"}},
      {"simulate.components[].beta_c.hi", {"1/concentration", "chemo sensitivity truncation high"}},
      {"simulate.components[].alpha_r.mean", {"1/Gy", "radio linear coefficient prior mean"}},
      {"simulate.components[].alpha_r.std", {"1/Gy", "radio linear coefficient prior std"}},
      {"simulate.components[].alpha_r.lo", {"1/Gy", "radio linear coefficient truncation low"}},
      {"simulate.components[].alpha_r.hi", {"1/Gy", "radio linear coefficient truncation high"}},
      {"simulate.components[].beta_r.mean", {"1/Gy^2", "radio quadratic coefficient prior mean"}},
      {"simulate.components[].beta_r.std", {"1/Gy^2", "radio quadratic coefficient prior std"}},
      {"simulate.components[].beta_r.lo", {"1/Gy^2", "radio quadratic coefficient truncation low"}},
      {"simulate.components[].beta_r.hi", {"1/Gy^2", "radio quadratic coefficient truncation high"}},
      {"simulate.component_weights", {"probability", "mixture weights of the three components"}},
      {"simulate.initial_diameter.mean", {"cm", "initial diameter prior mean"}},
      {"simulate.initial_diameter.std", {"cm", "initial diameter prior std"}},
      {"simulate.initial_diameter.lo", {"cm", "initial diameter truncation low"}},
      {"simulate.initial_diameter.hi", {"cm", "initial diameter truncation high"}},
      {"simulate.seed", {"integer", "simulation seed"}},
      {"train.epochs", {"epochs", "maximum training epochs"}},
      {"train.batch_size", {"patients", "patients per minibatch"}},
      {"train.learning_rate", {"per step", "Adam learning rate for encoder and head"}},
      {"train.weight_decay", {"per step", "decoupled weight decay"}},
      {"train.disc_learning_rate", {"per step", "Adam learning rate for the discriminator"}},
      {"train.mode", {"none|smmd|grl|cdc", "balancing objective"}},
      {"train.smmd.subset_size", {"samples", "rows drawn per treatment group"}},
      {"train.smmd.grouping", {"joint|per_channel", "how treatment groups are formed"}},
      {"train.smmd.pair_policy", {"skip|shrink", "groups smaller than the subset size"}},
      {"train.kernel.bandwidth", {"fixed|median|median_squared_half", "RBF bandwidth rule"}},
      {"train.kernel.sigma", {"normalized units", "bandwidth when fixed"}},
      {"train.balance_weight", {"dimensionless", "multiplier on the annealed lambda"}},
      {"train.lambda_horizon", {"epochs", "annealing horizon E; null uses train.epochs"}},
      {"train.patience", {"epochs", "early-stopping patience"}},
      {"train.teacher_forcing", {"bool", "feed observed outcomes during training"}},
      {"train.clip_gradients", {"bool", "clip the global gradient norm"}},
      {"train.clip_norm", {"L2 norm", "clipping threshold"}},
      {"train.seed", {"integer", "initialization, shuffling and sMMD sampling seed"}},
      {"train.model.encoder.input_width", {"features", "filled from the data schema; 0 to infer"}},
      {"train.model.encoder.channels", {"units", "temporal convolution channels"}},
      {"train.model.encoder.kernel_size", {"steps", "convolution kernel width"}},
      {"train.model.encoder.dilations", {"steps", "dilation per residual block"}},
      {"train.model.encoder.repr_width", {"units", "representation width D"}},
      {"train.model.head_hidden", {"units", "outcome head hidden width"}},
      {"train.model.disc_hidden", {"units", "discriminator hidden width"}},
      {"train.model.discriminator", {"bool", "carry a treatment discriminator (grl, cdc)"}},
      {"train.model.disc_mode", {"joint|per_channel", "discriminator output layout"}},
      {"split.ratios", {"fractions", "train, validation, test shares of patients"}},
      {"split.seed", {"integer", "patient split seed"}},
      {"evaluate.tau_max", {"steps", "longest evaluated horizon"}},
      {"evaluate.t_min", {"steps", "earliest forecast origin"}},
      {"evaluate.origin_stride", {"steps", "distance between evaluated origins"}},
      {"evaluate.counterfactual", {"bool", "score plans against the simulator oracle when truth is present"}},
      {"evaluate.split", {"train|val|test|all", "patients to evaluate"}},
      {"evaluate.noise", {"common|zero", "oracle noise policy"}},
      {"probe.epochs", {"epochs", "probe decoder training epochs"}},
      {"probe.learning_rate", {"per step", "probe Adam learning rate"}},
      {"probe.batch_size", {"sequences", "sequences per probe step"}},
      {"probe.hidden", {"units", "probe decoder hidden width"}},
      {"probe.seed", {"integer", "probe initialization and shuffling seed"}},
      {"predict.horizon", {"steps", "forecast horizon tau"}},
      {"predict.ig_steps", {"steps", "integrated-gradients quadrature points"}},
      {"predict.top_k", {"inputs", "attributed inputs listed"}},
      {"predict.target", {"index", "outcome channel attributed"}},
      {"predict.target_range", {"outcome units", "[lo, hi]; null uses the observed range"}},
      {"predict.include_phi", {"bool", "write the full attribution matrix"}},
      {"serve.host", {"address", "bind address"}},
      {"serve.port", {"port", "TCP port; 0 picks a free one"}},
      {"serve.models_dir", {"path", "directory listed by GET /models"}},
      {"serve.data_root", {"path", "root for dataset references; empty disables them"}},
      {"serve.cors_origins", {"origins", "allowed browser origins; * allows any"}},
      {"serve.threads", {"threads", "request worker threads"}},
      {"serve.max_horizon", {"steps", "largest accepted horizon"}},
      {"serve.max_ig_steps", {"steps", "largest accepted ig_steps"}},
      {"run.data", {"path", "dataset directory (same as --data)"}},
      {"run.checkpoint", {"path", "model checkpoint (same as --checkpoint)"}},
      {"run.balanced_checkpoint", {"path", "second checkpoint for the probe delta (same as --balanced)"}},
      {"run.patient", {"id", "patient for predict and attribute (same as --patient)"}},
      {"run.origin", {"steps", "forecast origin; 0 uses the whole history"}},
      {"run.plan", {"label", "plan to attribute; empty uses the first"}},
  };
  return m;
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_array() && !j.empty() && j.front().is_object()) {
    for (const auto& e : j) flatten(e, prefix + "[]", out);
  } else if (!out.count(prefix)) {
    out[prefix] = j.dump();
  } else if (out[prefix] != j.dump()) {
    out[prefix] = "(per entry)";
  }
}

}  // namespace

std::vector<KeyDoc> config_keys() {
  RunConfig defaults;
  defaults.simulate = tumorsim::SimCohortConfig{};
  std::map<std::string, std::string> flat;
  flatten(defaults.to_json(), "", flat);
  std::vector<KeyDoc> out;
  for (const auto& [key, value] : flat) {
    const auto it = key_info().find(key);
    if (it == key_info().end()) throw Error("config key '" + key + "' has no documentation");
    out.push_back({key, value, it->second.unit, it->second.description});
  }
  return out;
}

std::string config_keys_text() {
  std::string s = "Config keys (TOML or JSON; section.key = default [unit] description):\n";
  for (const auto& k : config_keys()) s += "  " + k.key + " = " + k.fallback + " [" + k.unit + "] " + k.description + "\n";
  return s;
}

// ---------------------------------------------------------------- commands

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  bool quiet = false;
  bool json_logs = false;
  // command inputs
  std::string data, checkpoint, balanced, patient, plan, gammas, mode, split, models_dir;
  std::optional<std::size_t> origin, tau_max, horizon;
  std::optional<int> port;
};

std::shared_ptr<spdlog::logger> g_log;
bool g_json_logs = false;

void setup_logging(const Options& o) {
  g_log = spdlog::get("counterfact");
  if (!g_log) g_log = spdlog::stderr_color_mt("counterfact");
  auto level = spdlog::level::info;
  if (const char* env = std::getenv("COUNTERFACT_LOG")) level = spdlog::level::from_str(env);
  if (o.quiet) level = std::max(level, spdlog::level::warn);
  g_log->set_level(level);
  g_json_logs = o.json_logs;
  if (g_json_logs) {
    g_log->set_pattern(R"({"time":"%Y-%m-%dT%H:%M:%S.%e","level":"%l","msg":%v})");
  } else {
    g_log->set_pattern("[%H:%M:%S.%e] %^%l%$ %v");
  }
}

std::string msg(const std::string& s) { return g_json_logs ? json(s).dump() : s; }
void log_info(const std::string& s) { g_log->info(msg(s)); }
void log_warn(const std::string& s) { g_log->warn(msg(s)); }
void log_error(const std::string& s) { g_log->error(msg(s)); }

std::vector<std::uint64_t> parse_u64_list(const std::string& s, const char* flag) {
  std::vector<std::uint64_t> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + " expects comma-separated integers, got '" + item + "'");
    }
  }
  if (v.empty()) throw ConfigError(std::string(flag) + " is empty");
  return v;
}

std::vector<double> parse_double_list(const std::string& s, const char* flag) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + " expects comma-separated numbers, got '" + item + "'");
    }
  }
  if (v.empty()) throw ConfigError(std::string(flag) + " is empty");
  return v;
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

std::string require(const std::string& v, const char* what) {
  if (v.empty()) throw ConfigError(std::string(what) + " is required");
  return v;
}

void check_not_input(const fs::path& out, const std::string& data) {
  if (data.empty()) return;
  if (fs::weakly_canonical(out) == fs::weakly_canonical(data)) {
    throw ConfigError("--out must differ from the input dataset directory");
  }
}

std::string seed_dir(std::uint64_t s) { return "seed_" + std::to_string(s); }

std::string gamma_dir(double g) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "gamma_%g", g);
  return buf;
}

// Patient ids per split, written next to each checkpoint.
json split_ids(const Splits& s) {
  const auto ids = [](const Dataset& d) {
    std::vector<std::string> v;
    for (const auto& r : d.records) v.push_back(r.patient_id);
    return v;
  };
  return {{"train", ids(s.train)}, {"val", ids(s.val)}, {"test", ids(s.test)}};
}

Splits make_splits(const Dataset& ds, const SplitConfig& c) {
  RngStream stream(c.seed, 0x73706c74);
  return split_patients(ds, c.ratios, stream);
}

Dataset subset(const Dataset& ds, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < ds.records.size(); ++i) where[ds.records[i].patient_id] = i;
  Dataset out;
  out.schema = ds.schema;
  out.provenance = ds.provenance;
  for (const auto& id : ids) {
    const auto it = where.find(id);
    if (it == where.end()) throw Error("patient '" + id + "' from the split file is not in the dataset");
    out.records.push_back(ds.records[it->second]);
  }
  return out;
}

Dataset checkpoint_split(const fs::path& checkpoint, const Dataset& ds, const std::string& split) {
  if (split == "all") return ds;
  const fs::path file = checkpoint.parent_path() / "splits.json";
  if (!fs::exists(file)) throw ConfigError("split '" + split + "' needs " + file.string() + " (written by train)");
  const json j = json::parse(read_file(file));
  if (!j.contains(split)) throw ConfigError("split file has no '" + split + "' entry");
  return subset(ds, j.at(split).get<std::vector<std::string>>());
}

const TrajectoryRecord& find_patient(const Dataset& ds, const std::string& id) {
  for (const auto& r : ds.records)
    if (r.patient_id == id) return r;
  throw ConfigError("patient '" + id + "' is not in the dataset");
}

void finish(const fs::path& out, const RunConfig& cfg) { write_json(out / "resolved_config.json", cfg.to_json()); }

// simulate --------------------------------------------------------------------

void cmd_simulate(RunConfig cfg, const Options& o, bool from_file) {
  if (!cfg.simulate) {
    if (from_file) throw ConfigError("config has no 'simulate' section");
    cfg.simulate = tumorsim::SimCohortConfig{};
  }
  const fs::path out = require_out(o);
  const std::vector<double> gammas = o.gammas.empty() ? std::vector<double>{cfg.simulate->gamma}
                                                      : parse_double_list(o.gammas, "--gammas");
  std::vector<std::optional<std::uint64_t>> seeds{o.seed};
  if (!o.seeds.empty()) {
    seeds.clear();
    for (auto s : parse_u64_list(o.seeds, "--seeds")) seeds.push_back(s);
  }
  for (double g : gammas) {
    for (const auto& s : seeds) {
      RunConfig run = cfg;
      run.simulate->gamma = g;
      if (s) run.simulate->seed = *s;
      run.simulate->validate();
      fs::path dir = out;
      if (!o.gammas.empty()) dir /= gamma_dir(g);
      if (!o.seeds.empty()) dir /= seed_dir(*s);
      fs::create_directories(dir);
      const auto cohort = tumorsim::simulate_cohort(*run.simulate);
      tumorsim::save_cohort(cohort, dir);
      finish(dir, run);
      log_info("simulated " + std::to_string(cohort.dataset.size()) + " patients (gamma " + std::to_string(g) +
               ", seed " + std::to_string(run.simulate->seed) + ") into " + dir.string());
    }
  }
}

// preprocess ------------------------------------------------------------------

void cmd_preprocess(RunConfig cfg, const Options& o) {
  const fs::path out = require_out(o);
  cfg.run.data = require(o.data.empty() ? cfg.run.data : o.data, "--data");
  check_not_input(out, cfg.run.data);
  if (o.seed) cfg.split.seed = *o.seed;
  const Dataset raw = load_dataset(cfg.run.data);
  const Splits sp = make_splits(raw, cfg.split);
  const Dataset train_imp = impute_dataset(sp.train);
  const NormalizationStats stats = zscore_fit(train_imp);
  const PositivityReport pos = positivity_check(sp.train);
  if (!pos.ok()) log_warn("positivity check flagged treatment arms with little or no support");
  write_json(out / "positivity.json", pos.to_json());
  write_json(out / "stats.json", stats.to_json());
  write_json(out / "splits.json", split_ids(sp));
  save_dataset(zscore_apply(train_imp, stats), out / "train");
  save_dataset(zscore_apply(impute_dataset(sp.val), stats), out / "val");
  save_dataset(zscore_apply(impute_dataset(sp.test), stats), out / "test");
  finish(out, cfg);
  log_info("preprocessed " + std::to_string(raw.size()) + " patients into " + out.string());
}

// train -----------------------------------------------------------------------

void train_one(RunConfig cfg, const Dataset& raw, const fs::path& dir) {
  fs::create_directories(dir);
  const Splits sp = make_splits(raw, cfg.split);
  const PositivityReport pos = positivity_check(sp.train);
  if (!pos.ok()) log_warn("positivity check flagged treatment arms with little or no support");
  log_info("training mode " + std::string(balancing_mode_name(cfg.train.mode)) + " on " +
           std::to_string(sp.train.size()) + " patients, seed " + std::to_string(cfg.train.seed));
  const TrainResult r = train(sp.train, sp.val, cfg.train, [](const EpochRecord& e) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "epoch %zu lambda %.6f train_loss %.6g val_rmse %.6g", e.epoch, e.lambda,
                  e.train_loss, e.val_rmse);
    g_log->debug(msg(buf));
  });
  save_checkpoint(r.model, dir / "model.cfxm");
  write_json(dir / "train_report.json", r.report.to_json());
  write_file_atomic(dir / "metrics.csv", r.report.metrics_csv());
  write_json(dir / "splits.json", split_ids(sp));
  finish(dir, cfg);
  log_info("best epoch " + std::to_string(r.report.best_epoch) + ", validation RMSE " +
           format_double(r.report.best_val_rmse) + "; checkpoint " + (dir / "model.cfxm").string());
}

void cmd_train(RunConfig cfg, const Options& o) {
  const fs::path out = require_out(o);
  cfg.run.data = require(o.data.empty() ? cfg.run.data : o.data, "--data");
  check_not_input(out, cfg.run.data);
  if (!o.mode.empty()) {
    cfg.train.mode = balancing_mode_from(o.mode);
    const bool adv = cfg.train.mode == BalancingMode::Grl || cfg.train.mode == BalancingMode::Cdc;
    cfg.train.model.discriminator = adv;
  }
  cfg.train.validate();
  const Dataset raw = load_dataset(cfg.run.data);
  if (!o.seeds.empty()) {
    for (auto s : parse_u64_list(o.seeds, "--seeds")) {
      RunConfig run = cfg;
      run.train.seed = run.split.seed = s;
      train_one(run, raw, out / seed_dir(s));
    }
    return;
  }
  if (o.seed) cfg.train.seed = cfg.split.seed = *o.seed;
  train_one(cfg, raw, out);
}

// evaluate --------------------------------------------------------------------

EvalReport evaluate_one(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data) {
  const Model model = load_checkpoint(checkpoint);
  const Dataset all = load_dataset(data);
  const Dataset ds = checkpoint_split(checkpoint, all, cfg.evaluate.split);
  const PreparedSet set = prepare_for_model(model, ds);
  EvalReport rep;
  rep.label = model.training.value("mode", std::string("model"));
  rep.seed = model.training.value("seed", std::uint64_t{0});
  rep.config_digest = model.training.value("config_digest", std::string());
  rep.factual = factual_horizon_rmse(model, set, cfg.evaluate.tau_max, cfg.evaluate.t_min, cfg.evaluate.origin_stride);
  rep.one_step_rmse = one_step_rmse(model, set);
  if (cfg.evaluate.counterfactual && tumorsim::has_truth(data)) {
    const auto cohort = tumorsim::load_cohort(data);
    std::map<std::string, std::size_t> where;
    for (std::size_t i = 0; i < cohort.dataset.records.size(); ++i) where[cohort.dataset.records[i].patient_id] = i;
    std::vector<tumorsim::PatientTruth> truth;
    for (const auto& r : ds.records) truth.push_back(cohort.truth.at(where.at(r.patient_id)));
    rep.counterfactual = counterfactual_horizon_rmse(
        model, ds, truth, cohort.config, cfg.evaluate.tau_max, cfg.evaluate.t_min, cfg.evaluate.origin_stride,
        cfg.evaluate.noise == "zero" ? tumorsim::NoiseMode::Zero : tumorsim::NoiseMode::Common);
  }
  return rep;
}

void write_eval(const fs::path& dir, const EvalReport& rep) {
  fs::create_directories(dir);
  write_json(dir / "eval_report.json", rep.to_json());
  write_file_atomic(dir / "horizon_rmse.csv", horizon_rmse_csv(std::span<const EvalReport>(&rep, 1)));
}

std::string mean_sd(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g±%.6g", m, sd);
  return buf;
}

void cmd_evaluate(RunConfig cfg, const Options& o) {
  const fs::path out = require_out(o);
  cfg.run.data = require(o.data.empty() ? cfg.run.data : o.data, "--data");
  cfg.run.checkpoint = require(o.checkpoint.empty() ? cfg.run.checkpoint : o.checkpoint, "--checkpoint");
  check_not_input(out, cfg.run.data);
  if (!o.split.empty()) cfg.evaluate.split = o.split;
  if (o.tau_max) cfg.evaluate.tau_max = *o.tau_max;
  cfg = RunConfig::from_json(cfg.to_json());  // re-validate overrides
  if (o.seeds.empty()) {
    const EvalReport rep = evaluate_one(cfg, cfg.run.checkpoint, cfg.run.data);
    write_eval(out, rep);
    finish(out, cfg);
    log_info("evaluated " + cfg.run.checkpoint + ": tau_1 RMSE " + format_double(rep.factual.rmse.front()));
    return;
  }
  // Batched: the checkpoint argument is the directory train --seeds wrote.
  std::vector<EvalReport> reps;
  for (auto s : parse_u64_list(o.seeds, "--seeds")) {
    const fs::path ck = fs::path(cfg.run.checkpoint) / seed_dir(s) / "model.cfxm";
    reps.push_back(evaluate_one(cfg, ck, cfg.run.data));
    write_eval(out / seed_dir(s), reps.back());
  }
  std::string csv = "model,metric";
  for (std::size_t k = 1; k <= cfg.evaluate.tau_max; ++k) csv += ",tau_" + std::to_string(k);
  csv += "\n";
  const auto row = [&](const char* metric, auto pick) {
    csv += reps.front().label + "," + metric;
    for (std::size_t k = 0; k < cfg.evaluate.tau_max; ++k) {
      std::vector<double> v;
      for (const auto& r : reps) v.push_back(pick(r)[k]);
      csv += "," + mean_sd(v);
    }
    csv += "\n";
  };
  row("factual", [](const EvalReport& r) { return r.factual.rmse; });
  if (reps.front().counterfactual) row("counterfactual", [](const EvalReport& r) { return r.counterfactual->rmse; });
  write_file_atomic(out / "summary.csv", csv);
  finish(out, cfg);
  log_info("evaluated " + std::to_string(reps.size()) + " seeds; summary in " + (out / "summary.csv").string());
}

// predict / attribute ---------------------------------------------------------

struct PatientContext {
  Model model;
  TrajectoryRecord history;
  RolloutContext ctx;
};

PatientContext patient_context(RunConfig& cfg, const Options& o) {
  cfg.run.data = require(o.data.empty() ? cfg.run.data : o.data, "--data");
  cfg.run.checkpoint = require(o.checkpoint.empty() ? cfg.run.checkpoint : o.checkpoint, "--checkpoint");
  cfg.run.patient = require(o.patient.empty() ? cfg.run.patient : o.patient, "--patient");
  if (o.origin) cfg.run.origin = *o.origin;
  if (!o.plan.empty()) cfg.run.plan = o.plan;
  if (o.horizon) cfg.predict.horizon = *o.horizon;
  Model model = load_checkpoint(cfg.run.checkpoint);
  const Dataset ds = load_dataset(cfg.run.data);
  if (!(ds.schema == model.schema())) throw ConfigError("dataset schema does not match the checkpoint");
  TrajectoryRecord rec = find_patient(ds, cfg.run.patient);
  const std::size_t T = rec.length();
  const std::size_t origin = cfg.run.origin == 0 ? T : cfg.run.origin;
  if (origin > T) throw ConfigError("run.origin exceeds the history length " + std::to_string(T));
  if (origin < T) {
    const Schema& s = model.schema();
    TrajectoryRecord cut = rec;
    cut.x = Tensor({origin, s.d_x()});
    cut.a = Tensor({origin, s.d_a()});
    cut.y = Tensor({origin, s.d_y()});
    cut.observed.resize(origin * s.d_x());
    for (std::size_t t = 0; t < origin; ++t) {
      std::copy(rec.x.row(t).begin(), rec.x.row(t).end(), cut.x.row(t).begin());
      std::copy(rec.a.row(t).begin(), rec.a.row(t).end(), cut.a.row(t).begin());
      std::copy(rec.y.row(t).begin(), rec.y.row(t).end(), cut.y.row(t).begin());
    }
    rec = std::move(cut);
  }
  RolloutContext ctx = make_context(model, rec);
  return {std::move(model), std::move(rec), std::move(ctx)};
}

std::size_t plan_index(const std::vector<TreatmentPlan>& plans, const std::string& label) {
  if (label.empty()) return 0;
  for (std::size_t i = 0; i < plans.size(); ++i)
    if (plans[i].label == label) return i;
  throw ConfigError("plan '" + label + "' is not one of the default plans");
}

void cmd_predict(RunConfig cfg, const Options& o) {
  const fs::path out = require_out(o);
  PatientContext pc = patient_context(cfg, o);
  check_not_input(out, cfg.run.data);
  const Model& m = pc.model;
  const auto plans = default_plans(m.schema(), cfg.predict.horizon);
  const std::size_t which = plan_index(plans, cfg.run.plan);
  const CounterfactualResult res = counterfactual_compare(m, pc.ctx, plans);
  const AttributionReport attr = integrated_gradients(m, pc.ctx, plans[which], {cfg.predict.ig_steps, cfg.predict.target});
  double lo = 0.0, hi = 0.0;
  if (cfg.predict.target_range) {
    std::tie(lo, hi) = *cfg.predict.target_range;
  } else {
    lo = hi = pc.history.y.at(0, cfg.predict.target);
    for (std::size_t t = 0; t < pc.history.length(); ++t) {
      lo = std::min(lo, pc.history.y.at(t, cfg.predict.target));
      hi = std::max(hi, pc.history.y.at(t, cfg.predict.target));
    }
    if (lo == hi) {
      lo -= 1.0;
      hi += 1.0;
    }
  }
  const Explanation ex = template_explanation(m, pc.history, res, attr, lo, hi, {}, cfg.predict.top_k);
  json j = {{"model_digest", model_digest(m)},
            {"patient_id", pc.history.patient_id},
            {"origin", res.origin},
            {"horizon", res.horizon},
            {"target_range", {lo, hi}},
            {"plans", res.to_json()["plans"]},
            {"attribution", attr.to_json(cfg.predict.top_k, cfg.predict.include_phi)},
            {"explanation", ex.to_json()}};
  write_json(out / "prediction.json", j);
  std::string csv = "plan,step";
  for (const auto& n : m.schema().y_names) csv += ",y_" + n;
  csv += "\n";
  for (std::size_t p = 0; p < plans.size(); ++p)
    for (std::size_t k = 0; k < res.horizon; ++k) {
      csv += plans[p].label + "," + std::to_string(res.origin + k);
      for (std::size_t c = 0; c < m.schema().d_y(); ++c) csv += "," + format_double(res.trajectories[p].at(k, c));
      csv += "\n";
    }
  write_file_atomic(out / "trajectories.csv", csv);
  finish(out, cfg);
  log_info("predicted " + std::to_string(plans.size()) + " plans for patient " + pc.history.patient_id);
  if (!o.quiet) std::cout << ex.text() << "\n";
}

void cmd_attribute(RunConfig cfg, const Options& o) {
  const fs::path out = require_out(o);
  PatientContext pc = patient_context(cfg, o);
  check_not_input(out, cfg.run.data);
  const auto plans = default_plans(pc.model.schema(), cfg.predict.horizon);
  const auto& plan = plans[plan_index(plans, cfg.run.plan)];
  const AttributionReport attr = integrated_gradients(pc.model, pc.ctx, plan, {cfg.predict.ig_steps, cfg.predict.target});
  json j = {{"model_digest", model_digest(pc.model)},
            {"patient_id", pc.history.patient_id},
            {"origin", pc.ctx.origin},
            {"horizon", cfg.predict.horizon},
            {"attribution", attr.to_json(cfg.predict.top_k, cfg.predict.include_phi)}};
  write_json(out / "attribution.json", j);
  finish(out, cfg);
  log_info("attributed plan " + plan.label + "; worst completeness gap " + format_double(attr.max_completeness_error()));
}

// probe / export ------------------------------------------------------------------

ProbeReport probe_checkpoint(const RunConfig& cfg, const fs::path& checkpoint, const Dataset& ds) {
  const Model m = load_checkpoint(checkpoint);
  const Dataset tr = checkpoint_split(checkpoint, ds, "train");
  const Dataset va = checkpoint_split(checkpoint, ds, "val");
  log_info("probing " + checkpoint.string() + " for " + std::to_string(cfg.probe.epochs) + " epochs");
  return reconstruction_probe(m, tr, va, cfg.probe, [](std::size_t e, double t, double v) {
    char buf[120];
    std::snprintf(buf, sizeof buf, "probe epoch %zu train %.6g val %.6g", e, t, v);
    g_log->debug(msg(buf));
  });
}

std::string probe_csv(const ProbeReport& r) {
  std::string s = "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < r.train_loss.size(); ++e)
    s += std::to_string(e) + "," + format_double(r.train_loss[e]) + "," + format_double(r.val_loss[e]) + "\n";
  return s;
}

void cmd_probe(RunConfig cfg, const Options& o) {
  const fs::path out = require_out(o);
  cfg.run.data = require(o.data.empty() ? cfg.run.data : o.data, "--data");
  cfg.run.checkpoint = require(o.checkpoint.empty() ? cfg.run.checkpoint : o.checkpoint, "--checkpoint");
  if (!o.balanced.empty()) cfg.run.balanced_checkpoint = o.balanced;
  if (o.seed) cfg.probe.seed = *o.seed;
  check_not_input(out, cfg.run.data);
  const Dataset ds = load_dataset(cfg.run.data);
  const ProbeReport a = probe_checkpoint(cfg, cfg.run.checkpoint, ds);
  write_json(out / "probe_report.json", a.to_json());
  write_file_atomic(out / "probe_loss.csv", probe_csv(a));
  if (!cfg.run.balanced_checkpoint.empty()) {
    const ProbeReport b = probe_checkpoint(cfg, cfg.run.balanced_checkpoint, ds);
    write_json(out / "probe_report_balanced.json", b.to_json());
    write_file_atomic(out / "probe_loss_balanced.csv", probe_csv(b));
    write_json(out / "delta_r2.json", delta_r2(a, b).to_json());
  }
  finish(out, cfg);
}

void cmd_export(RunConfig cfg, const Options& o) {
  const fs::path out = require_out(o);
  cfg.run.data = require(o.data.empty() ? cfg.run.data : o.data, "--data");
  cfg.run.checkpoint = require(o.checkpoint.empty() ? cfg.run.checkpoint : o.checkpoint, "--checkpoint");
  check_not_input(out, cfg.run.data);
  const Model m = load_checkpoint(cfg.run.checkpoint);
  const Dataset ds = load_dataset(cfg.run.data);
  export_representations(m, ds, out / "representations.csv");
  finish(out, cfg);
  log_info("exported representations of " + std::to_string(ds.size()) + " patients");
}

// serve -----------------------------------------------------------------------

void cmd_serve(RunConfig cfg, const Options& o) {
  if (!o.checkpoint.empty()) cfg.run.checkpoint = o.checkpoint;
  if (o.port) cfg.serve.port = *o.port;
  if (!o.models_dir.empty()) cfg.serve.models_dir = o.models_dir;
  cfg.serve.validate();
  std::shared_ptr<const Model> model;
  if (!cfg.run.checkpoint.empty()) model = std::make_shared<const Model>(load_checkpoint(cfg.run.checkpoint));
  else log_warn("no checkpoint given; /health answers 503 and prediction routes are unavailable");

  // Block termination signals in every thread; one watcher turns them into a clean stop.
  sigset_t sigs;
  sigemptyset(&sigs);
  sigaddset(&sigs, SIGINT);
  sigaddset(&sigs, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &sigs, nullptr);

  const Service service(model, cfg.serve);
  HttpServer server(service);
  const int port = server.bind();
  std::cout << "listening on http://" << cfg.serve.host << ":" << port << std::endl;
  log_info("serving " + (model ? service.model_digest().substr(0, 12) : std::string("no model")) + " on port " +
           std::to_string(port));
  std::thread watcher([&] {
    int sig = 0;
    sigwait(&sigs, &sig);
    server.stop();
  });
  watcher.detach();
  server.listen();
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Counterfactual treatment-trajectory engine", "counterfact"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "configuration file (TOML or JSON)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--seed", o.seed, "seed override for the command");
  app.add_option("--seeds", o.seeds, "comma-separated seeds for batched runs");
  app.add_flag("--quiet", o.quiet, "warnings and errors only");
  app.add_flag("--json-logs", o.json_logs, "JSON lines on stderr");
  app.footer("Logging verbosity also follows COUNTERFACT_LOG (trace, debug, info, warn, error, off).\n\n" +
             config_keys_text());

  auto* sim = app.add_subcommand("simulate", "simulate a tumour-growth cohort with ground truth");
  sim->add_option("--gammas", o.gammas, "comma-separated confounding strengths, one directory each");
  auto* pre = app.add_subcommand("preprocess", "impute, split and normalize a dataset; positivity report");
  pre->add_option("--data", o.data, "dataset directory");
  auto* tr = app.add_subcommand("train", "train a model on the train/validation split");
  tr->add_option("--data", o.data, "dataset directory");
  tr->add_option("--mode", o.mode, "balancing mode override: none, smmd, grl, cdc");
  auto* ev = app.add_subcommand("evaluate", "rolling-origin multi-horizon RMSE");
  ev->add_option("--data", o.data, "dataset directory");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint (or the train --seeds directory with --seeds)");
  ev->add_option("--split", o.split, "train, val, test or all");
  ev->add_option("--tau-max", o.tau_max, "longest horizon");
  auto* pr = app.add_subcommand("predict", "counterfactual trajectories, attribution and explanation");
  auto* at = app.add_subcommand("attribute", "integrated-gradients attribution for one plan");
  for (auto* c : {pr, at}) {
    c->add_option("--data", o.data, "dataset directory");
    c->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    c->add_option("--patient", o.patient, "patient id");
    c->add_option("--origin", o.origin, "forecast origin (default: whole history)");
    c->add_option("--horizon", o.horizon, "forecast horizon");
    c->add_option("--plan", o.plan, "default plan label to attribute");
  }
  auto* pb = app.add_subcommand("probe", "frozen-encoder reconstruction probe");
  pb->add_option("--data", o.data, "dataset directory");
  pb->add_option("--checkpoint", o.checkpoint, "checkpoint (the unbalanced one when --balanced is given)");
  pb->add_option("--balanced", o.balanced, "balanced checkpoint; adds per-variable delta R^2");
  auto* ex = app.add_subcommand("export-repr", "write encoder representations as CSV");
  ex->add_option("--data", o.data, "dataset directory");
  ex->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  auto* sv = app.add_subcommand("serve", "HTTP JSON service");
  sv->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  sv->add_option("--port", o.port, "TCP port; 0 picks a free one and prints it");
  sv->add_option("--models-dir", o.models_dir, "directory listed by GET /models");
  auto* keys = app.add_subcommand("keys", "list every config key with its default and unit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  setup_logging(o);
  try {
    if (keys->parsed()) {
      std::cout << config_keys_text();
      return 0;
    }
    RunConfig cfg;
    const bool from_file = !o.config.empty();
    if (from_file) cfg = RunConfig::from_json(read_config_document(o.config));
    if (sim->parsed()) cmd_simulate(cfg, o, from_file);
    else if (pre->parsed()) cmd_preprocess(cfg, o);
    else if (tr->parsed()) cmd_train(cfg, o);
    else if (ev->parsed()) cmd_evaluate(cfg, o);
    else if (pr->parsed()) cmd_predict(cfg, o);
    else if (at->parsed()) cmd_attribute(cfg, o);
    else if (pb->parsed()) cmd_probe(cfg, o);
    else if (ex->parsed()) cmd_export(cfg, o);
    else if (sv->parsed()) cmd_serve(cfg, o);
    return 0;
  } catch (const ConfigError& e) {
    log_error(std::string("configuration error: ") + e.what());
    return 2;
  } catch (const NumericError& e) {
    log_error(std::string("numeric failure: ") + e.what());
    return 3;
  } catch (const std::exception& e) {
    log_error(std::string("error: ") + e.what());
    return 1;
  }
}

}  // namespace cfx::cli
