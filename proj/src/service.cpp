#include "counterfact/service.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>

#include <httplib.h>

#include "counterfact/fileutil.hpp"
#include "counterfact/inference.hpp"

namespace cfx {

using nlohmann::json;

// ---------------------------------------------------------------- config

void ServiceConfig::validate() const {
  if (host.empty()) throw ConfigError("serve.host must not be empty");
  if (port < 0 || port > 65535) throw ConfigError("serve.port must lie in [0, 65535]");
  if (threads == 0) throw ConfigError("serve.threads must be at least 1");
  if (max_horizon == 0) throw ConfigError("serve.max_horizon must be at least 1");
  if (max_ig_steps < 8) throw ConfigError("serve.max_ig_steps must be at least 8");
}

json ServiceConfig::to_json() const {
  return {{"host", host},
          {"port", port},
          {"models_dir", models_dir.string()},
          {"data_root", data_root.string()},
          {"cors_origins", cors_origins},
          {"threads", threads},
          {"max_horizon", max_horizon},
          {"max_ig_steps", max_ig_steps}};
}

ServiceConfig ServiceConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("serve config must be an object");
  ServiceConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "host") c.host = value.get<std::string>();
      else if (key == "port") c.port = value.get<int>();
      else if (key == "models_dir") c.models_dir = value.get<std::string>();
      else if (key == "data_root") c.data_root = value.get<std::string>();
      else if (key == "cors_origins") c.cors_origins = value.get<std::vector<std::string>>();
      else if (key == "threads") c.threads = value.get<std::size_t>();
      else if (key == "max_horizon") c.max_horizon = value.get<std::size_t>();
      else if (key == "max_ig_steps") c.max_ig_steps = value.get<std::size_t>();
      else throw ConfigError("unknown serve key '" + key + "'");
    } catch (const json::exception&) {
      throw ConfigError("serve key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- request parsing

namespace {

// Client error carrying the HTTP status and the offending field path.
class RequestError : public Error {
 public:
  RequestError(int status, std::string field, const std::string& what)
      : Error(what), status_(status), field_(std::move(field)) {}
  int status() const noexcept { return status_; }
  const std::string& field() const noexcept { return field_; }

 private:
  int status_;
  std::string field_;
};

[[noreturn]] void bad(const std::string& field, const std::string& what) { throw RequestError(400, field, what); }

std::string idx(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      bad(where.empty() ? key : where + "." + key, "unknown field");
    }
  }
}

const json& require_object(const json& j, const std::string& field) {
  if (!j.is_object()) bad(field, "must be an object");
  return j;
}

double number(const json& j, const std::string& field) {
  if (!j.is_number()) bad(field, "must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) bad(field, "must be finite");
  return v;
}

std::size_t count(const json& j, const std::string& field, std::size_t lo, std::size_t hi) {
  if (!j.is_number_integer()) bad(field, "must be an integer");
  const auto v = j.get<long long>();
  if (v < static_cast<long long>(lo) || v > static_cast<long long>(hi)) {
    bad(field, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return static_cast<std::size_t>(v);
}

double binary(const json& j, const std::string& field) {
  if (!j.is_number() || (j.get<double>() != 0.0 && j.get<double>() != 1.0)) bad(field, "treatment must be 0 or 1");
  return j.get<double>();
}

// T x width matrix; `nullable` entries become NaN.
Tensor matrix(const json& j, const std::string& field, std::size_t rows, std::size_t width, bool nullable,
              bool treatments) {
  if (!j.is_array()) bad(field, "must be an array of rows");
  if (j.size() != rows) bad(field, "has " + std::to_string(j.size()) + " rows, expected " + std::to_string(rows));
  Tensor t({rows, width});
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& row = j[r];
    const std::string rf = idx(field, r);
    if (!row.is_array() || row.size() != width) bad(rf, "must be an array of " + std::to_string(width) + " values");
    for (std::size_t c = 0; c < width; ++c) {
      const std::string cf = idx(rf, c);
      if (nullable && row[c].is_null()) {
        t.at(r, c) = std::nan("");
      } else {
        t.at(r, c) = treatments ? binary(row[c], cf) : number(row[c], cf);
      }
    }
  }
  return t;
}

TrajectoryRecord history_from_json(const json& h, const Schema& s) {
  require_object(h, "history");
  reject_unknown(h, "history", {"patient_id", "statics", "x", "a", "y"});
  TrajectoryRecord r;
  if (h.contains("patient_id")) {
    if (!h["patient_id"].is_string()) bad("history.patient_id", "must be a string");
    r.patient_id = h["patient_id"].get<std::string>();
  }
  if (!h.contains("a")) bad("history.a", "is required");
  if (!h["a"].is_array() || h["a"].empty()) bad("history.a", "must be a non-empty array of rows");
  const std::size_t T = h["a"].size();
  if (!h.contains("statics") && s.d_v() > 0) bad("history.statics", "is required");
  if (h.contains("statics")) {
    const auto& v = h["statics"];
    if (!v.is_array() || v.size() != s.d_v()) bad("history.statics", "must hold " + std::to_string(s.d_v()) + " values");
    for (std::size_t i = 0; i < v.size(); ++i) r.statics.push_back(number(v[i], idx("history.statics", i)));
  }
  if (!h.contains("y")) bad("history.y", "is required");
  r.a = matrix(h["a"], "history.a", T, s.d_a(), false, true);
  r.y = matrix(h["y"], "history.y", T, s.d_y(), false, false);
  if (h.contains("x")) {
    r.x = matrix(h["x"], "history.x", T, s.d_x(), true, false);
  } else {
    r.x = Tensor({T, s.d_x()}, std::nan(""));
  }
  r.observed.assign(T * s.d_x(), 1);
  for (std::size_t i = 0; i < r.x.size(); ++i) {
    if (std::isnan(r.x[i])) {
      r.observed[i] = 0;
      r.x[i] = 0.0;
    }
  }
  for (std::size_t j = 0; j < s.d_x(); ++j) {
    bool any = false;
    for (std::size_t t = 0; t < T; ++t) any = any || r.observed[t * s.d_x() + j];
    if (!any) bad("history.x", "covariate '" + s.x_names[j] + "' is never observed");
  }
  return r;
}

TreatmentPlan plan_from_json(const json& p, const std::string& field, const Schema& s, std::size_t horizon,
                             std::size_t index) {
  require_object(p, field);
  reject_unknown(p, field, {"label", "steps", "assignment"});
  TreatmentPlan plan;
  plan.label = "plan_" + std::to_string(index + 1);
  if (p.contains("label")) {
    if (!p["label"].is_string() || p["label"].get<std::string>().empty()) bad(field + ".label", "must be a non-empty string");
    plan.label = p["label"].get<std::string>();
  }
  const bool has_steps = p.contains("steps"), has_assign = p.contains("assignment");
  if (has_steps == has_assign) bad(field, "needs exactly one of 'steps' or 'assignment'");
  if (has_assign) {
    const auto& a = p["assignment"];
    if (!a.is_array() || a.size() != s.d_a()) bad(field + ".assignment", "must hold " + std::to_string(s.d_a()) + " values");
    std::vector<double> v;
    for (std::size_t j = 0; j < a.size(); ++j) v.push_back(binary(a[j], idx(field + ".assignment", j)));
    return TreatmentPlan::constant(plan.label, v, horizon);
  }
  const auto& st = p["steps"];
  if (!st.is_array() || st.empty()) bad(field + ".steps", "must be a non-empty array of rows");
  if (st.size() != horizon) {
    throw RequestError(422, field + ".steps",
                       "has " + std::to_string(st.size()) + " rows but the horizon is " + std::to_string(horizon));
  }
  plan.steps = matrix(st, field + ".steps", horizon, s.d_a(), false, true);
  return plan;
}

struct ParsedRequest {
  TrajectoryRecord history;
  std::size_t origin = 0;
  std::size_t horizon = 6;
  std::vector<TreatmentPlan> plans;
  std::size_t attributed = 0;  // index into plans
  std::size_t top_k = 5;
  std::size_t ig_steps = 64;
  std::size_t target = 0;
  bool include_phi = false;
  double lo = 0.0, hi = 0.0;
};

std::size_t outcome_index(const json& j, const std::string& field, const Schema& s) {
  if (j.is_string()) {
    const auto it = std::find(s.y_names.begin(), s.y_names.end(), j.get<std::string>());
    if (it == s.y_names.end()) bad(field, "names no outcome");
    return static_cast<std::size_t>(it - s.y_names.begin());
  }
  return count(j, field, 0, s.d_y() - 1);
}

}  // namespace

// ---------------------------------------------------------------- service

Service::Service(std::shared_ptr<const Model> model, ServiceConfig config)
    : model_(std::move(model)), config_(std::move(config)) {
  config_.validate();
  if (model_) digest_ = cfx::model_digest(*model_);
}

std::string Service::allowed_origin(const std::string& origin) const {
  if (origin.empty()) return {};
  for (const auto& o : config_.cors_origins) {
    if (o == "*") return "*";
    if (o == origin) return origin;
  }
  return {};
}

HttpResult Service::health() const {
  if (!model_) return {503, json{{"status", "no model loaded"}, {"format_version", kCheckpointVersion}}.dump()};
  return {200, json{{"status", "ok"},
                    {"model_digest", digest_},
                    {"format_version", kCheckpointVersion},
                    {"parameter_count", model_->parameter_count()}}
                   .dump()};
}

HttpResult Service::models() const {
  json list = json::array();
  if (!config_.models_dir.empty()) {
    std::error_code ec;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(config_.models_dir, ec)) {
      if (e.is_regular_file() && e.path().extension() == kCheckpointExtension) files.push_back(e.path());
    }
    if (ec) return {500, json{{"error", "models directory is not readable"}}.dump()};
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      json entry = {{"file", f.filename().string()}};
      try {
        const std::string bytes = read_file(f);
        deserialize_checkpoint(bytes);  // the body must parse too, not just the header
        const json header = read_checkpoint_header(f);
        entry["ok"] = true;
        entry["digest"] = sha256_hex(bytes);
        entry["format_version"] = header.value("format_version", "");
        entry["model"] = header.value("model", json::object());
        entry["training"] = header.value("training", json::object());
        entry["loaded"] = !digest_.empty() && entry["digest"] == digest_;
      } catch (const std::exception& e) {
        entry["ok"] = false;
        entry["error"] = e.what();
      }
      list.push_back(entry);
    }
  }
  return {200, json{{"models", list}}.dump()};
}

HttpResult Service::schema() const {
  const json plan = {
      {"type", "object"},
      {"description", "label plus either steps (horizon x treatments, 0/1; row k is the treatment of step origin-1+k) "
                      "or a constant assignment"},
      {"properties",
       {{"label", {{"type", "string"}}},
        {"steps", {{"type", "array"}, {"items", {{"type", "array"}, {"items", {{"enum", {0, 1}}}}}}}},
        {"assignment", {{"type", "array"}, {"items", {{"enum", {0, 1}}}}}}}},
      {"additionalProperties", false}};
  const json history = {
      {"type", "object"},
      {"description", "raw-unit history; x entries may be null (unobserved)"},
      {"required", {"a", "y"}},
      {"properties",
       {{"patient_id", {{"type", "string"}}},
        {"statics", {{"type", "array"}, {"items", {{"type", "number"}}}}},
        {"x", {{"type", "array"}, {"items", {{"type", "array"}}}}},
        {"a", {{"type", "array"}, {"items", {{"type", "array"}}}}},
        {"y", {{"type", "array"}, {"items", {{"type", "array"}}}}}}},
      {"additionalProperties", false}};
  const json common = {
      {"history", history},
      {"history_csv", {{"type", "string"}, {"description", "one patient in the trajectory CSV format"}}},
      {"dataset",
       {{"type", "object"},
        {"properties", {{"name", {{"type", "string"}}}, {"patient_id", {{"type", "string"}}}}},
        {"description", "reference to a dataset directory below the configured data root"}}},
      {"origin", {{"type", "integer"}, {"minimum", 1}, {"description", "forecast origin; defaults to the history length"}}},
      {"horizon", {{"type", "integer"}, {"minimum", 1}, {"maximum", config_.max_horizon}, {"default", 6}}},
      {"target", {{"type", {"integer", "string"}}, {"default", 0}, {"description", "outcome channel index or name"}}},
      {"ig_steps", {{"type", "integer"}, {"minimum", 8}, {"maximum", config_.max_ig_steps}, {"default", 64}}},
      {"top_k", {{"type", "integer"}, {"minimum", 1}, {"default", 5}}},
      {"include_phi", {{"type", "boolean"}, {"default", false}}}};
  json predict = {{"type", "object"}, {"description", "exactly one of history, history_csv, dataset"},
                  {"properties", common}, {"additionalProperties", false}};
  predict["properties"]["plans"] = {{"type", "array"}, {"items", plan},
                                    {"description", "defaults to none, each single treatment, all treatments"}};
  predict["properties"]["attribute_plan"] = {{"type", {"integer", "string"}}, {"default", 0},
                                             {"description", "plan index or label to attribute"}};
  predict["properties"]["target_range"] = {{"type", "array"}, {"minItems", 2}, {"maxItems", 2},
                                           {"description", "[lo, hi] in outcome units; defaults to the observed range"}};
  json attribute = {{"type", "object"}, {"properties", common}, {"additionalProperties", false}};
  attribute["properties"]["plan"] = {{"oneOf", {plan, {{"type", "string"}, {"description", "default plan label"}}}}};

  json j = {{"format_version", kCheckpointVersion},
            {"routes",
             {{"GET /health", "status and model digest; 503 without a model"},
              {"GET /models", "checkpoints in the models directory"},
              {"GET /schema", "this document"},
              {"POST /predict", "trajectories per plan, attribution for one plan, template explanation"},
              {"POST /attribute", "attribution for one plan"}}},
            {"requests", {{"predict", predict}, {"attribute", attribute}}},
            {"responses",
             {{"predict", {"model_digest", "origin", "horizon", "plans", "attribution", "explanation", "latency_ms"}},
              {"attribute", {"model_digest", "origin", "horizon", "attribution", "latency_ms"}},
              {"error", {"error", "field (4xx)", "id (500)"}}}}};
  if (model_) {
    j["model"] = {{"schema", model_->schema().to_json()},
                  {"input_names", model_->schema().input_names()},
                  {"config", model_->config().to_json()},
                  {"receptive_field", model_->encoder().receptive_field()}};
  }
  return {200, j.dump()};
}

namespace {

TrajectoryRecord resolve_history(const json& req, const Schema& s, const ServiceConfig& cfg) {
  const int sources = static_cast<int>(req.contains("history")) + static_cast<int>(req.contains("history_csv")) +
                      static_cast<int>(req.contains("dataset"));
  if (sources != 1) bad("history", "give exactly one of history, history_csv, dataset");
  if (req.contains("history")) return history_from_json(req["history"], s);
  if (req.contains("history_csv")) {
    if (!req["history_csv"].is_string()) bad("history_csv", "must be a string");
    std::vector<TrajectoryRecord> recs;
    try {
      recs = parse_trajectory_csv(req["history_csv"].get<std::string>(), s);
    } catch (const Error& e) {
      bad("history_csv", e.what());
    }
    if (recs.size() != 1) bad("history_csv", "must hold exactly one patient");
    return recs.front();
  }
  const json& d = require_object(req["dataset"], "dataset");
  reject_unknown(d, "dataset", {"name", "patient_id"});
  if (cfg.data_root.empty()) bad("dataset", "dataset references are disabled on this server");
  if (!d.contains("name") || !d["name"].is_string()) bad("dataset.name", "must be a string");
  if (!d.contains("patient_id") || !d["patient_id"].is_string()) bad("dataset.patient_id", "must be a string");
  const std::filesystem::path rel(d["name"].get<std::string>());
  if (rel.is_absolute() || rel.empty()) bad("dataset.name", "must be a relative directory name");
  for (const auto& part : rel)
    if (part == "..") bad("dataset.name", "must stay below the data root");
  Dataset ds;
  try {
    ds = load_dataset(cfg.data_root / rel);
  } catch (const Error& e) {
    bad("dataset.name", e.what());
  }
  if (!(ds.schema == s)) bad("dataset.name", "dataset schema does not match the model");
  const auto id = d["patient_id"].get<std::string>();
  for (auto& r : ds.records)
    if (r.patient_id == id) return r;
  bad("dataset.patient_id", "no such patient");
}

ParsedRequest parse_common(const json& req, const Model& model, const ServiceConfig& cfg) {
  const Schema& s = model.schema();
  ParsedRequest p;
  p.history = resolve_history(req, s, cfg);
  try {
    p.history.validate(s);
  } catch (const Error& e) {
    bad("history", e.what());
  }
  const std::size_t T = p.history.length();
  p.origin = req.contains("origin") ? count(req["origin"], "origin", 1, T) : T;
  if (req.contains("horizon")) p.horizon = count(req["horizon"], "horizon", 1, cfg.max_horizon);
  if (req.contains("target")) p.target = outcome_index(req["target"], "target", s);
  if (req.contains("ig_steps")) p.ig_steps = count(req["ig_steps"], "ig_steps", 8, cfg.max_ig_steps);
  if (req.contains("top_k")) p.top_k = count(req["top_k"], "top_k", 1, s.input_width());
  if (req.contains("include_phi")) {
    if (!req["include_phi"].is_boolean()) bad("include_phi", "must be a boolean");
    p.include_phi = req["include_phi"].get<bool>();
  }
  return p;
}

TrajectoryRecord history_prefix(const TrajectoryRecord& r, const Schema& s, std::size_t origin) {
  if (origin == r.length()) return r;
  TrajectoryRecord out = r;
  out.x = Tensor({origin, s.d_x()});
  out.a = Tensor({origin, s.d_a()});
  out.y = Tensor({origin, s.d_y()});
  out.observed.assign(r.observed.begin(), r.observed.begin() + static_cast<std::ptrdiff_t>(origin * s.d_x()));
  for (std::size_t t = 0; t < origin; ++t) {
    std::copy(r.x.row(t).begin(), r.x.row(t).end(), out.x.row(t).begin());
    std::copy(r.a.row(t).begin(), r.a.row(t).end(), out.a.row(t).begin());
    std::copy(r.y.row(t).begin(), r.y.row(t).end(), out.y.row(t).begin());
  }
  return out;
}

std::size_t select_plan(const json& j, const std::string& field, const std::vector<TreatmentPlan>& plans) {
  if (j.is_string()) {
    for (std::size_t i = 0; i < plans.size(); ++i)
      if (plans[i].label == j.get<std::string>()) return i;
    bad(field, "names no plan in the request");
  }
  return count(j, field, 0, plans.size() - 1);
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

json Service::handle_predict(const json& req) const {
  const auto t0 = std::chrono::steady_clock::now();
  reject_unknown(req, "", {"history", "history_csv", "dataset", "origin", "horizon", "target", "ig_steps", "top_k",
                           "include_phi", "plans", "attribute_plan", "target_range"});
  const Model& m = *model_;
  const Schema& s = m.schema();
  ParsedRequest p = parse_common(req, m, config_);
  if (req.contains("plans")) {
    const auto& arr = req["plans"];
    if (!arr.is_array() || arr.empty()) bad("plans", "must be a non-empty array");
    for (std::size_t i = 0; i < arr.size(); ++i) p.plans.push_back(plan_from_json(arr[i], idx("plans", i), s, p.horizon, i));
  } else {
    p.plans = default_plans(s, p.horizon);
  }
  if (req.contains("attribute_plan")) p.attributed = select_plan(req["attribute_plan"], "attribute_plan", p.plans);

  const TrajectoryRecord hist = history_prefix(p.history, s, p.origin);
  if (req.contains("target_range")) {
    const auto& r = req["target_range"];
    if (!r.is_array() || r.size() != 2) bad("target_range", "must be [lo, hi]");
    p.lo = number(r[0], "target_range[0]");
    p.hi = number(r[1], "target_range[1]");
    if (!(p.lo < p.hi)) bad("target_range", "needs lo < hi");
  } else {
    p.lo = p.hi = hist.y.at(0, p.target);
    for (std::size_t t = 0; t < hist.length(); ++t) {
      p.lo = std::min(p.lo, hist.y.at(t, p.target));
      p.hi = std::max(p.hi, hist.y.at(t, p.target));
    }
    if (p.lo == p.hi) {
      p.lo -= 1.0;
      p.hi += 1.0;
    }
  }

  const RolloutContext ctx = make_context(m, hist);
  const CounterfactualResult result = counterfactual_compare(m, ctx, p.plans);
  const AttributionReport attr = integrated_gradients(m, ctx, p.plans[p.attributed], {p.ig_steps, p.target});
  const Explanation ex = template_explanation(m, hist, result, attr, p.lo, p.hi, {}, p.top_k);

  json out = {{"model_digest", digest_},
              {"origin", result.origin},
              {"horizon", result.horizon},
              {"target_range", {p.lo, p.hi}},
              {"plans", result.to_json()["plans"]},
              {"attribution", attr.to_json(p.top_k, p.include_phi)},
              {"explanation", ex.to_json()}};
  out["latency_ms"] = elapsed_ms(t0);
  return out;
}

json Service::handle_attribute(const json& req) const {
  const auto t0 = std::chrono::steady_clock::now();
  reject_unknown(req, "", {"history", "history_csv", "dataset", "origin", "horizon", "target", "ig_steps", "top_k",
                           "include_phi", "plan"});
  const Model& m = *model_;
  const Schema& s = m.schema();
  ParsedRequest p = parse_common(req, m, config_);
  if (!req.contains("plan")) bad("plan", "is required");
  TreatmentPlan plan;
  if (req["plan"].is_string()) {
    const auto defaults = default_plans(s, p.horizon);
    const auto it = std::find_if(defaults.begin(), defaults.end(),
                                 [&](const TreatmentPlan& d) { return d.label == req["plan"].get<std::string>(); });
    if (it == defaults.end()) bad("plan", "names no default plan");
    plan = *it;
  } else {
    plan = plan_from_json(req["plan"], "plan", s, p.horizon, 0);
  }
  const TrajectoryRecord hist = history_prefix(p.history, s, p.origin);
  const RolloutContext ctx = make_context(m, hist);
  const AttributionReport attr = integrated_gradients(m, ctx, plan, {p.ig_steps, p.target});
  json out = {{"model_digest", digest_},
              {"origin", ctx.origin},
              {"horizon", p.horizon},
              {"attribution", attr.to_json(p.top_k, p.include_phi)}};
  out["latency_ms"] = elapsed_ms(t0);
  return out;
}

HttpResult Service::guarded(const char* route, const std::string& body,
                            json (Service::*handler)(const json&) const) const {
  if (!model_) return {503, json{{"error", "no model loaded"}}.dump()};
  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error& e) {
    return {400, json{{"error", std::string("request body is not valid JSON: ") + e.what()}, {"field", ""}}.dump()};
  }
  if (!req.is_object()) return {400, json{{"error", "request body must be a JSON object"}, {"field", ""}}.dump()};
  try {
    return {200, (this->*handler)(req).dump()};
  } catch (const RequestError& e) {
    return {e.status(), json{{"error", e.field() + ": " + e.what()}, {"field", e.field()}}.dump()};
  } catch (const std::exception& e) {
    static std::atomic<std::uint64_t> counter{0};
    const std::string id = sha256_hex(std::to_string(counter.fetch_add(1)) + route + e.what()).substr(0, 16);
    std::fprintf(stderr, "[%s] internal error on %s: %s\n", id.c_str(), route, e.what());
    return {500, json{{"error", "internal error"}, {"id", id}}.dump()};
  }
}

HttpResult Service::predict(const std::string& body) const { return guarded("/predict", body, &Service::handle_predict); }

HttpResult Service::attribute(const std::string& body) const {
  return guarded("/attribute", body, &Service::handle_attribute);
}

// ---------------------------------------------------------------- transport

struct HttpServer::Impl {
  const Service& service;
  httplib::Server server;
  explicit Impl(const Service& s) : service(s) {}
};

HttpServer::HttpServer(const Service& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  const Service* svc = &service;
  const std::size_t threads = service.config().threads;
  srv.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  // Small JSON replies on keep-alive connections otherwise stall on delayed ACKs.
  srv.set_tcp_nodelay(true);

  const auto reply = [](httplib::Response& res, const HttpResult& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  srv.set_pre_routing_handler([svc](const httplib::Request& req, httplib::Response& res) {
    const std::string allow = svc->allowed_origin(req.get_header_value("Origin"));
    if (!allow.empty()) {
      res.set_header("Access-Control-Allow-Origin", allow);
      res.set_header("Vary", "Origin");
    }
    if (req.method == "OPTIONS") {
      if (!allow.empty()) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.set_header("Access-Control-Max-Age", "600");
      }
      res.status = 204;
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });
  srv.Get("/health", [svc, reply](const httplib::Request&, httplib::Response& res) { reply(res, svc->health()); });
  srv.Get("/models", [svc, reply](const httplib::Request&, httplib::Response& res) { reply(res, svc->models()); });
  srv.Get("/schema", [svc, reply](const httplib::Request&, httplib::Response& res) { reply(res, svc->schema()); });
  srv.Post("/predict",
           [svc, reply](const httplib::Request& req, httplib::Response& res) { reply(res, svc->predict(req.body)); });
  srv.Post("/attribute",
           [svc, reply](const httplib::Request& req, httplib::Response& res) { reply(res, svc->attribute(req.body)); });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
  const auto& cfg = impl_->service.config();
  const int port = cfg.port == 0 ? impl_->server.bind_to_any_port(cfg.host)
                                 : (impl_->server.bind_to_port(cfg.host, cfg.port) ? cfg.port : -1);
  if (port < 0) throw Error("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
  return port;
}

void HttpServer::listen() {
  if (!impl_->server.listen_after_bind()) throw Error("server stopped with an error");
}

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace cfx
