#include "counterfact/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "counterfact/preprocess.hpp"

namespace cfx {

using nlohmann::json;

// ---------------------------------------------------------------- context and rollout

RolloutContext make_context_normalized(const Model& model, const TrajectoryRecord& normalized, std::size_t origin,
                                       const EncoderTape* full_tape) {
  const std::size_t T = normalized.length();
  if (origin < 1 || origin > T) {
    throw ShapeError("origin " + std::to_string(origin) + " outside [1, " + std::to_string(T) + "]");
  }
  RolloutContext ctx;
  ctx.origin = origin;
  ctx.inputs = encoder_inputs(normalized, model.schema(), origin);
  if (full_tape && full_tape->length >= origin) {
    ctx.tape = *full_tape;
    model.encoder().truncate(ctx.tape, origin);
  } else {
    model.encoder().forward(model.enc_params, ctx.inputs, &ctx.tape);
  }
  return ctx;
}

RolloutContext make_context(const Model& model, const TrajectoryRecord& record, std::size_t origin) {
  const Schema& s = model.schema();
  record.validate(s);
  const TrajectoryRecord norm = normalize_record(impute_locf_nocb(record, s), s, model.stats);
  return make_context_normalized(model, norm, origin == 0 ? norm.length() : origin);
}

void validate_plan(const Schema& schema, const TreatmentPlan& plan) {
  if (plan.horizon() == 0) throw ShapeError("plan '" + plan.label + "' has horizon 0");
  if (plan.steps.dim(1) != schema.d_a()) {
    throw ShapeError("plan '" + plan.label + "' has " + std::to_string(plan.steps.dim(1)) + " treatment columns, expected " +
                     std::to_string(schema.d_a()));
  }
  for (double v : plan.steps.data())
    if (v != 0.0 && v != 1.0) throw ShapeError("plan '" + plan.label + "' entries must be 0 or 1");
}

namespace {

struct Layout {
  std::size_t dx, dy, dv, da, width;
  explicit Layout(const Schema& s) : dx(s.d_x()), dy(s.d_y()), dv(s.d_v()), da(s.d_a()), width(s.input_width()) {}
  std::size_t y0() const { return dx; }
  std::size_t v0() const { return dx + dy; }
  std::size_t a0() const { return dx + dy + dv; }
};

// Next encoder row after predicting `yhat` under treatment `a`: statics and covariates carried from
// `prev` (treatment-driven covariates advanced by their declared rule), mirrored covariates and
// outcomes from the prediction.
void next_row(const Model& m, const Layout& L, std::span<const double> prev, std::span<const double> yhat,
              std::span<const double> a, std::span<double> out) {
  const Schema& s = m.schema();
  std::copy(prev.begin(), prev.begin() + static_cast<std::ptrdiff_t>(L.a0()), out.begin());
  for (const auto& d : s.covariate_dynamics) {
    const double mu = m.stats.x_mean[d.x], sd = m.stats.x_std[d.x];
    out[d.x] = d.decay * prev[d.x] + ((d.decay - 1.0) * mu + d.dose * a[d.treatment]) / sd;
  }
  for (auto [xi, yi] : s.outcome_mirrors) out[xi] = yhat[yi];
  for (std::size_t k = 0; k < L.dy; ++k) out[L.y0() + k] = yhat[k];
  for (std::size_t k = 0; k < L.da; ++k) out[L.a0() + k] = a[k];
}

std::span<const double> repr_row(const EncoderTape& tape, std::size_t s, std::size_t D) {
  return {tape.repr.data() + s * D, D};
}

// Rolls out from an encoded tape of length h whose last input row is `last`. Records hidden
// activations (tau x hidden) when requested.
Tensor rollout_on_tape(const Model& model, EncoderTape& tape, std::span<const double> last,
                       const TreatmentPlan& plan, std::vector<double>* hidden) {
  const Schema& s = model.schema();
  const Layout L(s);
  const std::size_t tau = plan.horizon(), D = model.encoder().config().repr_width, H = model.head().hidden();
  const std::size_t h = tape.length;
  Tensor out({tau, L.dy});
  std::vector<double> row(last.begin(), last.end()), next(L.width), hid(H);
  if (hidden) hidden->assign(tau * H, 0.0);
  for (std::size_t k = 0; k < tau; ++k) {
    model.head().forward(model.head_params, repr_row(tape, h - 1 + k, D), plan.steps.row(k), out.row(k), hid);
    if (hidden) std::copy(hid.begin(), hid.end(), hidden->begin() + static_cast<std::ptrdiff_t>(k * H));
    if (k + 1 < tau) {
      next_row(model, L, row, out.row(k), plan.steps.row(k), next);
      model.encoder().append(model.enc_params, tape, next);
      row.swap(next);
    }
  }
  return out;
}

}  // namespace

Tensor rollout_normalized(const Model& model, const RolloutContext& ctx, const TreatmentPlan& plan) {
  validate_plan(model.schema(), plan);
  if (ctx.tape.length != ctx.origin || ctx.inputs.dim(0) != ctx.origin) throw ShapeError("rollout context is inconsistent");
  EncoderTape tape = ctx.tape;
  return rollout_on_tape(model, tape, ctx.inputs.row(ctx.origin - 1), plan, nullptr);
}

Tensor rollout(const Model& model, const RolloutContext& ctx, const TreatmentPlan& plan) {
  Tensor y = rollout_normalized(model, ctx, plan);
  for (std::size_t k = 0; k < y.dim(0); ++k)
    for (std::size_t j = 0; j < y.dim(1); ++j) y.at(k, j) = denormalize_outcome(y.at(k, j), model.stats, j);
  return y;
}

json CounterfactualResult::to_json() const {
  json ps = json::array();
  for (std::size_t i = 0; i < plans.size(); ++i) {
    json steps = json::array();
    for (std::size_t k = 0; k < plans[i].horizon(); ++k) {
      json r = json::array();
      for (double v : plans[i].steps.row(k)) r.push_back(static_cast<int>(v));
      steps.push_back(r);
    }
    json traj = json::object();
    for (std::size_t j = 0; j < outcome_names.size(); ++j) {
      json col = json::array();
      for (std::size_t k = 0; k < horizon; ++k) col.push_back(trajectories[i].at(k, j));
      traj[outcome_names[j]] = col;
    }
    ps.push_back({{"label", plans[i].label}, {"treatments", steps}, {"trajectory", traj}});
  }
  return {{"origin", origin}, {"horizon", horizon}, {"plans", ps}};
}

CounterfactualResult counterfactual_compare(const Model& model, const RolloutContext& ctx,
                                            const std::vector<TreatmentPlan>& plans) {
  if (plans.empty()) throw ShapeError("at least one plan is required");
  const std::size_t tau = plans.front().horizon();
  for (const auto& p : plans)
    if (p.horizon() != tau) throw ShapeError("plans have different horizons");
  CounterfactualResult r;
  r.origin = ctx.origin;
  r.horizon = tau;
  r.outcome_names = model.schema().y_names;
  r.plans = plans;
  for (const auto& p : plans) r.trajectories.push_back(rollout(model, ctx, p));
  return r;
}

// ---------------------------------------------------------------- attribution

std::vector<double> integrated_gradients(
    const std::function<std::vector<double>(std::span<const double>)>& gradient, std::span<const double> input,
    std::span<const double> baseline, std::size_t steps) {
  if (steps < 8) throw ConfigError("integrated gradients needs at least 8 steps");
  if (input.size() != baseline.size()) throw ShapeError("baseline width differs from the input width");
  const std::size_t n = input.size();
  std::vector<double> acc(n, 0.0), point(n);
  for (std::size_t k = 0; k < steps; ++k) {
    const double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    for (std::size_t i = 0; i < n; ++i) point[i] = baseline[i] + alpha * (input[i] - baseline[i]);
    const auto g = gradient(point);
    if (g.size() != n) throw ShapeError("gradient width differs from the input width");
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(g[i])) throw NumericError("non-finite gradient at integration step " + std::to_string(k));
      acc[i] += g[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) acc[i] *= (input[i] - baseline[i]) / static_cast<double>(steps);
  return acc;
}

std::pair<std::vector<double>, std::vector<double>> aggregate_attribution(const Tensor& phi) {
  if (phi.rank() != 2 || phi.dim(0) == 0 || phi.dim(1) == 0) throw ShapeError("attribution matrix is empty");
  const std::size_t rows = phi.dim(0), cols = phi.dim(1);
  std::vector<double> raw(cols, 0.0);
  for (std::size_t j = 0; j < rows; ++j)
    for (std::size_t i = 0; i < cols; ++i) raw[i] += phi.at(j, i);
  for (double& v : raw) v /= static_cast<double>(rows);
  const double mx = *std::max_element(raw.begin(), raw.end());
  std::vector<double> w(cols);
  double z = 0.0;
  for (std::size_t i = 0; i < cols; ++i) z += (w[i] = std::exp(raw[i] - mx));
  for (double& v : w) v /= z;
  return {raw, w};
}

double AttributionReport::max_completeness_error() const {
  double worst = 0.0;
  for (std::size_t j = 0; j < phi_sum.size(); ++j) {
    const double d = f_input[j] - f_baseline[j];
    worst = std::max(worst, std::abs(phi_sum[j] - d) / (std::abs(d) + 1e-12));
  }
  return worst;
}

std::vector<std::size_t> AttributionReport::top_k(std::size_t k) const {
  std::vector<std::size_t> idx(omega.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return omega[a] > omega[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

json AttributionReport::to_json(std::size_t k, bool include_phi) const {
  json top = json::array();
  for (std::size_t i : top_k(k)) top.push_back({{"name", input_names[i]}, {"raw", omega_raw[i]}, {"weight", omega[i]}});
  json j = {{"plan", plan_label},
            {"target", target},
            {"steps", steps},
            {"input_names", input_names},
            {"omega_raw", omega_raw},
            {"omega", omega},
            {"top", top},
            {"baseline", {{"kind", "training cohort mean (normalized)"}, {"values", baseline}}},
            {"completeness",
             {{"f_input", f_input}, {"f_baseline", f_baseline}, {"phi_sum", phi_sum},
              {"max_relative_error", max_completeness_error()}}}};
  if (include_phi) {
    json rows = json::array(), trows = json::array();
    for (std::size_t r = 0; r < phi.dim(0); ++r) {
      rows.push_back(std::vector<double>(phi.row(r).begin(), phi.row(r).end()));
      trows.push_back(std::vector<double>(temporal.row(r).begin(), temporal.row(r).end()));
    }
    j["phi"] = rows;
    j["temporal"] = trows;
  }
  return j;
}

AttributionReport integrated_gradients(const Model& model, const RolloutContext& ctx, const TreatmentPlan& plan,
                                       const IgConfig& cfg, std::span<const double> baseline_in) {
  const Schema& s = model.schema();
  validate_plan(s, plan);
  if (cfg.steps < 8) throw ConfigError("integrated gradients needs at least 8 steps");
  if (cfg.target >= s.d_y()) throw ConfigError("attribution target outside the outcome channels");
  const Layout L(s);
  const std::span<const double> baseline = baseline_in.empty() ? std::span<const double>(model.ig_baseline) : baseline_in;
  if (baseline.size() != L.width) throw ShapeError("baseline width differs from the input width");

  const Encoder& enc = model.encoder();
  const OutcomeHead& head = model.head();
  const std::size_t tau = plan.horizon(), D = enc.config().repr_width, H = head.hidden();
  const std::size_t origin = ctx.origin;
  // Only the last receptive-field rows can reach the predictions; earlier rows get exactly zero.
  const std::size_t h = std::min(origin, enc.receptive_field());
  const std::size_t first = origin - h;
  const double ystd = model.stats.y_std[cfg.target], ymean = model.stats.y_mean[cfg.target];

  AttributionReport rep;
  rep.input_names = s.input_names();
  rep.baseline.assign(baseline.begin(), baseline.end());
  rep.steps = cfg.steps;
  rep.target = cfg.target;
  rep.plan_label = plan.label;
  rep.phi = Tensor({tau, L.width});
  rep.temporal = Tensor({tau, origin});

  Tensor hist({h, L.width});
  std::vector<Tensor> grad_sum(tau, Tensor({h, L.width}));
  EncoderTape tape;
  std::vector<double> hidden;

  auto evaluate = [&](double alpha) {
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t i = 0; i < L.width; ++i) {
        const double x = ctx.inputs.at(first + r, i);
        hist.at(r, i) = baseline[i] + alpha * (x - baseline[i]);
      }
    enc.forward(model.enc_params, hist, &tape);
    return rollout_on_tape(model, tape, hist.row(h - 1), plan, &hidden);
  };

  {
    const Tensor fx = evaluate(1.0);
    const Tensor fb = evaluate(0.0);
    for (std::size_t j = 0; j < tau; ++j) {
      rep.f_input.push_back(fx.at(j, cfg.target) * ystd + ymean);
      rep.f_baseline.push_back(fb.at(j, cfg.target) * ystd + ymean);
    }
  }

  // Non-mirrored covariates and statics of appended row h+k equal factor^(k+1) times the last
  // history row plus a constant (factor 1 when carried forward, the decay when treatment-driven).
  std::vector<double> factor(L.width, 0.0);
  for (std::size_t i = 0; i < L.a0(); ++i) factor[i] = i < L.dx || i >= L.v0() ? 1.0 : 0.0;
  for (const auto& d : s.covariate_dynamics) factor[d.x] = d.decay;
  for (auto [xi, yi] : s.outcome_mirrors) factor[xi] = 0.0;

  Tensor grad_repr, grad_in;
  std::vector<double> carry(L.width), gy(L.dy);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(cfg.steps);
    const Tensor yhat = evaluate(alpha);
    (void)yhat;
    const std::size_t rows = tape.length;
    for (std::size_t j = 0; j < tau; ++j) {
      grad_repr = Tensor({rows, D});
      std::fill(gy.begin(), gy.end(), 0.0);
      gy[cfg.target] = ystd;
      const std::size_t rj = h - 1 + j;
      head.backward(model.head_params, repr_row(tape, rj, D), plan.steps.row(j),
                    std::span<const double>(hidden.data() + j * H, H), gy, nullptr, grad_repr.row(rj));
      std::fill(carry.begin(), carry.end(), 0.0);
      auto hook = [&](std::size_t srow, std::span<const double> gin, Tensor& grepr) {
        if (srow < h) return;
        const std::size_t step = srow - h;  // this row holds the prediction of step `step`
        std::vector<double> g(L.dy, 0.0);
        for (std::size_t c = 0; c < L.dy; ++c) g[c] = gin[L.y0() + c];
        for (auto [xi, yi] : s.outcome_mirrors) g[yi] += gin[xi];
        for (std::size_t i = 0; i < L.width; ++i)
          if (factor[i] != 0.0) carry[i] += std::pow(factor[i], static_cast<double>(step + 1)) * gin[i];
        head.backward(model.head_params, repr_row(tape, h - 1 + step, D), plan.steps.row(step),
                      std::span<const double>(hidden.data() + step * H, H), g, nullptr, grepr.row(h - 1 + step));
      };
      enc.backward(model.enc_params, tape, grad_repr, nullptr, &grad_in, hook);
      Tensor& acc = grad_sum[j];
      for (std::size_t r = 0; r < h; ++r) {
        auto src = grad_in.row(r);
        auto dst = acc.row(r);
        for (std::size_t i = 0; i < L.width; ++i) dst[i] += src[i];
      }
      auto last = acc.row(h - 1);
      for (std::size_t i = 0; i < L.width; ++i) last[i] += carry[i];
    }
  }

  for (std::size_t j = 0; j < tau; ++j) {
    double total = 0.0;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t i = 0; i < L.width; ++i) {
        const double g = grad_sum[j].at(r, i) / static_cast<double>(cfg.steps);
        if (!std::isfinite(g)) throw NumericError("non-finite attribution gradient at prediction step " + std::to_string(j));
        const double v = (ctx.inputs.at(first + r, i) - baseline[i]) * g;
        rep.phi.at(j, i) += v;
        rep.temporal.at(j, first + r) += v;
        total += v;
      }
    rep.phi_sum.push_back(total);
  }
  std::tie(rep.omega_raw, rep.omega) = aggregate_attribution(rep.phi);
  return rep;
}

// ---------------------------------------------------------------- explanation

std::vector<int> largest_remainder_percent(std::span<const double> weights) {
  const std::size_t n = weights.size();
  if (n == 0) return {};
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ShapeError("preference weights must be finite and non-negative");
    sum += w;
  }
  std::vector<double> exact(n);
  for (std::size_t i = 0; i < n; ++i) exact[i] = sum > 0.0 ? 100.0 * weights[i] / sum : 100.0 / static_cast<double>(n);
  std::vector<int> out(n);
  int given = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<int>(std::floor(exact[i] + 1e-9));
    given += out[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return exact[a] - out[a] > exact[b] - out[b]; });
  for (std::size_t k = 0; given < 100; k = (k + 1) % n, ++given) out[order[k]] += 1;
  for (std::size_t k = n; given > 100; --given) {  // only reachable through the 1e-9 guard
    k = k == 0 ? n - 1 : k - 1;
    out[order[k]] -= 1;
  }
  return out;
}

std::vector<double> preference_scores(const CounterfactualResult& result, double lo, double hi,
                                      const PreferenceWeights& w, std::size_t target) {
  if (!(lo < hi)) throw ConfigError("target range needs lo < hi");
  const std::size_t n = result.plans.size(), tau = result.horizon;
  const double center = 0.5 * (lo + hi);
  std::vector<double> inside(n), var(n), dist(n), intensity(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Tensor& y = result.trajectories[p];
    double mean = 0.0, cnt = 0.0;
    for (std::size_t k = 0; k < tau; ++k) {
      const double v = y.at(k, target);
      cnt += v >= lo && v <= hi ? 1.0 : 0.0;
      mean += v;
    }
    mean /= static_cast<double>(tau);
    double ss = 0.0;
    for (std::size_t k = 0; k < tau; ++k) ss += (y.at(k, target) - mean) * (y.at(k, target) - mean);
    inside[p] = cnt / static_cast<double>(tau);
    var[p] = ss / static_cast<double>(tau);
    dist[p] = std::abs(y.at(tau - 1, target) - center);
    const auto& steps = result.plans[p].steps;
    intensity[p] = std::accumulate(steps.data().begin(), steps.data().end(), 0.0) / static_cast<double>(steps.size());
  }
  const double maxvar = *std::max_element(var.begin(), var.end());
  const double maxdist = *std::max_element(dist.begin(), dist.end());
  std::vector<double> score(n);
  for (std::size_t p = 0; p < n; ++p) {
    const double stab = maxvar > 0.0 ? 1.0 - var[p] / maxvar : 1.0;
    const double end = maxdist > 0.0 ? 1.0 - dist[p] / maxdist : 1.0;
    // shifted by the intensity weight so every score is non-negative
    score[p] = w.inside * inside[p] + w.stability * stab + w.endpoint * end + w.intensity * (1.0 - intensity[p]);
  }
  return score;
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s = buf;
  return s == "-0.00" ? "0.00" : s;
}

// Raw value of encoder input feature i at history row t.
double raw_input(const Schema& s, const TrajectoryRecord& r, std::size_t t, std::size_t i) {
  const Layout L(s);
  if (i < L.dx) return r.x.at(t, i);
  if (i < L.v0()) return r.y.at(t, i - L.dx);
  if (i < L.a0()) return r.statics[i - L.v0()];
  return t > 0 ? r.a.at(t - 1, i - L.a0()) : 0.0;
}

std::string unit_of(const Schema& s, std::size_t i) {
  const Layout L(s);
  const std::vector<std::string>* units = nullptr;
  std::size_t k = 0;
  if (i < L.dx) units = &s.x_units, k = i;
  else if (i < L.v0()) units = &s.y_units, k = i - L.dx;
  else if (i < L.a0()) units = &s.v_units, k = i - L.v0();
  if (!units || k >= units->size() || (*units)[k].empty()) return "";
  return " " + (*units)[k];
}

}  // namespace

std::string Explanation::text() const {
  return sections[0] + "\n\n" + sections[1] + "\n\n" + sections[2] + "\n\n" + sections[3] + "\n";
}

json Explanation::to_json() const {
  json pref = json::array();
  for (std::size_t i = 0; i < labels.size(); ++i) pref.push_back({{"label", labels[i]}, {"percent", preference[i]}});
  return {{"sections", {{"context", sections[0]}, {"influential_variables", sections[1]},
                        {"trajectory_comparison", sections[2]}, {"preference", sections[3]}}},
          {"preference", pref},
          {"generator", "template"}};
}

Explanation template_explanation(const Model& model, const TrajectoryRecord& history,
                                 const CounterfactualResult& result, const AttributionReport& attribution, double lo,
                                 double hi, const PreferenceWeights& w, std::size_t top_k) {
  const Schema& s = model.schema();
  const std::size_t c = attribution.target;
  const TrajectoryRecord rec = impute_locf_nocb(history, s);
  const std::size_t t_last = result.origin - 1;
  const std::string yname = s.y_names[c];
  const std::string yunit = c < s.y_units.size() && !s.y_units[c].empty() ? " " + s.y_units[c] : "";

  Explanation e;
  for (const auto& p : result.plans) e.labels.push_back(p.label);
  e.preference = largest_remainder_percent(preference_scores(result, lo, hi, w, c));

  e.sections[0] = "Patient " + (history.patient_id.empty() ? std::string("(unnamed)") : history.patient_id) + ": " +
                  std::to_string(result.origin) + " observed steps. Last observed " + yname + " is " +
                  num(rec.y.at(t_last, c)) + yunit + ". Target range is " + num(lo) + " to " + num(hi) + yunit +
                  ". Forecast horizon is " + std::to_string(result.horizon) + " steps.";

  std::string vars = "Most influential inputs for " + yname + " under plan " + attribution.plan_label + ":";
  const std::size_t window = std::min<std::size_t>(5, result.origin);
  for (std::size_t i : attribution.top_k(top_k)) {
    const double now = raw_input(s, rec, t_last, i);
    const double then = raw_input(s, rec, t_last + 1 - window, i);
    const double scale = std::max({std::abs(now), std::abs(then), 1e-12});
    std::string trend = "stable";
    if (std::abs(now - then) > 0.05 * scale) trend = now > then ? "rising" : "falling";
    vars += " " + attribution.input_names[i] + " (weight " + num(100.0 * attribution.omega[i]) + "%, value " + num(now) +
            unit_of(s, i) + ", " + trend + ");";
  }
  vars.back() = '.';
  e.sections[1] = vars;

  std::string traj = "Predicted " + yname + " over " + std::to_string(result.horizon) + " steps:";
  for (std::size_t p = 0; p < result.plans.size(); ++p) {
    const Tensor& y = result.trajectories[p];
    std::size_t in = 0;
    for (std::size_t k = 0; k < result.horizon; ++k) in += y.at(k, c) >= lo && y.at(k, c) <= hi;
    traj += " " + result.plans[p].label + " goes from " + num(y.at(0, c)) + " to " + num(y.at(result.horizon - 1, c)) +
            yunit + " with " + std::to_string(in) + " of " + std::to_string(result.horizon) + " steps in range;";
  }
  traj.back() = '.';
  e.sections[2] = traj;

  std::size_t best = 0;
  for (std::size_t p = 1; p < e.preference.size(); ++p)
    if (e.preference[p] > e.preference[best]) best = p;
  std::string pref = "Preference by time in range, stability, endpoint distance and treatment burden:";
  for (std::size_t p = 0; p < e.labels.size(); ++p) pref += " " + e.labels[p] + " " + std::to_string(e.preference[p]) + "%;";
  pref.back() = '.';
  pref += " Highest: " + e.labels[best] + ".";
  e.sections[3] = pref;
  return e;
}

}  // namespace cfx
