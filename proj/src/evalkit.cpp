#include "counterfact/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "counterfact/fileutil.hpp"
#include "counterfact/inference.hpp"
#include "counterfact/optim.hpp"
#include "counterfact/preprocess.hpp"

namespace cfx {

using nlohmann::json;

// ---------------------------------------------------------------- metrics

double rmse(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw ShapeError("rmse inputs differ in length (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(target.size()) + ")");
  }
  if (pred.empty()) throw ShapeError("rmse of an empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

namespace {

void check_binary(std::span<const int> labels, const char* what) {
  for (int v : labels)
    if (v != 0 && v != 1) throw ShapeError(std::string(what) + " must be 0 or 1");
}

double ratio_or_zero(double num, double den, bool& degenerate) {
  degenerate = den == 0.0;
  return degenerate ? 0.0 : num / den;
}

}  // namespace

ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("prediction and label counts differ");
  check_binary(predicted, "predicted labels");
  check_binary(truth, "true labels");
  ClassificationMetrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] == 1) {
      (truth[i] == 1 ? m.tp : m.fp) += 1;
    } else {
      (truth[i] == 1 ? m.fn : m.tn) += 1;
    }
  }
  const auto d = [](std::size_t v) { return static_cast<double>(v); };
  bool acc_degenerate = false;
  m.accuracy = ratio_or_zero(d(m.tp + m.tn), d(truth.size()), acc_degenerate);
  m.precision = ratio_or_zero(d(m.tp), d(m.tp + m.fp), m.precision_degenerate);
  m.recall = ratio_or_zero(d(m.tp), d(m.tp + m.fn), m.recall_degenerate);
  m.f1 = ratio_or_zero(2.0 * m.precision * m.recall, m.precision + m.recall, m.f1_degenerate);
  return m;
}

json ClassificationMetrics::to_json() const {
  return {{"tp", tp},
          {"fp", fp},
          {"tn", tn},
          {"fn", fn},
          {"accuracy", accuracy},
          {"precision", precision},
          {"recall", recall},
          {"f1", f1},
          {"precision_degenerate", precision_degenerate},
          {"recall_degenerate", recall_degenerate},
          {"f1_degenerate", f1_degenerate}};
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("score and label counts differ");
  check_binary(labels, "labels");
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ShapeError("auroc needs both classes");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("auroc score is not finite");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Walk thresholds from high to low; each tie group moves the ROC point diagonally.
  double area = 0.0, tpr_prev = 0.0, fpr_prev = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp) += 1;
      ++j;
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
    const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
    area += (fpr - fpr_prev) * (tpr + tpr_prev) / 2.0;
    tpr_prev = tpr;
    fpr_prev = fpr;
    i = j;
  }
  return area;
}

double ece(std::span<const double> probs, std::span<const int> labels, std::size_t n_bins) {
  if (probs.size() != labels.size()) throw ShapeError("probability and label counts differ");
  if (probs.empty()) throw ShapeError("ece of an empty input");
  if (n_bins == 0) throw ConfigError("ece needs at least one bin");
  check_binary(labels, "labels");
  std::vector<double> conf(n_bins, 0.0), hits(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ShapeError("probabilities must lie in [0, 1]");
    const auto b = std::min(n_bins - 1, static_cast<std::size_t>(p * static_cast<double>(n_bins)));
    conf[b] += p;
    hits[b] += labels[i];
    count[b] += 1;
  }
  const double n = static_cast<double>(probs.size());
  double e = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    e += (c / n) * std::abs(conf[b] / c - hits[b] / c);
  }
  return e;
}

PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired samples differ in length");
  if (a.size() < 2) throw ShapeError("paired t-test needs at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  PairedTTest r;
  r.mean_difference = mean;
  r.df = n - 1;
  if (sd == 0.0) {
    r.t = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_value = mean == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(r.df));
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

// ---------------------------------------------------------------- horizon RMSE

namespace {

struct HorizonAccumulator {
  std::vector<double> sse;
  std::vector<std::size_t> count;
  explicit HorizonAccumulator(std::size_t tau) : sse(tau, 0.0), count(tau, 0) {}
  void add(std::size_t k, double err) {
    sse[k] += err * err;
    count[k] += 1;
  }
  HorizonRmse finish() const {
    HorizonRmse h;
    h.count = count;
    for (std::size_t k = 0; k < sse.size(); ++k) {
      if (count[k] == 0) throw ShapeError("no evaluation window reaches horizon " + std::to_string(k + 1));
      h.rmse.push_back(std::sqrt(sse[k] / static_cast<double>(count[k])));
    }
    return h;
  }
};

void check_horizon_args(std::size_t tau_max, std::size_t t_min, std::size_t stride) {
  if (tau_max == 0) throw ConfigError("tau_max must be at least 1");
  if (t_min == 0) throw ConfigError("t_min must be at least 1");
  if (stride == 0) throw ConfigError("origin stride must be at least 1");
}

json horizon_json(const HorizonRmse& h) { return {{"rmse", h.rmse}, {"count", h.count}}; }

}  // namespace

HorizonRmse factual_horizon_rmse(const Model& model, const PreparedSet& set, std::size_t tau_max, std::size_t t_min,
                                 std::size_t origin_stride) {
  check_horizon_args(tau_max, t_min, origin_stride);
  const Schema& s = model.schema();
  const std::size_t da = s.d_a(), dy = s.d_y();
  HorizonAccumulator acc(tau_max);
  for (std::size_t r = 0; r < set.data.records.size(); ++r) {
    const TrajectoryRecord& rec = set.data.records[r];
    const auto windows = rolling_origin_windows(rec, r, tau_max, t_min);
    if (windows.empty()) continue;
    EncoderTape full;
    model.encoder().forward(model.enc_params, set.inputs[r], &full);
    for (std::size_t w = 0; w < windows.size(); w += origin_stride) {
      const std::size_t origin = windows[w].origin;
      const RolloutContext ctx = make_context_normalized(model, rec, origin, &full);
      TreatmentPlan plan{"factual", Tensor({tau_max, da})};
      for (std::size_t k = 0; k < tau_max; ++k)
        for (std::size_t j = 0; j < da; ++j) plan.steps.at(k, j) = rec.a.at(origin - 1 + k, j);
      const Tensor pred = rollout(model, ctx, plan);
      for (std::size_t k = 0; k < tau_max; ++k)
        for (std::size_t j = 0; j < dy; ++j)
          acc.add(k, pred.at(k, j) - denormalize_outcome(rec.y.at(origin + k, j), model.stats, j));
    }
  }
  return acc.finish();
}

HorizonRmse counterfactual_horizon_rmse(const Model& model, const Dataset& raw,
                                        std::span<const tumorsim::PatientTruth> truth,
                                        const tumorsim::SimCohortConfig& sim, std::size_t tau_max, std::size_t t_min,
                                        std::size_t origin_stride, tumorsim::NoiseMode noise) {
  check_horizon_args(tau_max, t_min, origin_stride);
  if (truth.size() != raw.records.size()) throw ShapeError("ground truth does not match the records");
  if (model.schema().d_y() != 1 || model.schema().d_a() != 2) {
    throw ShapeError("counterfactual RMSE needs the simulator schema");
  }
  const PreparedSet set = prepare_for_model(model, raw);
  const auto plans = default_plans(model.schema(), tau_max);
  HorizonAccumulator acc(tau_max);
  for (std::size_t r = 0; r < set.data.records.size(); ++r) {
    const TrajectoryRecord& rec = set.data.records[r];
    const auto windows = rolling_origin_windows(rec, r, tau_max, t_min);
    if (windows.empty()) continue;
    EncoderTape full;
    model.encoder().forward(model.enc_params, set.inputs[r], &full);
    for (std::size_t w = 0; w < windows.size(); w += origin_stride) {
      const std::size_t origin = windows[w].origin;
      const RolloutContext ctx = make_context_normalized(model, rec, origin, &full);
      for (const auto& plan : plans) {
        const Tensor pred = rollout(model, ctx, plan);
        const auto oracle = tumorsim::counterfactual_oracle(raw.records[r], truth[r], origin, plan.steps, sim, noise);
        for (std::size_t k = 0; k < tau_max; ++k) acc.add(k, pred.at(k, 0) - oracle[k]);
      }
    }
  }
  return acc.finish();
}

json EvalReport::to_json() const {
  json j = {{"label", label}, {"factual", horizon_json(factual)}, {"seed", seed}, {"config_digest", config_digest}};
  j["one_step_rmse"] = one_step_rmse ? json(*one_step_rmse) : json(nullptr);
  j["counterfactual"] = counterfactual ? horizon_json(*counterfactual) : json(nullptr);
  j["classification"] = classification ? classification->to_json() : json(nullptr);
  j["auroc"] = auroc ? json(*auroc) : json(nullptr);
  j["ece"] = ece ? json(*ece) : json(nullptr);
  return j;
}

std::string horizon_rmse_csv(std::span<const EvalReport> reports) {
  std::size_t tau = 0;
  for (const auto& r : reports) tau = std::max(tau, r.factual.rmse.size());
  std::string out = "model";
  for (std::size_t k = 1; k <= tau; ++k) out += ",tau_" + std::to_string(k);
  out += "\n";
  for (const auto& r : reports) {
    out += r.label;
    for (std::size_t k = 0; k < tau; ++k) out += "," + (k < r.factual.rmse.size() ? format_double(r.factual.rmse[k]) : "");
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------- probe

void ProbeConfig::validate() const {
  if (epochs == 0) throw ConfigError("probe.epochs must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("probe.learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("probe.batch_size must be at least 1");
  if (hidden == 0) throw ConfigError("probe.hidden must be at least 1");
}

json ProbeConfig::to_json() const {
  return {{"epochs", epochs}, {"learning_rate", learning_rate}, {"batch_size", batch_size}, {"hidden", hidden},
          {"seed", seed}};
}

ProbeConfig ProbeConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("probe config must be an object");
  ProbeConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "hidden") c.hidden = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown probe key '" + key + "'");
    } catch (const json::exception&) {
      throw ConfigError("probe key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

json ProbeReport::to_json() const {
  json vars = json::array();
  for (std::size_t j = 0; j < variables.size(); ++j)
    vars.push_back({{"name", variables[j]}, {"r2", r2[j]}, {"constant", static_cast<bool>(constant[j])}});
  return {{"variables", vars}, {"train_loss", train_loss}, {"val_loss", val_loss}, {"encoder_digest", encoder_digest}};
}

std::string encoder_digest(const Model& model) {
  std::string bytes;
  for (const auto& e : model.enc_params.entries()) {
    bytes += e.name;
    bytes.push_back('\0');
    const auto d = e.value.data();
    bytes.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

namespace {

// Normalized per-step targets (covariates then outcomes), the observation mask and the frozen
// representations of every record.
struct ProbeData {
  std::vector<Tensor> repr, target, mask;
};

ProbeData probe_data(const Model& model, const Dataset& raw) {
  const PreparedSet set = prepare_for_model(model, raw);
  const Schema& s = model.schema();
  const std::size_t dx = s.d_x(), dy = s.d_y(), w = dx + dy;
  ProbeData d;
  for (std::size_t r = 0; r < set.data.records.size(); ++r) {
    const auto& rec = set.data.records[r];
    const std::size_t T = rec.length();
    if (T == 0) continue;
    d.repr.push_back(model.encoder().forward(model.enc_params, set.inputs[r]));
    Tensor tgt({T, w}), m({T, w}, 1.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < dx; ++j) {
        tgt.at(t, j) = rec.x.at(t, j);
        m.at(t, j) = rec.observed[t * dx + j] ? 1.0 : 0.0;
      }
      for (std::size_t j = 0; j < dy; ++j) tgt.at(t, dx + j) = rec.y.at(t, j);
    }
    d.target.push_back(std::move(tgt));
    d.mask.push_back(std::move(m));
  }
  return d;
}

// Masked squared error of one sequence; fills grad (d sum / d out) when non-null.
double masked_sse(const Tensor& out, const Tensor& target, const Tensor& mask, Tensor* grad) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = (out[i] - target[i]) * mask[i];
    s += e * e;
    if (grad) (*grad)[i] = 2.0 * e;
  }
  return s;
}

double mask_total(const ProbeData& d) {
  double n = 0.0;
  for (const auto& m : d.mask)
    for (double v : m.data()) n += v;
  return n;
}

}  // namespace

ProbeReport reconstruction_probe(const Model& model, const Dataset& train_raw, const Dataset& val_raw,
                                 const ProbeConfig& cfg,
                                 const std::function<void(std::size_t, double, double)>& on_epoch) {
  cfg.validate();
  const Schema& s = model.schema();
  ProbeReport rep;
  for (const auto& n : s.x_names) rep.variables.push_back(n);
  for (const auto& n : s.y_names) rep.variables.push_back(n);
  const std::size_t W = rep.variables.size();
  rep.encoder_digest = encoder_digest(model);

  const ProbeData tr = probe_data(model, train_raw);
  const ProbeData va = probe_data(model, val_raw);
  if (tr.repr.empty() || va.repr.empty()) throw ShapeError("probe needs non-empty train and validation sets");
  const double tr_n = mask_total(tr), va_n = mask_total(va);
  if (tr_n == 0.0 || va_n == 0.0) throw ShapeError("probe targets are entirely unobserved");

  const ProbeDecoder dec(model.encoder().config().repr_width, cfg.hidden, W);
  const RngStream root(cfg.seed, 0x70726f62);
  RngStream init = root.derive(0);
  RngStream order_stream = root.derive(1);
  ParamSet params = dec.init_params(init);
  AdamState adam = AdamState::for_params(params, {.learning_rate = cfg.learning_rate});
  ParamSet grads = params.zeros_like();

  const auto evaluate = [&](const ProbeData& d, double n) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.repr.size(); ++i) s += masked_sse(dec.reconstruct(params, d.repr[i]), d.target[i], d.mask[i], nullptr);
    return s / n;
  };

  std::vector<std::size_t> order(tr.repr.size());
  std::iota(order.begin(), order.end(), 0);
  ProbeDecoder::Tape tape;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    shuffle(order_stream, order);
    double epoch_sse = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      double n = 0.0;
      for (std::size_t k = b0; k < b1; ++k)
        for (double v : tr.mask[order[k]].data()) n += v;
      if (n == 0.0) continue;
      grads.set_zero();
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        const Tensor out = dec.reconstruct(params, tr.repr[i], &tape);
        Tensor g = Tensor::zeros_like(out);
        epoch_sse += masked_sse(out, tr.target[i], tr.mask[i], &g);
        g *= 1.0 / n;
        dec.backward(params, tr.repr[i], tape, g, grads);
      }
      adam_step(params, grads, adam);
    }
    const double train_loss = epoch_sse / tr_n;
    const double val_loss = evaluate(va, va_n);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss)) {
      throw NumericError("probe loss is not finite at epoch " + std::to_string(e));
    }
    rep.train_loss.push_back(train_loss);
    rep.val_loss.push_back(val_loss);
    if (on_epoch) on_epoch(e, train_loss, val_loss);
  }

  // R^2 per variable on validation, over observed entries, against the validation mean.
  std::vector<double> sum(W, 0.0), cnt(W, 0.0), sse(W, 0.0), sst(W, 0.0);
  std::vector<Tensor> outs;
  for (std::size_t i = 0; i < va.repr.size(); ++i) {
    outs.push_back(dec.reconstruct(params, va.repr[i]));
    for (std::size_t t = 0; t < va.target[i].dim(0); ++t)
      for (std::size_t j = 0; j < W; ++j)
        if (va.mask[i].at(t, j) != 0.0) {
          sum[j] += va.target[i].at(t, j);
          cnt[j] += 1.0;
        }
  }
  for (std::size_t i = 0; i < va.repr.size(); ++i)
    for (std::size_t t = 0; t < va.target[i].dim(0); ++t)
      for (std::size_t j = 0; j < W; ++j)
        if (va.mask[i].at(t, j) != 0.0) {
          const double y = va.target[i].at(t, j);
          const double mean = sum[j] / cnt[j];
          sse[j] += (outs[i].at(t, j) - y) * (outs[i].at(t, j) - y);
          sst[j] += (y - mean) * (y - mean);
        }
  for (std::size_t j = 0; j < W; ++j) {
    const bool flat = cnt[j] == 0.0 || sst[j] <= 1e-12 * std::max(1.0, cnt[j]);
    rep.constant.push_back(flat);
    rep.r2.push_back(flat ? 0.0 : 1.0 - sse[j] / sst[j]);
  }
  if (encoder_digest(model) != rep.encoder_digest) throw Error("probe modified the encoder parameters");
  return rep;
}

DeltaR2 delta_r2(const ProbeReport& unbalanced, const ProbeReport& balanced) {
  if (unbalanced.variables != balanced.variables) throw ShapeError("probe reports cover different variables");
  if (unbalanced.r2.size() != unbalanced.variables.size() || balanced.r2.size() != balanced.variables.size() ||
      unbalanced.constant.size() != unbalanced.variables.size() || balanced.constant.size() != balanced.variables.size()) {
    throw ShapeError("probe report is malformed");
  }
  DeltaR2 d;
  d.variables = unbalanced.variables;
  for (std::size_t j = 0; j < d.variables.size(); ++j) {
    const bool skip = unbalanced.constant[j] || balanced.constant[j];
    d.excluded.push_back(skip);
    d.delta.push_back(skip ? 0.0 : unbalanced.r2[j] - balanced.r2[j]);
  }
  return d;
}

json DeltaR2::to_json() const {
  json vars = json::array();
  for (std::size_t j = 0; j < variables.size(); ++j) {
    json v = {{"name", variables[j]}, {"delta_r2", excluded[j] ? json(nullptr) : json(delta[j])}};
    if (excluded[j]) v["note"] = "constant on validation; excluded";
    vars.push_back(v);
  }
  return {{"variables", vars}};
}

// ---------------------------------------------------------------- export

std::string export_representations(const Model& model, const Dataset& raw) {
  const PreparedSet set = prepare_for_model(model, raw);
  const Schema& s = model.schema();
  const std::size_t D = model.encoder().config().repr_width;
  std::string out = "patient_id,t";
  for (std::size_t k = 1; k <= D; ++k) out += ",B_" + std::to_string(k);
  for (const auto& n : s.a_names) out += ",a_" + n;
  for (const auto& n : s.v_names) out += ",v_" + n;
  out += "\n";
  for (std::size_t r = 0; r < set.data.records.size(); ++r) {
    const TrajectoryRecord& raw_rec = raw.records[r];
    const Tensor B = model.encoder().forward(model.enc_params, set.inputs[r]);
    for (std::size_t t = 0; t < raw_rec.length(); ++t) {
      out += raw_rec.patient_id + "," + std::to_string(t);
      for (std::size_t k = 0; k < D; ++k) out += "," + format_double(B.at(t, k));
      for (std::size_t j = 0; j < s.d_a(); ++j) out += "," + format_double(raw_rec.a.at(t, j));
      for (double v : raw_rec.statics) out += "," + format_double(v);
      out += "\n";
    }
  }
  return out;
}

void export_representations(const Model& model, const Dataset& raw, const std::filesystem::path& path) {
  write_file_atomic(path, export_representations(model, raw));
}

}  // namespace cfx
