#include "counterfact/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "counterfact/fileutil.hpp"
#include "counterfact/preprocess.hpp"

namespace cfx {

using nlohmann::json;

const char* balancing_mode_name(BalancingMode m) {
  switch (m) {
    case BalancingMode::None: return "none";
    case BalancingMode::Smmd: return "smmd";
    case BalancingMode::Grl: return "grl";
    case BalancingMode::Cdc: return "cdc";
  }
  return "none";
}

BalancingMode balancing_mode_from(const std::string& s) {
  if (s == "none") return BalancingMode::None;
  if (s == "smmd") return BalancingMode::Smmd;
  if (s == "grl") return BalancingMode::Grl;
  if (s == "cdc") return BalancingMode::Cdc;
  throw ConfigError("unknown balancing mode '" + s + "' (expected none, smmd, grl or cdc)");
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (!(disc_learning_rate > 0.0)) throw ConfigError("train.disc_learning_rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (patience < 1) throw ConfigError("train.patience must be >= 1");
  if (balance_weight < 0.0) throw ConfigError("train.balance_weight must be non-negative");
  if (lambda_horizon && *lambda_horizon < 1) throw ConfigError("train.lambda_horizon must be >= 1");
  if (clip_gradients && !(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  smmd.validate();
  kernel.validate();
  const bool adversarial = mode == BalancingMode::Grl || mode == BalancingMode::Cdc;
  if (model.discriminator != adversarial) {
    throw ConfigError("model.discriminator must be set exactly for the grl and cdc modes");
  }
}

json TrainConfig::to_json() const {
  json j = {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"disc_learning_rate", disc_learning_rate},
            {"mode", balancing_mode_name(mode)},
            {"smmd", smmd.to_json()},
            {"kernel", kernel.to_json()},
            {"balance_weight", balance_weight},
            {"patience", patience},
            {"teacher_forcing", teacher_forcing},
            {"clip_gradients", clip_gradients},
            {"clip_norm", clip_norm},
            {"seed", seed},
            {"model", model.to_json()}};
  j["lambda_horizon"] = lambda_horizon ? json(*lambda_horizon) : json(nullptr);
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  static const std::set<std::string> known{"epochs",        "batch_size",      "learning_rate", "weight_decay",
                                           "disc_learning_rate", "mode",       "smmd",          "kernel",
                                           "balance_weight", "lambda_horizon", "patience",      "teacher_forcing",
                                           "clip_gradients", "clip_norm",      "seed",          "model"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("unknown train key '" + it.key() + "'");
  TrainConfig c;
  try {
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("disc_learning_rate")) c.disc_learning_rate = j["disc_learning_rate"].get<double>();
    if (j.contains("mode")) c.mode = balancing_mode_from(j["mode"].get<std::string>());
    if (j.contains("smmd")) c.smmd = SmmdConfig::from_json(j["smmd"]);
    if (j.contains("kernel")) c.kernel = KernelConfig::from_json(j["kernel"]);
    if (j.contains("balance_weight")) c.balance_weight = j["balance_weight"].get<double>();
    if (j.contains("lambda_horizon") && !j["lambda_horizon"].is_null())
      c.lambda_horizon = j["lambda_horizon"].get<std::size_t>();
    if (j.contains("patience")) c.patience = j["patience"].get<std::size_t>();
    if (j.contains("teacher_forcing")) c.teacher_forcing = j["teacher_forcing"].get<bool>();
    if (j.contains("clip_gradients")) c.clip_gradients = j["clip_gradients"].get<bool>();
    if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("model")) {
      const json& m = j["model"];
      static const std::set<std::string> mk{"encoder", "head_hidden", "disc_hidden", "discriminator", "disc_mode"};
      for (auto it = m.begin(); it != m.end(); ++it)
        if (!mk.contains(it.key())) throw ConfigError("unknown model key '" + it.key() + "'");
      if (m.contains("encoder")) {
        const json& e = m["encoder"];
        static const std::set<std::string> ek{"input_width", "channels", "kernel_size", "dilations", "repr_width"};
        for (auto it = e.begin(); it != e.end(); ++it)
          if (!ek.contains(it.key())) throw ConfigError("unknown encoder key '" + it.key() + "'");
        if (e.contains("channels")) c.model.encoder.channels = e["channels"].get<std::size_t>();
        if (e.contains("kernel_size")) c.model.encoder.kernel_size = e["kernel_size"].get<std::size_t>();
        if (e.contains("dilations")) c.model.encoder.dilations = e["dilations"].get<std::vector<std::size_t>>();
        if (e.contains("repr_width")) c.model.encoder.repr_width = e["repr_width"].get<std::size_t>();
        if (e.contains("input_width")) c.model.encoder.input_width = e["input_width"].get<std::size_t>();
      }
      if (m.contains("head_hidden")) c.model.head_hidden = m["head_hidden"].get<std::size_t>();
      if (m.contains("disc_hidden")) c.model.disc_hidden = m["disc_hidden"].get<std::size_t>();
      if (m.contains("discriminator")) c.model.discriminator = m["discriminator"].get<bool>();
      if (m.contains("disc_mode")) {
        const auto s = m["disc_mode"].get<std::string>();
        if (s == "joint") c.model.disc_mode = DiscriminatorMode::Joint;
        else if (s == "per_channel") c.model.disc_mode = DiscriminatorMode::PerChannel;
        else throw ConfigError("unknown discriminator mode '" + s + "'");
      }
    } else {
      c.model.discriminator = c.mode == BalancingMode::Grl || c.mode == BalancingMode::Cdc;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  }
  return c;
}

std::string TrainConfig::digest() const { return sha256_hex(to_json().dump()); }

json TrainReport::to_json(bool timings) const {
  json ep = json::array();
  for (const auto& e : epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"lambda", e.lambda},
                  {"train_loss", e.train_loss},
                  {"pred_loss", e.pred_loss},
                  {"balance_loss", e.balance_loss},
                  {"val_rmse", e.val_rmse}});
    if (timings) ep.back()["seconds"] = e.seconds;
  }
  return {{"epochs", ep},
          {"best_epoch", best_epoch},
          {"best_val_rmse", best_val_rmse},
          {"early_stopped", early_stopped},
          {"parameter_count", parameter_count},
          {"config_digest", config_digest}};
}

std::string TrainReport::metrics_csv() const {
  std::string out = "epoch,train_loss,val_rmse,lambda\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," + format_double(e.val_rmse) + "," +
           format_double(e.lambda) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------- losses

double lambda_schedule(double e, double E) {
  if (!(E >= 1.0)) throw ConfigError("lambda schedule needs E >= 1");
  if (e < 0.0 || e > E) throw ConfigError("lambda schedule epoch outside [0, E]");
  return 2.0 / (1.0 + std::exp(-10.0 * e / E)) - 1.0;
}

double joint_loss(double pred_loss, double balance_loss, double lambda) { return pred_loss + lambda * balance_loss; }

double prediction_loss(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw ShapeError("prediction_loss: shapes differ");
  if (pred.size() == 0) throw ShapeError("prediction_loss: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

namespace {

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_labels(std::span<const double> logits, std::span<const double> labels) {
  if (logits.size() != labels.size()) throw ShapeError("logits and labels differ in length");
  if (logits.empty()) throw ShapeError("empty batch");
  for (double y : labels)
    if (y != 0.0 && y != 1.0) throw ShapeError("labels must be 0 or 1");
}

}  // namespace

std::pair<double, double> inverse_frequency_weights(std::span<const double> labels) {
  const double n = static_cast<double>(labels.size());
  const double pos = std::accumulate(labels.begin(), labels.end(), 0.0);
  const double neg = n - pos;
  if (pos == 0.0 || neg == 0.0) throw ShapeError("class weights need both classes");
  return {n / (2.0 * pos), n / (2.0 * neg)};
}

LossGrad weighted_bce(std::span<const double> logits, std::span<const double> labels, double w_plus, double w_minus) {
  check_labels(logits, labels);
  LossGrad out;
  out.grad.resize(logits.size());
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i], y = labels[i];
    out.loss -= inv_n * (w_plus * y * log_sigmoid(z) + w_minus * (1.0 - y) * log_sigmoid(-z));
    const double p = sigmoid(z);
    out.grad[i] = inv_n * (w_plus * y * (p - 1.0) + w_minus * (1.0 - y) * p);
  }
  return out;
}

LossGrad focal_loss(std::span<const double> logits, std::span<const double> labels, double alpha, double gamma) {
  check_labels(logits, labels);
  if (gamma < 0.0) throw ConfigError("focal gamma must be non-negative");
  LossGrad out;
  out.grad.resize(logits.size());
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double s = labels[i] == 1.0 ? 1.0 : -1.0;
    const double u = s * logits[i];
    const double log_pt = log_sigmoid(u);
    const double pt = sigmoid(u);
    const double q = sigmoid(-u);  // 1 - p_t without cancellation
    const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    out.loss -= inv_n * alpha * mod * log_pt;
    // dL/du = -alpha (1-p_t)^gamma [(1 - p_t) - gamma p_t log p_t]
    const double dldu = -alpha * mod * (q - gamma * pt * log_pt);
    out.grad[i] = inv_n * s * dldu;
  }
  return out;
}

// ---------------------------------------------------------------- data

std::vector<double> input_feature_means(const PreparedSet& set) {
  const std::size_t w = set.data.schema.input_width();
  std::vector<double> mean(w, 0.0);
  std::size_t n = 0;
  for (const auto& in : set.inputs) {
    for (std::size_t s = 0; s < in.dim(0); ++s)
      for (std::size_t j = 0; j < w; ++j) mean[j] += in.at(s, j);
    n += in.dim(0);
  }
  if (n > 0)
    for (double& m : mean) m /= static_cast<double>(n);
  return mean;
}

namespace {

PreparedSet prepare_with_stats(const Dataset& raw, const NormalizationStats& stats) {
  PreparedSet p;
  p.data = zscore_apply(impute_dataset(raw), stats);
  p.inputs.reserve(p.data.records.size());
  for (const auto& r : p.data.records) p.inputs.push_back(encoder_inputs(r, p.data.schema));
  return p;
}

}  // namespace

PreparedSet prepare_for_model(const Model& model, const Dataset& raw) {
  if (!(raw.schema == model.schema())) throw ShapeError("dataset schema does not match the model");
  if (raw.stats) throw Error("prepare_for_model expects a dataset in raw units");
  return prepare_with_stats(raw, model.stats);
}

// ---------------------------------------------------------------- batch loss

BatchLoss batch_loss(const Model& model, const PreparedSet& set, std::span<const std::size_t> records,
                     BalancingMode mode, double lambda, const SmmdConfig& smmd, const KernelConfig& kernel,
                     RngStream& balance_stream) {
  const Encoder& enc = model.encoder();
  const OutcomeHead& head = model.head();
  const std::size_t D = enc.config().repr_width;
  const std::size_t da = model.schema().d_a(), dy = model.schema().d_y();
  const std::size_t H = head.hidden();
  if ((mode == BalancingMode::Grl || mode == BalancingMode::Cdc) && !model.discriminator()) {
    throw ConfigError("adversarial balancing needs a model with a discriminator");
  }

  BatchLoss out;
  out.enc_grad = model.enc_params.zeros_like();
  out.head_grad = model.head_params.zeros_like();
  out.disc_grad = model.disc_params.zeros_like();

  std::size_t M = 0;
  for (std::size_t idx : records) {
    const std::size_t T = set.data.records.at(idx).length();
    if (T >= 2) M += T - 1;
  }
  out.transitions = M;
  if (M == 0) return out;
  const double scale = 2.0 / static_cast<double>(M * dy);

  struct Item {
    std::size_t record;
    EncoderTape tape;
    Tensor grad_repr;
    std::size_t row_offset;
  };
  std::vector<Item> items;
  items.reserve(records.size());
  Tensor B({M, D}), A({M, da});
  std::vector<double> yhat(dy), hid(H), gy(dy);
  double sq = 0.0;
  std::size_t row = 0;
  for (std::size_t idx : records) {
    const auto& rec = set.data.records[idx];
    const std::size_t T = rec.length();
    if (T < 2) continue;
    Item it{idx, {}, Tensor({T, D}), row};
    Tensor repr = enc.forward(model.enc_params, set.inputs[idx], &it.tape);
    for (std::size_t s = 0; s + 1 < T; ++s) {
      head.forward(model.head_params, repr.row(s), rec.a.row(s), yhat, hid);
      for (std::size_t k = 0; k < dy; ++k) {
        const double e = yhat[k] - rec.y.at(s + 1, k);
        sq += e * e;
        gy[k] = scale * e;
      }
      head.backward(model.head_params, repr.row(s), rec.a.row(s), hid, gy, &out.head_grad, it.grad_repr.row(s));
      std::copy(repr.row(s).begin(), repr.row(s).end(), B.row(row).begin());
      std::copy(rec.a.row(s).begin(), rec.a.row(s).end(), A.row(row).begin());
      ++row;
    }
    items.push_back(std::move(it));
  }
  out.pred_loss = sq / static_cast<double>(M * dy);

  Tensor bal_grad;  // d (lambda-weighted balance term of the encoder objective) / d B
  switch (mode) {
    case BalancingMode::None:
      out.encoder_objective = out.pred_loss;
      break;
    case BalancingMode::Smmd: {
      auto r = smmd_loss(B, A, smmd, kernel, balance_stream);
      out.balance_loss = r.loss;
      out.encoder_objective = joint_loss(out.pred_loss, r.loss, lambda);
      bal_grad = std::move(r.grad);
      bal_grad *= lambda;
      break;
    }
    case BalancingMode::Grl: {
      auto r = grl_losses(B, A, *model.discriminator(), model.disc_params);
      out.balance_loss = r.disc_loss;
      out.disc_loss = r.disc_loss;
      out.disc_grad = std::move(r.disc_grad);
      out.encoder_objective = out.pred_loss - lambda * r.disc_loss;
      bal_grad = std::move(r.encoder_grad);
      bal_grad *= lambda;
      break;
    }
    case BalancingMode::Cdc: {
      auto d = discriminator_loss(B, A, *model.discriminator(), model.disc_params);
      out.disc_loss = d.loss;
      out.disc_grad = std::move(d.param_grad);
      auto c = cdc_loss(B, *model.discriminator(), model.disc_params);
      out.balance_loss = c.loss;
      out.encoder_objective = joint_loss(out.pred_loss, c.loss, lambda);
      bal_grad = std::move(c.encoder_grad);
      bal_grad *= lambda;
      break;
    }
  }

  for (auto& it : items) {
    if (!bal_grad.empty()) {
      const std::size_t n = set.data.records[it.record].length() - 1;
      for (std::size_t s = 0; s < n; ++s) {
        auto dst = it.grad_repr.row(s);
        auto src = bal_grad.row(it.row_offset + s);
        for (std::size_t k = 0; k < D; ++k) dst[k] += src[k];
      }
    }
    enc.backward(model.enc_params, it.tape, it.grad_repr, &out.enc_grad);
  }
  return out;
}

double one_step_rmse(const Model& model, const PreparedSet& set) {
  const auto& st = model.stats;
  const std::size_t dy = model.schema().d_y();
  double sq = 0.0;
  std::size_t n = 0;
  std::vector<double> yhat(dy), hid(model.head().hidden());
  for (std::size_t i = 0; i < set.data.records.size(); ++i) {
    const auto& rec = set.data.records[i];
    const std::size_t T = rec.length();
    if (T < 2) continue;
    Tensor repr = model.encoder().forward(model.enc_params, set.inputs[i]);
    for (std::size_t s = 0; s + 1 < T; ++s) {
      model.head().forward(model.head_params, repr.row(s), rec.a.row(s), yhat, hid);
      for (std::size_t k = 0; k < dy; ++k) {
        const double e = denormalize_outcome(yhat[k], st, k) - denormalize_outcome(rec.y.at(s + 1, k), st, k);
        sq += e * e;
        ++n;
      }
    }
  }
  if (n == 0) throw ShapeError("no transitions to evaluate");
  return std::sqrt(sq / static_cast<double>(n));
}

// ---------------------------------------------------------------- training loop

namespace {

// Replaces outcome inputs (and their covariate mirrors) from step 1 on with the model's own
// one-step predictions, computed sequentially without gradients.
Tensor free_running_inputs(const Model& model, const TrajectoryRecord& rec, const Tensor& inputs) {
  const Schema& s = model.schema();
  const std::size_t T = rec.length(), dx = s.d_x(), dy = s.d_y();
  Tensor out = inputs;
  EncoderTape tape;
  std::vector<double> yhat(dy), hid(model.head().hidden());
  for (std::size_t t = 0; t + 1 < T; ++t) {
    auto repr = model.encoder().append(model.enc_params, tape, out.row(t));
    model.head().forward(model.head_params, repr, rec.a.row(t), yhat, hid);
    auto next = out.row(t + 1);
    for (std::size_t k = 0; k < dy; ++k) next[dx + k] = yhat[k];
    for (auto [xi, yi] : s.outcome_mirrors) next[xi] = yhat[yi];
  }
  return out;
}

}  // namespace

TrainResult train(const Dataset& train_raw, const Dataset& val_raw, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train_raw.records.empty()) throw Error("training set is empty");
  if (val_raw.records.empty()) throw Error("validation set is empty");
  if (!(train_raw.schema == val_raw.schema)) throw ShapeError("train and validation schemas differ");

  const RngStream root(cfg.seed, 0x7261696eULL);
  Model model = Model::create(train_raw.schema, cfg.model, root.derive(0));
  model.stats = zscore_fit(impute_dataset(train_raw));
  PreparedSet tr = prepare_with_stats(train_raw, model.stats);
  PreparedSet va = prepare_with_stats(val_raw, model.stats);
  model.ig_baseline = input_feature_means(tr);
  model.training = {{"mode", balancing_mode_name(cfg.mode)},
                    {"config_digest", cfg.digest()},
                    {"seed", cfg.seed}};

  RngStream shuffle_stream = root.derive(1);
  RngStream balance_stream = root.derive(2);

  ParamSet main_params;
  AdamConfig ac;
  ac.learning_rate = cfg.learning_rate;
  ac.weight_decay = cfg.weight_decay;
  AdamState enc_state = AdamState::for_params(model.enc_params, ac);
  AdamState head_state = AdamState::for_params(model.head_params, ac);
  AdamConfig dc = ac;
  dc.learning_rate = cfg.disc_learning_rate;
  AdamState disc_state = AdamState::for_params(model.disc_params, dc);

  const double E = static_cast<double>(cfg.lambda_horizon.value_or(cfg.epochs));
  TrainReport report;
  report.parameter_count = model.parameter_count(true);
  report.config_digest = cfg.digest();
  std::optional<Model> best;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(tr.data.records.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = e;
    rec.lambda = cfg.balance_weight * lambda_schedule(std::min(static_cast<double>(e), E), E);
    shuffle(shuffle_stream, order);

    PreparedSet free_running;
    const PreparedSet* source = &tr;
    if (!cfg.teacher_forcing) {
      free_running.data = tr.data;
      free_running.inputs.reserve(tr.inputs.size());
      for (std::size_t i = 0; i < tr.inputs.size(); ++i)
        free_running.inputs.push_back(free_running_inputs(model, tr.data.records[i], tr.inputs[i]));
      source = &free_running;
    }

    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      BatchLoss bl = batch_loss(model, *source, idx, cfg.mode, rec.lambda, cfg.smmd, cfg.kernel, balance_stream);
      const double total = cfg.mode == BalancingMode::Grl ? joint_loss(bl.pred_loss, bl.balance_loss, rec.lambda)
                                                           : bl.encoder_objective;
      if (!std::isfinite(total) || !bl.enc_grad.all_finite() || !bl.head_grad.all_finite() ||
          !bl.disc_grad.all_finite()) {
        throw NumericError("non-finite loss at epoch " + std::to_string(e) + ", batch " + std::to_string(batches));
      }
      if (bl.transitions == 0) continue;
      if (cfg.clip_gradients) {
        ParamSet joint;
        joint.append(bl.enc_grad, "e/");
        joint.append(bl.head_grad, "h/");
        const double norm = std::sqrt(joint.squared_norm());
        if (norm > cfg.clip_norm) {
          bl.enc_grad *= cfg.clip_norm / norm;
          bl.head_grad *= cfg.clip_norm / norm;
        }
      }
      adam_step(model.enc_params, bl.enc_grad, enc_state);
      adam_step(model.head_params, bl.head_grad, head_state);
      if (model.discriminator()) adam_step(model.disc_params, bl.disc_grad, disc_state);
      rec.train_loss += total;
      rec.pred_loss += bl.pred_loss;
      rec.balance_loss += bl.balance_loss;
      ++batches;
    }
    if (batches > 0) {
      rec.train_loss /= static_cast<double>(batches);
      rec.pred_loss /= static_cast<double>(batches);
      rec.balance_loss /= static_cast<double>(batches);
    }

    Model snapshot = model;
    snapshot.round_params_to_f32();
    rec.val_rmse = one_step_rmse(snapshot, va);
    if (!std::isfinite(rec.val_rmse)) throw NumericError("non-finite validation RMSE at epoch " + std::to_string(e));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!best || rec.val_rmse < report.best_val_rmse) {
      best = std::move(snapshot);
      report.best_val_rmse = rec.val_rmse;
      report.best_epoch = e;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      report.early_stopped = true;
      break;
    }
  }
  best->training["best_epoch"] = report.best_epoch;
  best->training["best_val_rmse"] = report.best_val_rmse;
  return {std::move(*best), std::move(report)};
}

}  // namespace cfx
