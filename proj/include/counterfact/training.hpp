#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/balancing.hpp"
#include "counterfact/model.hpp"
#include "counterfact/optim.hpp"

namespace cfx {

enum class BalancingMode { None, Smmd, Grl, Cdc };

const char* balancing_mode_name(BalancingMode m);
BalancingMode balancing_mode_from(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;            // patients per minibatch
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double disc_learning_rate = 1e-3;
  BalancingMode mode = BalancingMode::None;
  SmmdConfig smmd;
  KernelConfig kernel;
  double balance_weight = 1.0;            // multiplies the annealed lambda
  std::optional<std::size_t> lambda_horizon;  // E in the schedule; defaults to epochs
  std::size_t patience = 10;
  bool teacher_forcing = true;
  bool clip_gradients = false;
  double clip_norm = 1.0;
  std::uint64_t seed = 10;
  ModelConfig model;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // SHA-256 of the canonical JSON form.
  std::string digest() const;
};

struct EpochRecord {
  std::size_t epoch = 0;      // 0-based
  double lambda = 0.0;
  double train_loss = 0.0;    // mean joint loss over batches
  double pred_loss = 0.0;
  double balance_loss = 0.0;
  double val_rmse = 0.0;      // outcome units
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_rmse = 0.0;
  bool early_stopped = false;
  std::size_t parameter_count = 0;
  std::string config_digest;

  // Wall-clock seconds per epoch are left out unless asked for, so reports stay reproducible.
  nlohmann::json to_json(bool timings = false) const;
  // epoch,train_loss,val_rmse,lambda
  std::string metrics_csv() const;
};

// 2 / (1 + exp(-10 e / E)) - 1.
double lambda_schedule(double e, double E);
double joint_loss(double pred_loss, double balance_loss, double lambda);
// Mean squared error over all elements.
double prediction_loss(const Tensor& pred, const Tensor& target);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logit
};

// Class weights N / (2 N+) and N / (2 N-).
std::pair<double, double> inverse_frequency_weights(std::span<const double> labels);
LossGrad weighted_bce(std::span<const double> logits, std::span<const double> labels, double w_plus, double w_minus);
// -mean alpha (1 - p_t)^gamma log p_t, p_t = p for positives and 1 - p for negatives.
LossGrad focal_loss(std::span<const double> logits, std::span<const double> labels, double alpha, double gamma);

// Records prepared for the model: imputed, normalized, with encoder inputs.
struct PreparedSet {
  Dataset data;                 // normalized
  std::vector<Tensor> inputs;   // encoder inputs per record
};

// Imputes and normalizes a raw dataset with the model's statistics.
PreparedSet prepare_for_model(const Model& model, const Dataset& raw);

struct BatchLoss {
  double pred_loss = 0.0;
  double balance_loss = 0.0;   // sMMD, discriminator loss (grl) or confusion loss (cdc)
  double encoder_objective = 0.0;  // what the encoder and head descend
  double disc_loss = 0.0;      // what the discriminator descends
  ParamSet enc_grad, head_grad, disc_grad;
  std::size_t transitions = 0;
};

// One-step teacher-forced loss over the given records and its gradients.
// smmd: objective = pred + lambda * smmd. grl: pred - lambda * disc_loss. cdc: pred + lambda * confusion.
BatchLoss batch_loss(const Model& model, const PreparedSet& set, std::span<const std::size_t> records,
                     BalancingMode mode, double lambda, const SmmdConfig& smmd, const KernelConfig& kernel,
                     RngStream& balance_stream);

// Denormalized one-step RMSE over every transition in `set`.
double one_step_rmse(const Model& model, const PreparedSet& set);

struct TrainResult {
  Model model;           // best-validation parameters, rounded to checkpoint precision
  TrainReport report;
};

// Fits normalization on `train_raw`, trains, and returns the best-validation model.
TrainResult train(const Dataset& train_raw, const Dataset& val_raw, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// Per-input-feature mean of the encoder inputs over a prepared set.
std::vector<double> input_feature_means(const PreparedSet& set);

}  // namespace cfx
