#pragma once

#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "counterfact/rng.hpp"
#include "counterfact/seqmodel.hpp"
#include "counterfact/tensor.hpp"

namespace cfx {

// Median: sigma = sqrt(median pairwise Euclidean distance).
// MedianSquaredHalf: sigma^2 = median(squared distance) / 2.
enum class BandwidthMode { Fixed, Median, MedianSquaredHalf };

struct KernelConfig {
  BandwidthMode mode = BandwidthMode::Median;
  double sigma = 1.0;  // used when mode == Fixed

  void validate() const;
  nlohmann::json to_json() const;
  static KernelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const KernelConfig&, const KernelConfig&) = default;
};

// Joint: one group per treatment tuple (2^d_a groups). PerChannel: treated vs untreated per channel.
enum class GroupingMode { Joint, PerChannel };
// Skip: pairs where either group has fewer than subset_size members contribute nothing.
// Shrink: such pairs use min(group sizes) >= 2 as the subset size instead.
enum class PairPolicy { Skip, Shrink };

struct SmmdConfig {
  std::size_t subset_size = 200;
  GroupingMode grouping = GroupingMode::Joint;
  PairPolicy pair_policy = PairPolicy::Skip;

  void validate() const;
  nlohmann::json to_json() const;
  static SmmdConfig from_json(const nlohmann::json& j);
  friend bool operator==(const SmmdConfig&, const SmmdConfig&) = default;
};

inline constexpr double kMinBandwidth = 1e-6;

double rbf_kernel(std::span<const double> x, std::span<const double> y, double sigma);

// Bandwidth from all unordered pairs of the pooled rows (N x D), floored at kMinBandwidth.
double median_bandwidth(const Tensor& pooled, BandwidthMode mode = BandwidthMode::Median);

// Unbiased MMD^2 between two equally sized samples with a fixed bandwidth.
double mmd2_u(const Tensor& si, const Tensor& sj, double sigma);

// Same estimator with the bandwidth resolved from `kernel` on the pooled rows, and gradients
// w.r.t. both samples (including the path through a data-dependent bandwidth).
double mmd2_u_grad(const Tensor& si, const Tensor& sj, const KernelConfig& kernel, Tensor* grad_i, Tensor* grad_j);

struct BalanceResult {
  double loss = 0.0;
  Tensor grad;             // N x D, d loss / d B
  std::size_t pairs_used = 0;
  std::size_t pairs_total = 0;
};

// Group index of each row (joint tuple code a_0 + 2 a_1 + ...).
std::vector<std::size_t> joint_arm_codes(const Tensor& treatments);

// Sampling-based MMD over all group pairs, averaged with the binomial normalizer C(G, 2) of the
// grouping (per-channel mode: averaged over channels).
BalanceResult smmd_loss(const Tensor& B, const Tensor& treatments, const SmmdConfig& cfg, const KernelConfig& kernel,
                        RngStream& stream);

struct DiscriminatorLoss {
  double loss = 0.0;
  ParamSet param_grad;     // d loss / d discriminator parameters
  Tensor input_grad;       // d loss / d B (not reversed)
};

// Mean over rows of the summed per-channel binary cross-entropy (PerChannel) or the categorical
// cross-entropy over joint arms (Joint), against the true treatments.
DiscriminatorLoss discriminator_loss(const Tensor& B, const Tensor& treatments, const Discriminator& disc,
                                     const ParamSet& params);

struct AdversarialResult {
  double disc_loss = 0.0;
  ParamSet disc_grad;      // the discriminator descends its own loss
  Tensor encoder_grad;     // reversed: -d disc_loss / d B
};

AdversarialResult grl_losses(const Tensor& B, const Tensor& treatments, const Discriminator& disc,
                             const ParamSet& params);

struct ConfusionResult {
  double loss = 0.0;
  Tensor encoder_grad;     // d loss / d B
};

// Cross-entropy between the discriminator's prediction and the uniform distribution, mean over rows.
// Minimum d_a * ln 2 (PerChannel) or ln(2^d_a) (Joint), reached at uniform output.
ConfusionResult cdc_loss(const Tensor& B, const Discriminator& disc, const ParamSet& params);

}  // namespace cfx
