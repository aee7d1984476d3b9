#pragma once

#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/rng.hpp"
#include "counterfact/tensor.hpp"

namespace cfx {

// Causal dilated temporal-convolution encoder. Each block is elu(conv) -> elu(conv) plus a
// residual path, followed by a final affine projection to D. ELU keeps input gradients continuous,
// which the integrated-gradients quadrature relies on.
struct EncoderConfig {
  std::size_t input_width = 0;
  std::size_t channels = 16;
  std::size_t kernel_size = 2;
  std::vector<std::size_t> dilations{1, 2, 4};
  std::size_t repr_width = 12;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Forward activations for one sequence; rows can be appended for incremental rollout.
struct EncoderTape {
  std::size_t length = 0;
  std::vector<double> input;                      // T x input_width
  std::vector<std::vector<double>> h1, h2, out;   // per block, T x channels
  std::vector<double> repr;                       // T x repr_width
};

class Encoder {
 public:
  explicit Encoder(EncoderConfig config);

  const EncoderConfig& config() const noexcept { return config_; }
  std::size_t receptive_field() const noexcept;
  ParamSet init_params(RngStream& stream) const;

  // Full-sequence forward: input is T x input_width, result is T x repr_width.
  Tensor forward(const ParamSet& p, const Tensor& input, EncoderTape* tape = nullptr) const;
  // Appends one input row to the tape and returns the new representation row.
  std::span<const double> append(const ParamSet& p, EncoderTape& tape, std::span<const double> input_row) const;
  // Keeps the first `length` rows.
  void truncate(EncoderTape& tape, std::size_t length) const;

  // Called after the input gradient of row s is final. May add into grad_repr rows < s.
  using InputHook = std::function<void(std::size_t s, std::span<const double> grad_input_row, Tensor& grad_repr)>;

  // Reverse-time backward pass. grad_repr (T x D) may be modified by the hook.
  // grads may be null (input gradient only); grad_input may be null.
  void backward(const ParamSet& p, const EncoderTape& tape, Tensor& grad_repr, ParamSet* grads,
                Tensor* grad_input = nullptr, const InputHook& hook = {}) const;

 private:
  struct View;
  View view(const ParamSet& p) const;
  void forward_row(const View& v, EncoderTape& tape, std::size_t s) const;

  EncoderConfig config_;
};

// Affine -> elu -> affine on [B_t, a_t].
class OutcomeHead {
 public:
  OutcomeHead(std::size_t repr_width, std::size_t treatment_width, std::size_t hidden, std::size_t outcome_width);

  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t outcome_width() const noexcept { return out_; }
  std::size_t treatment_width() const noexcept { return d_a_; }
  ParamSet init_params(RngStream& stream) const;

  // out has outcome_width entries; hidden_act (size hidden) is kept for backward when non-null.
  void forward(const ParamSet& p, std::span<const double> repr, std::span<const double> treatment,
               std::span<double> out, std::span<double> hidden_act) const;
  std::vector<double> predict(const ParamSet& p, std::span<const double> repr, std::span<const double> treatment) const;
  // Accumulates parameter gradients (if grads non-null) and the gradient w.r.t. repr.
  void backward(const ParamSet& p, std::span<const double> repr, std::span<const double> treatment,
                std::span<const double> hidden_act, std::span<const double> grad_out, ParamSet* grads,
                std::span<double> grad_repr) const;

 private:
  std::size_t d_, d_a_, hidden_, out_;
};

enum class DiscriminatorMode { PerChannel, Joint };

// Treatment discriminator: affine -> elu -> affine to one logit per channel
// (PerChannel) or one logit per joint arm (Joint).
class Discriminator {
 public:
  Discriminator(std::size_t repr_width, std::size_t treatment_width, std::size_t hidden, DiscriminatorMode mode);

  DiscriminatorMode mode() const noexcept { return mode_; }
  std::size_t logits() const noexcept { return logits_; }
  std::size_t treatment_width() const noexcept { return d_a_; }
  ParamSet init_params(RngStream& stream) const;

  void forward(const ParamSet& p, std::span<const double> repr, std::span<double> logits,
               std::span<double> hidden_act) const;
  // Batch convenience: N x D -> N x logits.
  Tensor discriminate(const ParamSet& p, const Tensor& repr) const;
  void backward(const ParamSet& p, std::span<const double> repr, std::span<const double> hidden_act,
                std::span<const double> grad_logits, ParamSet* grads, std::span<double> grad_repr) const;

 private:
  std::size_t d_, d_a_, hidden_, logits_;
  DiscriminatorMode mode_;
};

// Single-layer gated recurrent decoder over B_t with an affine read-out.
class ProbeDecoder {
 public:
  ProbeDecoder(std::size_t repr_width, std::size_t hidden, std::size_t output_width);

  std::size_t output_width() const noexcept { return out_; }
  ParamSet init_params(RngStream& stream) const;

  struct Tape {
    std::size_t length = 0;
    std::vector<double> h, z, r, n, hn;  // per step, hidden-sized; hn = U_n h_{t-1} + b_hn
  };

  // repr: T x D -> T x output_width
  Tensor reconstruct(const ParamSet& p, const Tensor& repr, Tape* tape = nullptr) const;
  void backward(const ParamSet& p, const Tensor& repr, const Tape& tape, const Tensor& grad_out, ParamSet& grads) const;

 private:
  std::size_t d_, hidden_, out_;
};

}  // namespace cfx
