#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/dataset.hpp"
#include "counterfact/seqmodel.hpp"

namespace cfx {

struct ModelConfig {
  EncoderConfig encoder;         // input_width is filled from the schema
  std::size_t head_hidden = 48;
  std::size_t disc_hidden = 24;
  bool discriminator = false;    // adversarial modes carry a treatment discriminator
  DiscriminatorMode disc_mode = DiscriminatorMode::PerChannel;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Encoder, outcome head and optional discriminator with their parameters, plus everything
// needed to serve predictions from raw-unit histories.
class Model {
 public:
  Model(Schema schema, ModelConfig config);

  // Fresh parameters from one stream (encoder, head, discriminator drawn from derived sub-streams).
  static Model create(const Schema& schema, ModelConfig config, const RngStream& stream);

  const Schema& schema() const noexcept { return schema_; }
  const ModelConfig& config() const noexcept { return config_; }
  const Encoder& encoder() const noexcept { return encoder_; }
  const OutcomeHead& head() const noexcept { return head_; }
  const std::optional<Discriminator>& discriminator() const noexcept { return disc_; }

  ParamSet enc_params, head_params, disc_params;
  NormalizationStats stats;           // fitted on the training split
  std::vector<double> ig_baseline;    // normalized encoder-input means over the training split
  nlohmann::json training = nlohmann::json::object();  // mode, config digest, best epoch ...

  // Scalar parameter count; the discriminator is optional.
  std::size_t parameter_count(bool include_discriminator = true) const noexcept;
  // All parameters under "encoder/", "head/", "disc/" prefixes (checkpoint order).
  ParamSet all_params() const;
  void set_all_params(const ParamSet& all);
  // Rounds every parameter to the nearest 32-bit float (checkpoint precision).
  void round_params_to_f32();

 private:
  Schema schema_;
  ModelConfig config_;
  Encoder encoder_;
  OutcomeHead head_;
  std::optional<Discriminator> disc_;
};

inline constexpr const char* kCheckpointMagic = "CFXMODEL";
inline constexpr const char* kCheckpointVersion = "1";

// 8-byte magic, u64 LE header length, header JSON, then parameter blocks as LE float32.
std::string serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
// Header only; throws ParseError when the file is not a readable checkpoint.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);
// SHA-256 of the serialized checkpoint.
std::string model_digest(const Model& model);

}  // namespace cfx
