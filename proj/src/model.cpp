#include "counterfact/model.hpp"

#include <bit>
#include <cstring>

#include "counterfact/fileutil.hpp"

namespace cfx {

using nlohmann::json;

namespace {

const char* mode_name(DiscriminatorMode m) { return m == DiscriminatorMode::Joint ? "joint" : "per_channel"; }

DiscriminatorMode mode_from(const std::string& s) {
  if (s == "joint") return DiscriminatorMode::Joint;
  if (s == "per_channel") return DiscriminatorMode::PerChannel;
  throw ConfigError("unknown discriminator mode '" + s + "'");
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const std::string& in, std::size_t pos) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

constexpr std::size_t kMagicLen = 8;

json parse_header(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 8 || bytes.compare(0, kMagicLen, kCheckpointMagic) != 0) {
    throw ParseError("not a model checkpoint (bad magic)");
  }
  const std::uint64_t len = get_u64(bytes, kMagicLen);
  if (len > bytes.size() - kMagicLen - 8) throw ParseError("checkpoint header length exceeds file size");
  json h;
  try {
    h = json::parse(bytes.substr(kMagicLen + 8, len));
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!h.contains("format_version") || h["format_version"] != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint format version");
  }
  return h;
}

}  // namespace

json ModelConfig::to_json() const {
  return {{"encoder", encoder.to_json()},
          {"head_hidden", head_hidden},
          {"disc_hidden", disc_hidden},
          {"discriminator", discriminator},
          {"disc_mode", mode_name(disc_mode)}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.encoder = EncoderConfig::from_json(j.at("encoder"));
  c.head_hidden = j.at("head_hidden").get<std::size_t>();
  c.disc_hidden = j.at("disc_hidden").get<std::size_t>();
  c.discriminator = j.at("discriminator").get<bool>();
  c.disc_mode = mode_from(j.at("disc_mode").get<std::string>());
  return c;
}

namespace {
ModelConfig with_width(ModelConfig c, const Schema& s) {
  c.encoder.input_width = s.input_width();
  return c;
}
}  // namespace

Model::Model(Schema schema, ModelConfig config)
    : schema_(std::move(schema)),
      config_(with_width(std::move(config), schema_)),
      encoder_(config_.encoder),
      head_(config_.encoder.repr_width, schema_.d_a(), config_.head_hidden, schema_.d_y()) {
  schema_.validate();
  if (config_.discriminator) {
    disc_.emplace(config_.encoder.repr_width, schema_.d_a(), config_.disc_hidden, config_.disc_mode);
  }
}

Model Model::create(const Schema& schema, ModelConfig config, const RngStream& stream) {
  Model m(schema, std::move(config));
  RngStream enc = stream.derive(0), head = stream.derive(1), disc = stream.derive(2);
  m.enc_params = m.encoder_.init_params(enc);
  m.head_params = m.head_.init_params(head);
  if (m.disc_) m.disc_params = m.disc_->init_params(disc);
  m.ig_baseline.assign(schema.input_width(), 0.0);
  return m;
}

std::size_t Model::parameter_count(bool include_discriminator) const noexcept {
  return enc_params.numel() + head_params.numel() + (include_discriminator ? disc_params.numel() : 0);
}

ParamSet Model::all_params() const {
  ParamSet all;
  all.append(enc_params, "encoder/");
  all.append(head_params, "head/");
  all.append(disc_params, "disc/");
  return all;
}

void Model::set_all_params(const ParamSet& all) {
  std::size_t i = 0;
  for (ParamSet* part : {&enc_params, &head_params, &disc_params}) {
    for (auto& e : part->entries()) {
      if (i >= all.count() || !all[i].same_shape(e.value)) throw ShapeError("parameter layout mismatch");
      e.value = all[i++];
    }
  }
  if (i != all.count()) throw ShapeError("parameter layout mismatch");
}

void Model::round_params_to_f32() {
  for (ParamSet* part : {&enc_params, &head_params, &disc_params})
    for (auto& e : part->entries()) e.value = round_to_f32(e.value);
}

std::string serialize_checkpoint(const Model& model) {
  const ParamSet all = model.all_params();
  json dir = json::array();
  std::size_t offset = 0;
  for (const auto& e : all.entries()) {
    dir.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"offset", offset}});
    offset += e.value.size();
  }
  json header = {{"format_version", kCheckpointVersion},
                 {"model", model.config().to_json()},
                 {"schema", model.schema().to_json()},
                 {"normalization", model.stats.to_json()},
                 {"ig_baseline", model.ig_baseline},
                 {"training", model.training},
                 {"parameter_count", model.parameter_count(true)},
                 {"parameters", dir}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic);
  put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + 4 * offset);
  for (const auto& e : all.entries())
    for (double v : e.value.storage()) put_f32(out, v);
  return out;
}

Model deserialize_checkpoint(const std::string& bytes) {
  const json h = parse_header(bytes);
  try {
    Model m(Schema::from_json(h.at("schema")), ModelConfig::from_json(h.at("model")));
    RngStream dummy(0, 0);
    m = Model::create(m.schema(), m.config(), dummy);
    m.stats = NormalizationStats::from_json(h.at("normalization"));
    m.ig_baseline = h.at("ig_baseline").get<std::vector<double>>();
    m.training = h.at("training");
    if (m.ig_baseline.size() != m.schema().input_width()) throw ParseError("IG baseline width mismatch");

    ParamSet all = m.all_params();
    const auto& dir = h.at("parameters");
    if (dir.size() != all.count()) throw ParseError("checkpoint parameter directory does not match the model");
    const std::size_t data_start = kMagicLen + 8 + get_u64(bytes, kMagicLen);
    std::size_t total = 0;
    for (std::size_t i = 0; i < all.count(); ++i) {
      const auto& d = dir[i];
      auto& e = all.entries()[i];
      if (d.at("name") != e.name || d.at("shape").get<std::vector<std::size_t>>() != e.value.shape() ||
          d.at("offset").get<std::size_t>() != total) {
        throw ParseError("checkpoint parameter '" + d.at("name").get<std::string>() + "' does not match the model");
      }
      total += e.value.size();
    }
    if (bytes.size() != data_start + 4 * total) throw ParseError("checkpoint parameter data has the wrong size");
    std::size_t pos = data_start;
    for (auto& e : all.entries())
      for (double& v : e.value.storage()) {
        v = get_f32(bytes, pos);
        pos += 4;
      }
    m.set_all_params(all);
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

json read_checkpoint_header(const std::filesystem::path& path) { return parse_header(read_file(path)); }

std::string model_digest(const Model& model) { return sha256_hex(serialize_checkpoint(model)); }

}  // namespace cfx
