#include "counterfact/seqmodel.hpp"

#include <algorithm>
#include <cmath>

namespace cfx {

namespace {

Tensor uniform_init(RngStream& stream, std::vector<std::size_t> shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = (2.0 * stream.uniform() - 1.0) * bound;
  return t;
}

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
// Derivative of elu expressed through its output.
inline double elu_slope(double y) { return y > 0.0 ? 1.0 : y + 1.0; }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y[o] += sum_i W[o][i] x[i]
inline void gemv_acc(const double* W, const double* x, double* y, std::size_t rows, std::size_t cols) {
  for (std::size_t o = 0; o < rows; ++o) {
    const double* w = W + o * cols;
    double acc = 0.0;
    for (std::size_t i = 0; i < cols; ++i) acc += w[i] * x[i];
    y[o] += acc;
  }
}

// x[i] += sum_o W[o][i] g[o]
inline void gemv_t_acc(const double* W, const double* g, double* x, std::size_t rows, std::size_t cols) {
  for (std::size_t o = 0; o < rows; ++o) {
    const double go = g[o];
    if (go == 0.0) continue;
    const double* w = W + o * cols;
    for (std::size_t i = 0; i < cols; ++i) x[i] += w[i] * go;
  }
}

// G[o][i] += g[o] x[i]
inline void outer_acc(double* G, const double* g, const double* x, std::size_t rows, std::size_t cols) {
  for (std::size_t o = 0; o < rows; ++o) {
    const double go = g[o];
    if (go == 0.0) continue;
    double* row = G + o * cols;
    for (std::size_t i = 0; i < cols; ++i) row[i] += go * x[i];
  }
}

void check_width(std::span<const double> s, std::size_t n, const char* what) {
  if (s.size() != n) {
    throw ShapeError(std::string(what) + " has width " + std::to_string(s.size()) + ", expected " + std::to_string(n));
  }
}

}  // namespace

// ---------------------------------------------------------------- encoder

void EncoderConfig::validate() const {
  if (input_width < 1) throw ConfigError("encoder input width must be >= 1");
  if (channels < 1) throw ConfigError("encoder channels must be >= 1");
  if (kernel_size < 2) throw ConfigError("encoder kernel size must be >= 2");
  if (dilations.empty()) throw ConfigError("encoder needs at least one dilation");
  for (auto d : dilations)
    if (d < 1) throw ConfigError("dilations must be >= 1");
  if (repr_width < 1) throw ConfigError("representation width must be >= 1");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"input_width", input_width}, {"channels", channels}, {"kernel_size", kernel_size},
          {"dilations", dilations},     {"repr_width", repr_width}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.input_width = j.at("input_width").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.kernel_size = j.at("kernel_size").get<std::size_t>();
  c.dilations = j.at("dilations").get<std::vector<std::size_t>>();
  c.repr_width = j.at("repr_width").get<std::size_t>();
  c.validate();
  return c;
}

struct Encoder::View {
  struct Block {
    const double* w1;
    const double* b1;
    const double* w2;
    const double* b2;
    const double* down_w = nullptr;
    const double* down_b = nullptr;
    std::size_t cin;
    std::size_t dilation;
  };
  std::vector<Block> blocks;
  const double* proj_w;
  const double* proj_b;
};

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) { config_.validate(); }

std::size_t Encoder::receptive_field() const noexcept {
  std::size_t rf = 1;
  for (auto d : config_.dilations) rf += 2 * (config_.kernel_size - 1) * d;
  return rf;
}

ParamSet Encoder::init_params(RngStream& stream) const {
  ParamSet p;
  const std::size_t C = config_.channels;
  const std::size_t k = config_.kernel_size;
  std::size_t cin = config_.input_width;
  for (std::size_t b = 0; b < config_.dilations.size(); ++b) {
    const std::string tag = "b" + std::to_string(b) + ".";
    const double bound1 = 1.0 / std::sqrt(static_cast<double>(k * cin));
    p.add(tag + "conv1.w", uniform_init(stream, {k, C, cin}, bound1));
    p.add(tag + "conv1.b", uniform_init(stream, {C}, bound1));
    const double bound2 = 1.0 / std::sqrt(static_cast<double>(k * C));
    p.add(tag + "conv2.w", uniform_init(stream, {k, C, C}, bound2));
    p.add(tag + "conv2.b", uniform_init(stream, {C}, bound2));
    if (cin != C) {
      const double bd = 1.0 / std::sqrt(static_cast<double>(cin));
      p.add(tag + "down.w", uniform_init(stream, {C, cin}, bd));
      p.add(tag + "down.b", uniform_init(stream, {C}, bd));
    }
    cin = C;
  }
  const double bp = 1.0 / std::sqrt(static_cast<double>(C));
  p.add("proj.w", uniform_init(stream, {config_.repr_width, C}, bp));
  p.add("proj.b", uniform_init(stream, {config_.repr_width}, bp));
  return p;
}

Encoder::View Encoder::view(const ParamSet& p) const {
  View v;
  const std::size_t C = config_.channels;
  const std::size_t k = config_.kernel_size;
  std::size_t cin = config_.input_width;
  auto fetch = [&](const std::string& name, std::vector<std::size_t> shape) {
    const Tensor& t = p.get(name);
    if (t.shape() != shape) throw ShapeError("parameter " + name + " has shape " + shape_string(t.shape()));
    return t.data().data();
  };
  for (std::size_t b = 0; b < config_.dilations.size(); ++b) {
    const std::string tag = "b" + std::to_string(b) + ".";
    View::Block blk{};
    blk.w1 = fetch(tag + "conv1.w", {k, C, cin});
    blk.b1 = fetch(tag + "conv1.b", {C});
    blk.w2 = fetch(tag + "conv2.w", {k, C, C});
    blk.b2 = fetch(tag + "conv2.b", {C});
    if (cin != C) {
      blk.down_w = fetch(tag + "down.w", {C, cin});
      blk.down_b = fetch(tag + "down.b", {C});
    }
    blk.cin = cin;
    blk.dilation = config_.dilations[b];
    v.blocks.push_back(blk);
    cin = C;
  }
  v.proj_w = fetch("proj.w", {config_.repr_width, C});
  v.proj_b = fetch("proj.b", {config_.repr_width});
  return v;
}

void Encoder::forward_row(const View& v, EncoderTape& tape, std::size_t s) const {
  const std::size_t C = config_.channels;
  const std::size_t k = config_.kernel_size;
  const std::size_t nb = v.blocks.size();
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& blk = v.blocks[b];
    const double* u = b == 0 ? tape.input.data() : tape.out[b - 1].data();
    const std::size_t cin = blk.cin;
    double* h1 = tape.h1[b].data() + s * C;
    double* h2 = tape.h2[b].data() + s * C;
    double* out = tape.out[b].data() + s * C;

    std::copy(blk.b1, blk.b1 + C, h1);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t lag = j * blk.dilation;
      if (lag > s) break;
      gemv_acc(blk.w1 + j * C * cin, u + (s - lag) * cin, h1, C, cin);
    }
    for (std::size_t o = 0; o < C; ++o) h1[o] = elu(h1[o]);

    std::copy(blk.b2, blk.b2 + C, h2);
    const double* h1base = tape.h1[b].data();
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t lag = j * blk.dilation;
      if (lag > s) break;
      gemv_acc(blk.w2 + j * C * C, h1base + (s - lag) * C, h2, C, C);
    }
    for (std::size_t o = 0; o < C; ++o) h2[o] = elu(h2[o]);

    if (blk.down_w) {
      std::copy(blk.down_b, blk.down_b + C, out);
      gemv_acc(blk.down_w, u + s * cin, out, C, cin);
    } else {
      std::copy(u + s * C, u + s * C + C, out);
    }
    for (std::size_t o = 0; o < C; ++o) out[o] = elu(out[o] + h2[o]);
  }
  const std::size_t D = config_.repr_width;
  double* repr = tape.repr.data() + s * D;
  std::copy(v.proj_b, v.proj_b + D, repr);
  gemv_acc(v.proj_w, tape.out[nb - 1].data() + s * C, repr, D, C);
}

Tensor Encoder::forward(const ParamSet& p, const Tensor& input, EncoderTape* tape) const {
  if (input.rank() != 2 || input.dim(1) != config_.input_width) {
    throw ShapeError("encoder input has shape " + shape_string(input.shape()) + ", expected [T x " +
                     std::to_string(config_.input_width) + "]");
  }
  const View v = view(p);
  EncoderTape local;
  EncoderTape& tp = tape ? *tape : local;
  const std::size_t T = input.dim(0);
  const std::size_t C = config_.channels;
  const std::size_t nb = config_.dilations.size();
  tp.length = T;
  tp.input.assign(input.data().begin(), input.data().end());
  tp.h1.assign(nb, std::vector<double>(T * C));
  tp.h2.assign(nb, std::vector<double>(T * C));
  tp.out.assign(nb, std::vector<double>(T * C));
  tp.repr.assign(T * config_.repr_width, 0.0);
  for (std::size_t s = 0; s < T; ++s) forward_row(v, tp, s);
  return Tensor({T, config_.repr_width}, tp.repr);
}

std::span<const double> Encoder::append(const ParamSet& p, EncoderTape& tape, std::span<const double> input_row) const {
  check_width(input_row, config_.input_width, "encoder input row");
  const View v = view(p);
  const std::size_t C = config_.channels;
  const std::size_t nb = config_.dilations.size();
  if (tape.h1.size() != nb) {
    tape = EncoderTape{};
    tape.h1.assign(nb, {});
    tape.h2.assign(nb, {});
    tape.out.assign(nb, {});
  }
  const std::size_t s = tape.length;
  tape.input.insert(tape.input.end(), input_row.begin(), input_row.end());
  for (std::size_t b = 0; b < nb; ++b) {
    tape.h1[b].resize((s + 1) * C);
    tape.h2[b].resize((s + 1) * C);
    tape.out[b].resize((s + 1) * C);
  }
  tape.repr.resize((s + 1) * config_.repr_width);
  tape.length = s + 1;
  forward_row(v, tape, s);
  return {tape.repr.data() + s * config_.repr_width, config_.repr_width};
}

void Encoder::truncate(EncoderTape& tape, std::size_t length) const {
  if (length > tape.length) throw ShapeError("cannot truncate a tape to a longer length");
  const std::size_t C = config_.channels;
  tape.input.resize(length * config_.input_width);
  for (auto& a : tape.h1) a.resize(length * C);
  for (auto& a : tape.h2) a.resize(length * C);
  for (auto& a : tape.out) a.resize(length * C);
  tape.repr.resize(length * config_.repr_width);
  tape.length = length;
}

void Encoder::backward(const ParamSet& p, const EncoderTape& tape, Tensor& grad_repr, ParamSet* grads,
                       Tensor* grad_input, const InputHook& hook) const {
  const std::size_t T = tape.length;
  const std::size_t C = config_.channels;
  const std::size_t D = config_.repr_width;
  const std::size_t k = config_.kernel_size;
  const std::size_t nb = config_.dilations.size();
  const std::size_t din = config_.input_width;
  if (grad_repr.rank() != 2 || grad_repr.dim(0) != T || grad_repr.dim(1) != D) {
    throw ShapeError("representation gradient has shape " + shape_string(grad_repr.shape()));
  }
  const View v = view(p);

  // Gradient parameter pointers, resolved in the same order as the view.
  struct GBlock {
    double *w1 = nullptr, *b1 = nullptr, *w2 = nullptr, *b2 = nullptr, *down_w = nullptr, *down_b = nullptr;
  };
  std::vector<GBlock> gb(nb);
  double* g_proj_w = nullptr;
  double* g_proj_b = nullptr;
  if (grads) {
    for (std::size_t b = 0; b < nb; ++b) {
      const std::string tag = "b" + std::to_string(b) + ".";
      gb[b].w1 = grads->get(tag + "conv1.w").data().data();
      gb[b].b1 = grads->get(tag + "conv1.b").data().data();
      gb[b].w2 = grads->get(tag + "conv2.w").data().data();
      gb[b].b2 = grads->get(tag + "conv2.b").data().data();
      if (v.blocks[b].down_w) {
        gb[b].down_w = grads->get(tag + "down.w").data().data();
        gb[b].down_b = grads->get(tag + "down.b").data().data();
      }
    }
    g_proj_w = grads->get("proj.w").data().data();
    g_proj_b = grads->get("proj.b").data().data();
  }

  std::vector<std::vector<double>> g_out(nb, std::vector<double>(T * C, 0.0));
  std::vector<std::vector<double>> g_h1(nb, std::vector<double>(T * C, 0.0));
  std::vector<double> g_in(T * din, 0.0);
  std::vector<double> gz(C), gp2(C), gp1(C);

  for (std::size_t s = T; s-- > 0;) {
    const double* gr = grad_repr.data().data() + s * D;
    double* go_top = g_out[nb - 1].data() + s * C;
    gemv_t_acc(v.proj_w, gr, go_top, D, C);
    if (grads) {
      outer_acc(g_proj_w, gr, tape.out[nb - 1].data() + s * C, D, C);
      for (std::size_t d = 0; d < D; ++d) g_proj_b[d] += gr[d];
    }

    for (std::size_t b = nb; b-- > 0;) {
      const auto& blk = v.blocks[b];
      const std::size_t cin = blk.cin;
      const double* u = b == 0 ? tape.input.data() : tape.out[b - 1].data();
      double* gu = b == 0 ? g_in.data() : g_out[b - 1].data();
      const double* out = tape.out[b].data() + s * C;
      const double* h2 = tape.h2[b].data() + s * C;
      const double* h1 = tape.h1[b].data() + s * C;
      const double* go = g_out[b].data() + s * C;

      for (std::size_t o = 0; o < C; ++o) {
        gz[o] = go[o] * elu_slope(out[o]);
        gp2[o] = gz[o] * elu_slope(h2[o]);
      }
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t lag = j * blk.dilation;
        if (lag > s) break;
        gemv_t_acc(blk.w2 + j * C * C, gp2.data(), g_h1[b].data() + (s - lag) * C, C, C);
        if (grads) outer_acc(gb[b].w2 + j * C * C, gp2.data(), tape.h1[b].data() + (s - lag) * C, C, C);
      }
      if (grads)
        for (std::size_t o = 0; o < C; ++o) gb[b].b2[o] += gp2[o];

      const double* gh1 = g_h1[b].data() + s * C;
      for (std::size_t o = 0; o < C; ++o) gp1[o] = gh1[o] * elu_slope(h1[o]);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t lag = j * blk.dilation;
        if (lag > s) break;
        gemv_t_acc(blk.w1 + j * C * cin, gp1.data(), gu + (s - lag) * cin, C, cin);
        if (grads) outer_acc(gb[b].w1 + j * C * cin, gp1.data(), u + (s - lag) * cin, C, cin);
      }
      if (grads)
        for (std::size_t o = 0; o < C; ++o) gb[b].b1[o] += gp1[o];

      if (blk.down_w) {
        gemv_t_acc(blk.down_w, gz.data(), gu + s * cin, C, cin);
        if (grads) {
          outer_acc(gb[b].down_w, gz.data(), u + s * cin, C, cin);
          for (std::size_t o = 0; o < C; ++o) gb[b].down_b[o] += gz[o];
        }
      } else {
        for (std::size_t o = 0; o < C; ++o) gu[s * C + o] += gz[o];
      }
    }
    if (hook) hook(s, std::span<const double>(g_in.data() + s * din, din), grad_repr);
  }
  if (grad_input) *grad_input = Tensor({T, din}, std::move(g_in));
}

// ---------------------------------------------------------------- outcome head

OutcomeHead::OutcomeHead(std::size_t repr_width, std::size_t treatment_width, std::size_t hidden,
                         std::size_t outcome_width)
    : d_(repr_width), d_a_(treatment_width), hidden_(hidden), out_(outcome_width) {
  if (!d_ || !d_a_ || !hidden_ || !out_) throw ConfigError("outcome head widths must be positive");
}

ParamSet OutcomeHead::init_params(RngStream& stream) const {
  ParamSet p;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(d_ + d_a_));
  p.add("w1", uniform_init(stream, {hidden_, d_ + d_a_}, b1));
  p.add("b1", uniform_init(stream, {hidden_}, b1));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
  p.add("w2", uniform_init(stream, {out_, hidden_}, b2));
  p.add("b2", uniform_init(stream, {out_}, b2));
  return p;
}

void OutcomeHead::forward(const ParamSet& p, std::span<const double> repr, std::span<const double> treatment,
                          std::span<double> out, std::span<double> hidden_act) const {
  check_width(repr, d_, "representation");
  check_width(treatment, d_a_, "treatment");
  for (double a : treatment)
    if (a != 0.0 && a != 1.0) throw ShapeError("treatment entries must be 0 or 1");
  const double* w1 = p[0].data().data();
  const double* b1 = p[1].data().data();
  const double* w2 = p[2].data().data();
  const double* b2 = p[3].data().data();
  const std::size_t in = d_ + d_a_;
  double* h = hidden_act.data();
  for (std::size_t o = 0; o < hidden_; ++o) {
    const double* w = w1 + o * in;
    double acc = b1[o];
    for (std::size_t i = 0; i < d_; ++i) acc += w[i] * repr[i];
    for (std::size_t i = 0; i < d_a_; ++i) acc += w[d_ + i] * treatment[i];
    h[o] = elu(acc);
  }
  for (std::size_t o = 0; o < out_; ++o) out[o] = b2[o];
  gemv_acc(w2, h, out.data(), out_, hidden_);
}

std::vector<double> OutcomeHead::predict(const ParamSet& p, std::span<const double> repr,
                                         std::span<const double> treatment) const {
  std::vector<double> out(out_), h(hidden_);
  forward(p, repr, treatment, out, h);
  return out;
}

void OutcomeHead::backward(const ParamSet& p, std::span<const double> repr, std::span<const double> treatment,
                           std::span<const double> hidden_act, std::span<const double> grad_out, ParamSet* grads,
                           std::span<double> grad_repr) const {
  const double* w1 = p[0].data().data();
  const double* w2 = p[2].data().data();
  const std::size_t in = d_ + d_a_;
  std::vector<double> gh(hidden_, 0.0);
  gemv_t_acc(w2, grad_out.data(), gh.data(), out_, hidden_);
  for (std::size_t o = 0; o < hidden_; ++o) gh[o] *= elu_slope(hidden_act[o]);
  if (grads) {
    outer_acc((*grads)[2].data().data(), grad_out.data(), hidden_act.data(), out_, hidden_);
    for (std::size_t o = 0; o < out_; ++o) (*grads)[3][o] += grad_out[o];
    double* gw1 = (*grads)[0].data().data();
    for (std::size_t o = 0; o < hidden_; ++o) {
      const double g = gh[o];
      if (g == 0.0) continue;
      double* row = gw1 + o * in;
      for (std::size_t i = 0; i < d_; ++i) row[i] += g * repr[i];
      for (std::size_t i = 0; i < d_a_; ++i) row[d_ + i] += g * treatment[i];
      (*grads)[1][o] += g;
    }
  }
  if (!grad_repr.empty()) {
    for (std::size_t o = 0; o < hidden_; ++o) {
      const double g = gh[o];
      if (g == 0.0) continue;
      const double* w = w1 + o * in;
      for (std::size_t i = 0; i < d_; ++i) grad_repr[i] += w[i] * g;
    }
  }
}

// ---------------------------------------------------------------- discriminator

Discriminator::Discriminator(std::size_t repr_width, std::size_t treatment_width, std::size_t hidden,
                             DiscriminatorMode mode)
    : d_(repr_width),
      d_a_(treatment_width),
      hidden_(hidden),
      logits_(mode == DiscriminatorMode::PerChannel ? treatment_width : (std::size_t{1} << treatment_width)),
      mode_(mode) {
  if (!d_ || !d_a_ || !hidden_) throw ConfigError("discriminator widths must be positive");
}

ParamSet Discriminator::init_params(RngStream& stream) const {
  ParamSet p;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(d_));
  p.add("w1", uniform_init(stream, {hidden_, d_}, b1));
  p.add("b1", uniform_init(stream, {hidden_}, b1));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
  p.add("w2", uniform_init(stream, {logits_, hidden_}, b2));
  p.add("b2", uniform_init(stream, {logits_}, b2));
  return p;
}

void Discriminator::forward(const ParamSet& p, std::span<const double> repr, std::span<double> logits,
                            std::span<double> hidden_act) const {
  check_width(repr, d_, "representation");
  const double* w1 = p[0].data().data();
  const double* b1 = p[1].data().data();
  const double* w2 = p[2].data().data();
  const double* b2 = p[3].data().data();
  double* h = hidden_act.data();
  std::copy(b1, b1 + hidden_, h);
  gemv_acc(w1, repr.data(), h, hidden_, d_);
  for (std::size_t o = 0; o < hidden_; ++o) h[o] = elu(h[o]);
  std::copy(b2, b2 + logits_, logits.data());
  gemv_acc(w2, h, logits.data(), logits_, hidden_);
}

Tensor Discriminator::discriminate(const ParamSet& p, const Tensor& repr) const {
  if (repr.rank() != 2 || repr.dim(1) != d_) throw ShapeError("discriminator input must be N x D");
  const std::size_t n = repr.dim(0);
  Tensor out({n, logits_});
  std::vector<double> h(hidden_);
  for (std::size_t i = 0; i < n; ++i) forward(p, repr.row(i), out.row(i), h);
  return out;
}

void Discriminator::backward(const ParamSet& p, std::span<const double> repr, std::span<const double> hidden_act,
                             std::span<const double> grad_logits, ParamSet* grads,
                             std::span<double> grad_repr) const {
  const double* w1 = p[0].data().data();
  const double* w2 = p[2].data().data();
  std::vector<double> gh(hidden_, 0.0);
  gemv_t_acc(w2, grad_logits.data(), gh.data(), logits_, hidden_);
  for (std::size_t o = 0; o < hidden_; ++o) gh[o] *= elu_slope(hidden_act[o]);
  if (grads) {
    outer_acc((*grads)[2].data().data(), grad_logits.data(), hidden_act.data(), logits_, hidden_);
    for (std::size_t o = 0; o < logits_; ++o) (*grads)[3][o] += grad_logits[o];
    outer_acc((*grads)[0].data().data(), gh.data(), repr.data(), hidden_, d_);
    for (std::size_t o = 0; o < hidden_; ++o) (*grads)[1][o] += gh[o];
  }
  if (!grad_repr.empty()) gemv_t_acc(w1, gh.data(), grad_repr.data(), hidden_, d_);
}

// ---------------------------------------------------------------- probe decoder

ProbeDecoder::ProbeDecoder(std::size_t repr_width, std::size_t hidden, std::size_t output_width)
    : d_(repr_width), hidden_(hidden), out_(output_width) {
  if (!d_ || !hidden_ || !out_) throw ConfigError("probe decoder widths must be positive");
}

ParamSet ProbeDecoder::init_params(RngStream& stream) const {
  ParamSet p;
  const double b = 1.0 / std::sqrt(static_cast<double>(hidden_));
  for (const char* g : {"z", "r", "n"}) p.add(std::string("w_") + g, uniform_init(stream, {hidden_, d_}, b));
  for (const char* g : {"z", "r", "n"}) p.add(std::string("u_") + g, uniform_init(stream, {hidden_, hidden_}, b));
  for (const char* g : {"z", "r", "n", "hn"}) p.add(std::string("b_") + g, uniform_init(stream, {hidden_}, b));
  p.add("proj.w", uniform_init(stream, {out_, hidden_}, b));
  p.add("proj.b", uniform_init(stream, {out_}, b));
  return p;
}

namespace {
enum GruIdx { kWz, kWr, kWn, kUz, kUr, kUn, kBz, kBr, kBn, kBhn, kPw, kPb };
}

Tensor ProbeDecoder::reconstruct(const ParamSet& p, const Tensor& repr, Tape* tape) const {
  if (repr.rank() != 2 || repr.dim(1) != d_) {
    throw ShapeError("probe decoder input has shape " + shape_string(repr.shape()) + ", expected [T x " +
                     std::to_string(d_) + "]");
  }
  if (p.count() != 12) throw ShapeError("probe decoder parameter set is malformed");
  const std::size_t T = repr.dim(0);
  const std::size_t H = hidden_;
  Tape local;
  Tape& tp = tape ? *tape : local;
  tp.length = T;
  tp.h.assign(T * H, 0.0);
  tp.z.assign(T * H, 0.0);
  tp.r.assign(T * H, 0.0);
  tp.n.assign(T * H, 0.0);
  tp.hn.assign(T * H, 0.0);
  Tensor out({T, out_});
  std::vector<double> hprev(H, 0.0), az(H), ar(H), an(H);
  auto P = [&](int i) { return p[static_cast<std::size_t>(i)].data().data(); };
  for (std::size_t t = 0; t < T; ++t) {
    const double* x = repr.data().data() + t * d_;
    std::copy(P(kBz), P(kBz) + H, az.begin());
    std::copy(P(kBr), P(kBr) + H, ar.begin());
    std::copy(P(kBn), P(kBn) + H, an.begin());
    double* hn = tp.hn.data() + t * H;
    std::copy(P(kBhn), P(kBhn) + H, hn);
    gemv_acc(P(kWz), x, az.data(), H, d_);
    gemv_acc(P(kWr), x, ar.data(), H, d_);
    gemv_acc(P(kWn), x, an.data(), H, d_);
    gemv_acc(P(kUz), hprev.data(), az.data(), H, H);
    gemv_acc(P(kUr), hprev.data(), ar.data(), H, H);
    gemv_acc(P(kUn), hprev.data(), hn, H, H);
    double* z = tp.z.data() + t * H;
    double* r = tp.r.data() + t * H;
    double* n = tp.n.data() + t * H;
    double* h = tp.h.data() + t * H;
    for (std::size_t o = 0; o < H; ++o) {
      z[o] = sigmoid(az[o]);
      r[o] = sigmoid(ar[o]);
      n[o] = std::tanh(an[o] + r[o] * hn[o]);
      h[o] = (1.0 - z[o]) * n[o] + z[o] * hprev[o];
    }
    std::copy(h, h + H, hprev.begin());
    double* y = out.data().data() + t * out_;
    std::copy(P(kPb), P(kPb) + out_, y);
    gemv_acc(P(kPw), h, y, out_, H);
  }
  return out;
}

void ProbeDecoder::backward(const ParamSet& p, const Tensor& repr, const Tape& tape, const Tensor& grad_out,
                            ParamSet& grads) const {
  const std::size_t T = tape.length;
  const std::size_t H = hidden_;
  if (grad_out.rank() != 2 || grad_out.dim(0) != T || grad_out.dim(1) != out_) {
    throw ShapeError("probe gradient has shape " + shape_string(grad_out.shape()));
  }
  auto P = [&](int i) { return p[static_cast<std::size_t>(i)].data().data(); };
  auto G = [&](int i) { return grads[static_cast<std::size_t>(i)].data().data(); };
  std::vector<double> carry(H, 0.0), gh(H), gprev(H), ga_n(H), ga_r(H), ga_z(H), g_hn(H);
  const std::vector<double> zeros(H, 0.0);
  for (std::size_t t = T; t-- > 0;) {
    const double* gy = grad_out.data().data() + t * out_;
    const double* h = tape.h.data() + t * H;
    const double* hprev = t > 0 ? tape.h.data() + (t - 1) * H : zeros.data();
    const double* z = tape.z.data() + t * H;
    const double* r = tape.r.data() + t * H;
    const double* n = tape.n.data() + t * H;
    const double* hn = tape.hn.data() + t * H;
    const double* x = repr.data().data() + t * d_;

    std::copy(carry.begin(), carry.end(), gh.begin());
    gemv_t_acc(P(kPw), gy, gh.data(), out_, H);
    outer_acc(G(kPw), gy, h, out_, H);
    for (std::size_t o = 0; o < out_; ++o) G(kPb)[o] += gy[o];

    for (std::size_t o = 0; o < H; ++o) {
      const double gn = gh[o] * (1.0 - z[o]);
      const double gz = gh[o] * (hprev[o] - n[o]);
      gprev[o] = gh[o] * z[o];
      ga_n[o] = gn * (1.0 - n[o] * n[o]);
      const double gr = ga_n[o] * hn[o];
      g_hn[o] = ga_n[o] * r[o];
      ga_r[o] = gr * r[o] * (1.0 - r[o]);
      ga_z[o] = gz * z[o] * (1.0 - z[o]);
    }
    outer_acc(G(kWn), ga_n.data(), x, H, d_);
    outer_acc(G(kWr), ga_r.data(), x, H, d_);
    outer_acc(G(kWz), ga_z.data(), x, H, d_);
    outer_acc(G(kUn), g_hn.data(), hprev, H, H);
    outer_acc(G(kUr), ga_r.data(), hprev, H, H);
    outer_acc(G(kUz), ga_z.data(), hprev, H, H);
    for (std::size_t o = 0; o < H; ++o) {
      G(kBn)[o] += ga_n[o];
      G(kBhn)[o] += g_hn[o];
      G(kBr)[o] += ga_r[o];
      G(kBz)[o] += ga_z[o];
    }
    gemv_t_acc(P(kUn), g_hn.data(), gprev.data(), H, H);
    gemv_t_acc(P(kUr), ga_r.data(), gprev.data(), H, H);
    gemv_t_acc(P(kUz), ga_z.data(), gprev.data(), H, H);
    std::copy(gprev.begin(), gprev.end(), carry.begin());
  }
}

}  // namespace cfx
