#include "doctest.h"

#include <cmath>

#include "counterfact/optim.hpp"
#include "counterfact/seqmodel.hpp"

using namespace cfx;

namespace {

Tensor random_tensor(RngStream& s, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = scale * s.normal();
  return t;
}

EncoderConfig small_encoder(std::size_t din, std::size_t channels, std::size_t D) {
  EncoderConfig c;
  c.input_width = din;
  c.channels = channels;
  c.kernel_size = 2;
  c.dilations = {1, 2};
  c.repr_width = D;
  return c;
}

double half_sq(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += 0.5 * (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

TEST_CASE("encoder output shape for a single step") {
  Encoder enc(small_encoder(5, 6, 4));
  RngStream rs(1, 0);
  auto p = enc.init_params(rs);
  Tensor in = random_tensor(rs, {1, 5});
  Tensor out = enc.forward(p, in);
  CHECK(out.dim(0) == 1);
  CHECK(out.dim(1) == 4);
}

TEST_CASE("encoder rejects wrong input width") {
  Encoder enc(small_encoder(5, 6, 4));
  RngStream rs(1, 0);
  auto p = enc.init_params(rs);
  CHECK_THROWS_AS(enc.forward(p, Tensor({3, 4})), ShapeError);
}

TEST_CASE("encoder is causal to the last bit") {
  Encoder enc(small_encoder(5, 6, 4));
  RngStream rs(2, 0);
  auto p = enc.init_params(rs);
  Tensor in = random_tensor(rs, {12, 5});
  Tensor base = enc.forward(p, in);
  for (std::size_t t = 0; t + 1 < 12; ++t) {
    Tensor pert = in;
    for (std::size_t s = t + 1; s < 12; ++s)
      for (std::size_t j = 0; j < 5; ++j) pert.at(s, j) += 3.0 * rs.normal();
    Tensor out = enc.forward(p, pert);
    for (std::size_t s = 0; s <= t; ++s)
      for (std::size_t d = 0; d < 4; ++d) REQUIRE(out.at(s, d) == base.at(s, d));
  }
}

TEST_CASE("encoder with zero weights propagates biases only") {
  Encoder enc(small_encoder(3, 4, 2));
  RngStream rs(3, 0);
  auto p = enc.init_params(rs);
  for (auto& e : p.entries())
    if (e.name.ends_with(".w")) e.value.fill(0.0);
  Tensor out = enc.forward(p, random_tensor(rs, {6, 3}));
  for (std::size_t s = 1; s < 6; ++s)
    for (std::size_t d = 0; d < 2; ++d) CHECK(out.at(s, d) == out.at(0, d));
  CHECK(out.at(0, 0) == p.get("proj.b")[0]);
}

TEST_CASE("incremental append matches the full forward pass") {
  Encoder enc(small_encoder(4, 5, 3));
  RngStream rs(4, 0);
  auto p = enc.init_params(rs);
  Tensor in = random_tensor(rs, {9, 4});
  Tensor full = enc.forward(p, in);
  EncoderTape tape;
  for (std::size_t s = 0; s < 9; ++s) {
    auto row = enc.append(p, tape, in.row(s));
    for (std::size_t d = 0; d < 3; ++d) CHECK(row[d] == full.at(s, d));
  }
  enc.truncate(tape, 4);
  auto again = enc.append(p, tape, in.row(4));
  CHECK(again[0] == full.at(4, 0));
}

TEST_CASE("encoder parameter and input gradients pass the finite-difference check") {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    RngStream rs(seed, 0);
    Encoder enc(small_encoder(5, 4 + seed % 3, 3 + seed % 5));
    auto p = enc.init_params(rs);
    const std::size_t T = 8 + seed;
    Tensor in = random_tensor(rs, {T, 5});
    Tensor target = random_tensor(rs, {T, enc.config().repr_width});

    EncoderTape tape;
    Tensor out = enc.forward(p, in, &tape);
    Tensor g = out;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = out[i] - target[i];
    ParamSet grads = p.zeros_like();
    Tensor g_in;
    enc.backward(p, tape, g, &grads, &g_in);

    auto loss = [&](const ParamSet& q) { return half_sq(enc.forward(q, in), target); };
    auto res = finite_diff_check(loss, p, grads);
    INFO("worst " << res.worst_param << "[" << res.worst_index << "]");
    CHECK(res.max_rel_error < 1e-4);

    ParamSet inp;
    inp.add("input", in);
    ParamSet ginp;
    ginp.add("input", g_in);
    auto loss_in = [&](const ParamSet& q) { return half_sq(enc.forward(p, q[0]), target); };
    CHECK(finite_diff_check(loss_in, inp, ginp).max_rel_error < 1e-4);
  }
}

TEST_CASE("backward hook sees final input gradients in reverse time") {
  Encoder enc(small_encoder(3, 4, 2));
  RngStream rs(8, 0);
  auto p = enc.init_params(rs);
  Tensor in = random_tensor(rs, {7, 3});
  EncoderTape tape;
  enc.forward(p, in, &tape);
  Tensor g = random_tensor(rs, {7, 2});
  Tensor g_ref;
  Tensor g_copy = g;
  enc.backward(p, tape, g_copy, nullptr, &g_ref);
  std::vector<std::size_t> order;
  Tensor g2 = g;
  enc.backward(p, tape, g2, nullptr, nullptr, [&](std::size_t s, std::span<const double> row, Tensor&) {
    order.push_back(s);
    for (std::size_t j = 0; j < 3; ++j) CHECK(row[j] == g_ref.at(s, j));
  });
  REQUIRE(order.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(order[i] == 6 - i);
}

TEST_CASE("outcome head ignores treatment when its weights are zero") {
  OutcomeHead head(4, 2, 6, 1);
  RngStream rs(9, 0);
  auto p = head.init_params(rs);
  for (std::size_t o = 0; o < 6; ++o) {
    p.get("w1").at(o, 4) = 0.0;
    p.get("w1").at(o, 5) = 0.0;
  }
  std::vector<double> b{0.3, -1.0, 0.5, 2.0};
  std::vector<double> a0{0, 0}, a1{1, 1};
  CHECK(head.predict(p, b, a0) == head.predict(p, b, a1));
  CHECK_THROWS_AS(head.predict(p, b, std::vector<double>{2, 0}), ShapeError);
}

TEST_CASE("outcome head gradient check") {
  RngStream rs(10, 0);
  OutcomeHead head(6, 2, 7, 2);
  auto p = head.init_params(rs);
  std::vector<std::vector<double>> reprs, treats, targets;
  for (int n = 0; n < 5; ++n) {
    auto r = random_tensor(rs, {6});
    reprs.push_back(r.storage());
    treats.push_back({double(n % 2), double((n / 2) % 2)});
    targets.push_back(random_tensor(rs, {2}).storage());
  }
  auto loss = [&](const ParamSet& q) {
    double l = 0;
    for (int n = 0; n < 5; ++n) {
      auto y = head.predict(q, reprs[n], treats[n]);
      for (int k = 0; k < 2; ++k) l += 0.5 * (y[k] - targets[n][k]) * (y[k] - targets[n][k]);
    }
    return l;
  };
  ParamSet grads = p.zeros_like();
  std::vector<double> grepr(6);
  for (int n = 0; n < 5; ++n) {
    std::vector<double> y(2), h(7);
    head.forward(p, reprs[n], treats[n], y, h);
    for (int k = 0; k < 2; ++k) y[k] -= targets[n][k];
    head.backward(p, reprs[n], treats[n], h, y, &grads, grepr);
  }
  CHECK(finite_diff_check(loss, p, grads).max_rel_error < 1e-4);
}

TEST_CASE("discriminator zero weights give probability one half") {
  Discriminator disc(4, 2, 5, DiscriminatorMode::PerChannel);
  RngStream rs(11, 0);
  auto p = disc.init_params(rs);
  p.set_zero();
  Tensor batch = random_tensor(rs, {1, 4});
  Tensor logits = disc.discriminate(p, batch);
  CHECK(logits.dim(0) == 1);
  CHECK(logits.dim(1) == 2);
  for (double z : logits.storage()) CHECK(1.0 / (1.0 + std::exp(-z)) == 0.5);
  Discriminator joint(4, 2, 5, DiscriminatorMode::Joint);
  CHECK(joint.logits() == 4);
}

TEST_CASE("discriminator binary cross-entropy gradient check") {
  RngStream rs(12, 0);
  Discriminator disc(5, 2, 6, DiscriminatorMode::PerChannel);
  auto p = disc.init_params(rs);
  Tensor B = random_tensor(rs, {8, 5});
  Tensor A({8, 2});
  for (std::size_t i = 0; i < 8; ++i) {
    A.at(i, 0) = double(i % 2);
    A.at(i, 1) = double((i / 3) % 2);
  }
  auto bce = [&](const ParamSet& q) {
    Tensor z = disc.discriminate(q, B);
    double l = 0;
    for (std::size_t i = 0; i < z.size(); ++i) l += std::log1p(std::exp(z[i])) - A[i] * z[i];
    return l;
  };
  ParamSet grads = p.zeros_like();
  for (std::size_t i = 0; i < 8; ++i) {
    std::vector<double> z(2), h(6), gz(2);
    disc.forward(p, B.row(i), z, h);
    for (int k = 0; k < 2; ++k) gz[k] = 1.0 / (1.0 + std::exp(-z[k])) - A.at(i, k);
    disc.backward(p, B.row(i), h, gz, &grads, {});
  }
  CHECK(finite_diff_check(bce, p, grads).max_rel_error < 1e-4);
}

TEST_CASE("probe decoder zero weights output the bias") {
  ProbeDecoder dec(4, 25, 3);
  RngStream rs(13, 0);
  auto p = dec.init_params(rs);
  for (auto& e : p.entries())
    if (e.name != "proj.b") e.value.fill(0.0);
  Tensor out = dec.reconstruct(p, random_tensor(rs, {10, 4}));
  CHECK(out.dim(0) == 10);
  CHECK(out.dim(1) == 3);
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t k = 0; k < 3; ++k) CHECK(out.at(t, k) == p.get("proj.b")[k]);
  CHECK_THROWS_AS(dec.reconstruct(p, Tensor({3, 5})), ShapeError);
}

TEST_CASE("probe decoder masked reconstruction gradient check") {
  RngStream rs(14, 0);
  ProbeDecoder dec(6, 8, 3);
  auto p = dec.init_params(rs);
  Tensor B = random_tensor(rs, {11, 6});
  Tensor target = random_tensor(rs, {11, 3});
  Tensor mask({11, 3});
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rs.uniform() < 0.7 ? 1.0 : 0.0;
  auto loss = [&](const ParamSet& q) {
    Tensor y = dec.reconstruct(q, B);
    double l = 0;
    for (std::size_t i = 0; i < y.size(); ++i) l += mask[i] * (y[i] - target[i]) * (y[i] - target[i]);
    return l;
  };
  ProbeDecoder::Tape tape;
  Tensor y = dec.reconstruct(p, B, &tape);
  Tensor g = y;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * mask[i] * (y[i] - target[i]);
  ParamSet grads = p.zeros_like();
  dec.backward(p, B, tape, g, grads);
  CHECK(finite_diff_check(loss, p, grads).max_rel_error < 1e-4);
}
