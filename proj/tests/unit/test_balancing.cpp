#include "doctest.h"

#include <cmath>
#include <numeric>

#include "counterfact/balancing.hpp"
#include "counterfact/optim.hpp"

using namespace cfx;

namespace {

Tensor column(std::initializer_list<double> v) {
  std::vector<double> d(v);
  const std::size_t n = d.size();
  return Tensor({n, 1}, std::move(d));
}

Tensor gaussian_rows(RngStream& s, std::size_t n, std::size_t d, double shift = 0.0) {
  Tensor t({n, d});
  for (double& v : t.storage()) v = s.normal() + shift;
  return t;
}

KernelConfig fixed(double sigma) {
  KernelConfig k;
  k.mode = BandwidthMode::Fixed;
  k.sigma = sigma;
  return k;
}

// Two groups stacked: first n rows untreated, next m rows treated (single channel).
std::pair<Tensor, Tensor> two_groups(const Tensor& x, const Tensor& y) {
  const std::size_t n = x.dim(0), m = y.dim(0), d = x.dim(1);
  Tensor B({n + m, d}), A({n + m, 1});
  std::copy(x.data().begin(), x.data().end(), B.data().begin());
  std::copy(y.data().begin(), y.data().end(), B.data().begin() + static_cast<std::ptrdiff_t>(n * d));
  for (std::size_t i = n; i < n + m; ++i) A.at(i, 0) = 1.0;
  return {B, A};
}

}  // namespace

TEST_CASE("rbf kernel values") {
  std::vector<double> x{1.0, -2.0, 0.5}, y{0.3, 0.1, 2.0};
  CHECK(rbf_kernel(x, x, 0.7) == 1.0);
  std::vector<double> a{0.0, 0.0}, b{1.0, 1.0};  // distance sqrt 2 = sigma sqrt 2 at sigma 1
  CHECK(std::abs(rbf_kernel(a, b, 1.0) - 0.36787944117144233) < 1e-15);
  CHECK(rbf_kernel(x, y, 1.3) == rbf_kernel(y, x, 1.3));
}

TEST_CASE("median bandwidth rules") {
  CHECK(median_bandwidth(column({0.0, 2.0})) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(median_bandwidth(column({0.0, 1.0, 3.0})) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(median_bandwidth(column({4.0, 4.0, 4.0})) == kMinBandwidth);
  CHECK_THROWS_AS(median_bandwidth(column({1.0})), ShapeError);
  // sigma^2 = median(d^2)/2: squared distances {1, 4, 9} -> sigma = sqrt(2).
  CHECK(median_bandwidth(column({0.0, 1.0, 3.0}), BandwidthMode::MedianSquaredHalf) ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("mmd2_u closed forms") {
  CHECK(mmd2_u(column({0, 0}), column({0, 0}), 1.0) == 0.0);
  const double v = mmd2_u(column({0, 0}), column({2, 2}), std::sqrt(2.0));
  CHECK(std::abs(v - (2.0 - 2.0 * std::exp(-1.0))) < 1e-12);
  Tensor same({50, 3}, 1.25);
  CHECK(mmd2_u(same, same, 0.4) == 0.0);
  CHECK_THROWS_AS(mmd2_u(column({0, 1}), column({0, 1, 2}), 1.0), ShapeError);
}

TEST_CASE("mmd2_u is symmetric and permutation invariant") {
  RngStream s(1, 0);
  Tensor x = gaussian_rows(s, 12, 3), y = gaussian_rows(s, 12, 3, 0.5);
  const double a = mmd2_u(x, y, 1.1);
  CHECK(mmd2_u(y, x, 1.1) == doctest::Approx(a).epsilon(1e-13));
  Tensor xp = x;
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 3; ++c) xp.at(r, c) = x.at(11 - r, c);
  CHECK(mmd2_u(xp, y, 1.1) == doctest::Approx(a).epsilon(1e-13));
}

TEST_CASE("mmd2_u is unbiased under the null") {
  RngStream s(2, 0);
  const int reps = 10000;
  double sum = 0, sum2 = 0;
  for (int r = 0; r < reps; ++r) {
    const double v = mmd2_u(gaussian_rows(s, 8, 2), gaussian_rows(s, 8, 2), 1.0);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / reps;
  const double se = std::sqrt((sum2 / reps - mean * mean) / reps);
  CHECK(std::abs(mean) < 3.0 * se);
}

TEST_CASE("smmd returns zero without a qualifying pair") {
  RngStream s(3, 0);
  SmmdConfig cfg;
  cfg.subset_size = 10;
  Tensor B = gaussian_rows(s, 30, 4);
  Tensor A({30, 2});  // everyone untreated: one occupied group
  auto r = smmd_loss(B, A, cfg, KernelConfig{}, s);
  CHECK(r.loss == 0.0);
  CHECK(r.pairs_used == 0);
  auto [B2, A2] = two_groups(gaussian_rows(s, 9, 4), gaussian_rows(s, 9, 4, 3.0));
  r = smmd_loss(B2, A2, cfg, KernelConfig{}, s);
  CHECK(r.loss == 0.0);
  CHECK(r.pairs_total == 1);
  for (double g : r.grad.storage()) CHECK(g == 0.0);
  cfg.pair_policy = PairPolicy::Shrink;
  CHECK(smmd_loss(B2, A2, cfg, KernelConfig{}, s).loss > 0.0);
}

TEST_CASE("smmd detects well separated groups") {
  RngStream s(4, 0);
  // Unit-variance groups 5 sigma apart, kernel bandwidth equal to that sigma.
  Tensor x = gaussian_rows(s, 120, 1), y = gaussian_rows(s, 120, 1, 5.0);
  auto [B, A] = two_groups(x, y);
  SmmdConfig cfg;
  cfg.subset_size = 50;
  const double sigma = 1.0;
  auto r = smmd_loss(B, A, cfg, fixed(sigma), s);
  const double full = mmd2_u(x, y, sigma);
  CHECK(r.loss > 0.5);
  CHECK(std::abs(r.loss - full) < 0.2);
  CHECK(smmd_loss(B, A, cfg, KernelConfig{}, s).loss > 0.5);
}

TEST_CASE("subset draws average to the full-batch U-statistic") {
  RngStream s(5, 0);
  Tensor x = gaussian_rows(s, 30, 2), y = gaussian_rows(s, 40, 2, 0.8);
  auto [B, A] = two_groups(x, y);
  // Full-batch oracle with unequal sizes computed directly.
  auto k = [](std::span<const double> a, std::span<const double> b) { return rbf_kernel(a, b, 1.0); };
  double kxx = 0, kyy = 0, kxy = 0;
  for (std::size_t p = 0; p < 30; ++p)
    for (std::size_t q = 0; q < 30; ++q)
      if (p != q) kxx += k(x.row(p), x.row(q));
  for (std::size_t p = 0; p < 40; ++p)
    for (std::size_t q = 0; q < 40; ++q)
      if (p != q) kyy += k(y.row(p), y.row(q));
  for (std::size_t p = 0; p < 30; ++p)
    for (std::size_t q = 0; q < 40; ++q) kxy += k(x.row(p), y.row(q));
  const double oracle = kxx / (30.0 * 29.0) + kyy / (40.0 * 39.0) - 2.0 * kxy / (30.0 * 40.0);

  SmmdConfig cfg;
  cfg.subset_size = 10;
  const int reps = 10000;
  double sum = 0, sum2 = 0;
  for (int r = 0; r < reps; ++r) {
    const double v = smmd_loss(B, A, cfg, fixed(1.0), s).loss;
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / reps;
  const double se = std::sqrt((sum2 / reps - mean * mean) / reps);
  CHECK(std::abs(mean - oracle) < 3.0 * se);
}

TEST_CASE("smmd decreases as separated groups are interpolated together") {
  RngStream s(6, 0);
  Tensor x = gaussian_rows(s, 60, 3), y0 = gaussian_rows(s, 60, 3);
  SmmdConfig cfg;
  cfg.subset_size = 40;
  double prev = 1e300;
  for (double alpha : {1.0, 0.75, 0.5, 0.25, 0.0}) {
    Tensor y = y0;
    for (double& v : y.storage()) v += 4.0 * alpha;
    auto [B, A] = two_groups(x, y);
    RngStream draw(99, 1);
    const double l = smmd_loss(B, A, cfg, KernelConfig{}, draw).loss;
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("smmd gradients pass the finite-difference check") {
  for (BandwidthMode mode : {BandwidthMode::Fixed, BandwidthMode::Median, BandwidthMode::MedianSquaredHalf}) {
    for (GroupingMode grouping : {GroupingMode::Joint, GroupingMode::PerChannel}) {
      RngStream s(7, static_cast<std::uint64_t>(mode) * 2 + static_cast<std::uint64_t>(grouping));
      const std::size_t N = 48, D = 5;
      Tensor B = gaussian_rows(s, N, D);
      Tensor A({N, 2});
      for (std::size_t i = 0; i < N; ++i) {
        A.at(i, 0) = double(i % 2);
        A.at(i, 1) = double((i / 2) % 2);
        for (std::size_t t = 0; t < D; ++t) B.at(i, t) += 0.7 * A.at(i, 0) - 0.4 * A.at(i, 1);
      }
      SmmdConfig cfg;
      cfg.subset_size = 8;
      cfg.grouping = grouping;
      KernelConfig kernel;
      kernel.mode = mode;
      kernel.sigma = 1.3;
      auto loss = [&](const ParamSet& q) {
        RngStream draw(11, 0);
        return smmd_loss(q[0], A, cfg, kernel, draw).loss;
      };
      RngStream draw(11, 0);
      auto r = smmd_loss(B, A, cfg, kernel, draw);
      CHECK(r.pairs_used == (grouping == GroupingMode::Joint ? 6u : 2u));
      ParamSet p, g;
      p.add("B", B);
      g.add("B", r.grad);
      auto res = finite_diff_check(loss, p, g);
      INFO("mode " << int(mode) << " grouping " << int(grouping) << " worst " << res.worst_index);
      CHECK(res.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("discriminator loss with zero weights is d_a ln 2 per step") {
  Discriminator disc(4, 2, 6, DiscriminatorMode::PerChannel);
  RngStream s(8, 0);
  auto p = disc.init_params(s);
  p.set_zero();
  Tensor B = gaussian_rows(s, 10, 4);
  Tensor A({10, 2});
  for (std::size_t i = 0; i < 10; ++i) A.at(i, i % 2) = 1.0;
  auto r = grl_losses(B, A, disc, p);
  CHECK(std::abs(r.disc_loss - 2.0 * std::log(2.0)) < 1e-14);
}

TEST_CASE("gradient reversal negates the encoder gradient") {
  Discriminator disc(4, 2, 6, DiscriminatorMode::PerChannel);
  RngStream s(9, 0);
  auto p = disc.init_params(s);
  Tensor B = gaussian_rows(s, 10, 4);
  Tensor A({10, 2});
  for (std::size_t i = 0; i < 10; ++i) A.at(i, i % 2) = double(i % 3 == 0);
  auto plain = discriminator_loss(B, A, disc, p);
  auto rev = grl_losses(B, A, disc, p);
  for (std::size_t i = 0; i < plain.input_grad.size(); ++i) CHECK(rev.encoder_grad[i] == -plain.input_grad[i]);
  CHECK(rev.disc_grad == plain.param_grad);
}

TEST_CASE("discriminator losses pass the finite-difference check") {
  for (DiscriminatorMode mode : {DiscriminatorMode::PerChannel, DiscriminatorMode::Joint}) {
    Discriminator disc(5, 2, 7, mode);
    RngStream s(10, static_cast<std::uint64_t>(mode));
    auto p = disc.init_params(s);
    Tensor B = gaussian_rows(s, 12, 5);
    Tensor A({12, 2});
    for (std::size_t i = 0; i < 12; ++i) {
      A.at(i, 0) = double(i % 2);
      A.at(i, 1) = double(i % 3 == 0);
    }
    auto r = discriminator_loss(B, A, disc, p);
    auto by_params = [&](const ParamSet& q) { return discriminator_loss(B, A, disc, q).loss; };
    CHECK(finite_diff_check(by_params, p, r.param_grad).max_rel_error < 1e-4);
    ParamSet bp, bg;
    bp.add("B", B);
    bg.add("B", r.input_grad);
    auto by_input = [&](const ParamSet& q) { return discriminator_loss(q[0], A, disc, p).loss; };
    CHECK(finite_diff_check(by_input, bp, bg).max_rel_error < 1e-4);

    auto c = cdc_loss(B, disc, p);
    ParamSet cg;
    cg.add("B", c.encoder_grad);
    auto conf = [&](const ParamSet& q) { return cdc_loss(q[0], disc, p).loss; };
    CHECK(finite_diff_check(conf, bp, cg).max_rel_error < 1e-4);
  }
}

TEST_CASE("a trained discriminator separates separable representations") {
  Discriminator disc(2, 1, 8, DiscriminatorMode::PerChannel);
  RngStream s(12, 0);
  auto p = disc.init_params(s);
  Tensor B({40, 2}), A({40, 1});
  for (std::size_t i = 0; i < 40; ++i) {
    A.at(i, 0) = double(i % 2);
    B.at(i, 0) = (i % 2 ? 2.0 : -2.0) + 0.3 * s.normal();
    B.at(i, 1) = s.normal();
  }
  AdamConfig ac;
  ac.learning_rate = 0.05;
  AdamState st = AdamState::for_params(p, ac);
  for (int it = 0; it < 200; ++it) adam_step(p, discriminator_loss(B, A, disc, p).param_grad, st);
  CHECK(discriminator_loss(B, A, disc, p).loss < std::log(2.0));
}

TEST_CASE("confusion loss is minimal at uniform output and grows with confidence") {
  for (DiscriminatorMode mode : {DiscriminatorMode::PerChannel, DiscriminatorMode::Joint}) {
    Discriminator disc(3, 2, 4, mode);
    RngStream s(13, 0);
    auto p = disc.init_params(s);
    p.set_zero();
    Tensor B = gaussian_rows(s, 6, 3);
    auto c = cdc_loss(B, disc, p);
    CHECK(std::abs(c.loss - 2.0 * std::log(2.0)) < 1e-14);
    for (double g : c.encoder_grad.storage()) CHECK(g == 0.0);
    double prev = c.loss;
    for (double s_ = 1.0; s_ <= 30.0; s_ += 1.0) {
      p.get("b2")[0] = s_;
      const double l = cdc_loss(B, disc, p).loss;
      CHECK(l > prev);
      prev = l;
    }
  }
}
