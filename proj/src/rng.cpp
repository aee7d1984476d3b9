#include "counterfact/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

namespace cfx {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t make_key(std::uint64_t seed, std::uint64_t stream) noexcept {
  return mix64(mix64(seed + kGolden) ^ mix64(stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), key_(make_key(seed, stream_id)) {}

std::uint64_t RngStream::next_u64() noexcept {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double RngStream::uniform() noexcept {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t RngStream::below(std::uint64_t n) noexcept {
  // Lemire's multiply-shift with rejection.
  std::uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

RngStream RngStream::derive(std::uint64_t sub_id) const noexcept {
  return RngStream(seed_, mix64(stream_id_ ^ mix64(sub_id + 0x2545F4914F6CDD1DULL)));
}

Tensor rng_uniform(RngStream& stream, std::size_t n) {
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = stream.uniform();
  return out;
}

Tensor rng_standard_normal(RngStream& stream, std::size_t n) {
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = stream.normal();
  return out;
}

double truncated_normal(RngStream& stream, double mean, double std, double lo, double hi) {
  if (!(std > 0.0) || !(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw ConfigError("degenerate truncated normal: std=" + std::to_string(std) + " bounds=[" + std::to_string(lo) +
                      ", " + std::to_string(hi) + "]");
  }
  const boost::math::normal_distribution<double> unit;
  const double a = boost::math::cdf(unit, (lo - mean) / std);
  const double b = boost::math::cdf(unit, (hi - mean) / std);
  if (!(b > a)) throw ConfigError("truncation interval carries no probability mass");
  const double u = a + (b - a) * stream.uniform();
  const double x = mean + std * boost::math::quantile(unit, std::clamp(u, 1e-300, 1.0 - 1e-16));
  return std::clamp(x, lo, hi);
}

std::vector<std::size_t> sample_without_replacement(RngStream& stream, std::size_t n, std::size_t k) {
  if (k > n) throw ShapeError("cannot draw " + std::to_string(k) + " of " + std::to_string(n) + " without replacement");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + stream.below(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace cfx
