#pragma once

#include <cstdint>
#include <vector>

#include "counterfact/tensor.hpp"

namespace cfx {

// Counter-based random stream. Output n is a pure function of (seed, stream_id, n),
// so a stream can be recreated anywhere and produces the same sequence on every platform.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // Uniform on the open interval (0, 1).
  double uniform() noexcept;
  // Box-Muller on two uniforms; the second variate is cached.
  double normal() noexcept;
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

  // Child stream keyed off this stream's identity, independent of its counter.
  RngStream derive(std::uint64_t sub_id) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor rng_uniform(RngStream& stream, std::size_t n);
Tensor rng_standard_normal(RngStream& stream, std::size_t n);

// Sample from N(mean, std^2) truncated to [lo, hi] by inverse-CDF.
double truncated_normal(RngStream& stream, double mean, double std, double lo, double hi);

// k distinct indices from [0, n) in draw order (partial Fisher-Yates).
std::vector<std::size_t> sample_without_replacement(RngStream& stream, std::size_t n, std::size_t k);

template <class T>
void shuffle(RngStream& stream, std::vector<T>& items) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = stream.below(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace cfx
