#include "counterfact/balancing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cfx {

using nlohmann::json;

namespace {

const char* bandwidth_name(BandwidthMode m) {
  switch (m) {
    case BandwidthMode::Fixed: return "fixed";
    case BandwidthMode::Median: return "median";
    case BandwidthMode::MedianSquaredHalf: return "median_squared_half";
  }
  return "median";
}

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

struct PairDist {
  double value;
  std::uint32_t a, b;
};

// Median of pairwise distances (or squared distances) over the rows of `z`. `mid` receives the
// one or two pairs whose average is the median.
double pairwise_median(const Tensor& z, bool squared, std::vector<PairDist>& mid) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  std::vector<PairDist> all;
  all.reserve(n * (n - 1) / 2);
  const double* p = z.data().data();
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      const double s = sq_dist(p + a * d, p + b * d, d);
      all.push_back({squared ? s : std::sqrt(s), static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)});
    }
  auto less = [](const PairDist& x, const PairDist& y) {
    if (x.value != y.value) return x.value < y.value;
    return x.a != y.a ? x.a < y.a : x.b < y.b;
  };
  const std::size_t m = all.size();
  const std::size_t hi = m / 2;
  std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(hi), all.end(), less);
  mid.clear();
  mid.push_back(all[hi]);
  if (m % 2 == 0) {
    auto lo = std::max_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(hi), less);
    mid.push_back(*lo);
    return 0.5 * (all[hi].value + lo->value);
  }
  return all[hi].value;
}

struct Bandwidth {
  double sigma = 1.0;
  bool data_dependent = false;
  bool floored = false;
  std::vector<PairDist> mid;
};

Bandwidth resolve_bandwidth(const Tensor& pooled, const KernelConfig& kernel) {
  Bandwidth bw;
  if (kernel.mode == BandwidthMode::Fixed) {
    bw.sigma = kernel.sigma;
    return bw;
  }
  if (pooled.rank() != 2 || pooled.dim(0) < 2) throw ShapeError("median bandwidth needs at least two points");
  bw.data_dependent = true;
  double s;
  if (kernel.mode == BandwidthMode::Median) {
    s = std::sqrt(pairwise_median(pooled, false, bw.mid));
  } else {
    s = std::sqrt(pairwise_median(pooled, true, bw.mid) / 2.0);
  }
  if (!(s >= kMinBandwidth)) {
    s = kMinBandwidth;
    bw.floored = true;
  }
  bw.sigma = s;
  return bw;
}

}  // namespace

void KernelConfig::validate() const {
  if (mode == BandwidthMode::Fixed && !(sigma > 0.0)) throw ConfigError("fixed kernel bandwidth must be positive");
}

json KernelConfig::to_json() const { return {{"bandwidth", bandwidth_name(mode)}, {"sigma", sigma}}; }

KernelConfig KernelConfig::from_json(const json& j) {
  KernelConfig k;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "bandwidth" && it.key() != "sigma") throw ConfigError("unknown kernel key '" + it.key() + "'");
  if (j.contains("bandwidth")) {
    const auto s = j["bandwidth"].get<std::string>();
    if (s == "fixed") k.mode = BandwidthMode::Fixed;
    else if (s == "median") k.mode = BandwidthMode::Median;
    else if (s == "median_squared_half") k.mode = BandwidthMode::MedianSquaredHalf;
    else throw ConfigError("unknown bandwidth mode '" + s + "'");
  }
  if (j.contains("sigma")) k.sigma = j["sigma"].get<double>();
  k.validate();
  return k;
}

void SmmdConfig::validate() const {
  if (subset_size < 2) throw ConfigError("sMMD subset size must be at least 2");
}

json SmmdConfig::to_json() const {
  return {{"subset_size", subset_size},
          {"grouping", grouping == GroupingMode::Joint ? "joint" : "per_channel"},
          {"pair_policy", pair_policy == PairPolicy::Skip ? "skip" : "shrink"}};
}

SmmdConfig SmmdConfig::from_json(const json& j) {
  SmmdConfig c;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "subset_size" && it.key() != "grouping" && it.key() != "pair_policy")
      throw ConfigError("unknown smmd key '" + it.key() + "'");
  if (j.contains("subset_size")) c.subset_size = j["subset_size"].get<std::size_t>();
  if (j.contains("grouping")) {
    const auto s = j["grouping"].get<std::string>();
    if (s == "joint") c.grouping = GroupingMode::Joint;
    else if (s == "per_channel") c.grouping = GroupingMode::PerChannel;
    else throw ConfigError("unknown grouping mode '" + s + "'");
  }
  if (j.contains("pair_policy")) {
    const auto s = j["pair_policy"].get<std::string>();
    if (s == "skip") c.pair_policy = PairPolicy::Skip;
    else if (s == "shrink") c.pair_policy = PairPolicy::Shrink;
    else throw ConfigError("unknown pair policy '" + s + "'");
  }
  c.validate();
  return c;
}

double rbf_kernel(std::span<const double> x, std::span<const double> y, double sigma) {
  if (x.size() != y.size()) throw ShapeError("rbf_kernel: vectors differ in width");
  if (!(sigma > 0.0)) throw ConfigError("rbf_kernel: sigma must be positive");
  return std::exp(-sq_dist(x.data(), y.data(), x.size()) / (2.0 * sigma * sigma));
}

double median_bandwidth(const Tensor& pooled, BandwidthMode mode) {
  if (mode == BandwidthMode::Fixed) throw ConfigError("median_bandwidth called with a fixed bandwidth mode");
  KernelConfig k;
  k.mode = mode;
  return resolve_bandwidth(pooled, k).sigma;
}

double mmd2_u(const Tensor& si, const Tensor& sj, double sigma) {
  KernelConfig k;
  k.mode = BandwidthMode::Fixed;
  k.sigma = sigma;
  k.validate();
  return mmd2_u_grad(si, sj, k, nullptr, nullptr);
}

double mmd2_u_grad(const Tensor& si, const Tensor& sj, const KernelConfig& kernel, Tensor* grad_i, Tensor* grad_j) {
  if (si.rank() != 2 || sj.rank() != 2 || si.dim(1) != sj.dim(1)) throw ShapeError("mmd2_u: samples differ in width");
  if (si.dim(0) != sj.dim(0)) throw ShapeError("mmd2_u: samples differ in size");
  const std::size_t n = si.dim(0), d = si.dim(1);
  if (n < 2) throw ShapeError("mmd2_u needs at least two points per sample");

  Tensor pooled({2 * n, d});
  std::copy(si.data().begin(), si.data().end(), pooled.data().begin());
  std::copy(sj.data().begin(), sj.data().end(), pooled.data().begin() + static_cast<std::ptrdiff_t>(n * d));
  Bandwidth bw;
  if (kernel.mode == BandwidthMode::Fixed) {
    bw.sigma = kernel.sigma;
  } else {
    bw = resolve_bandwidth(pooled, kernel);
  }
  const double sigma = bw.sigma;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  const double inv_s2 = 1.0 / (sigma * sigma);
  const bool want_grad = grad_i || grad_j;

  const double c_within = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
  const double c_cross = -2.0 / (static_cast<double>(n) * static_cast<double>(n));

  Tensor gp;
  if (want_grad) gp = Tensor({2 * n, d});
  double g_sigma = 0.0;
  const double* z = pooled.data().data();
  double* g = want_grad ? gp.data().data() : nullptr;

  // Pair (a, b) with gradient weight c; the raw kernel value goes into `acc`.
  auto accumulate = [&](std::size_t a, std::size_t b, double c, double& acc) {
    const double* za = z + a * d;
    const double* zb = z + b * d;
    const double r2 = sq_dist(za, zb, d);
    const double k = std::exp(-r2 * inv2s2);
    acc += k;
    if (!want_grad) return;
    const double ck = c * k;
    const double f = -ck * inv_s2;
    double* ga = g + a * d;
    double* gb = g + b * d;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = za[t] - zb[t];
      ga[t] += f * diff;
      gb[t] -= f * diff;
    }
    g_sigma += ck * r2 * inv_s2 / sigma;
  };

  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p + 1; q < n; ++q) {
      accumulate(p, q, 2.0 * c_within, kxx);
      accumulate(n + p, n + q, 2.0 * c_within, kyy);
    }
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) accumulate(p, n + q, c_cross, kxy);
  const double nn1 = static_cast<double>(n) * static_cast<double>(n - 1);
  const double total = 2.0 * kxx / nn1 + 2.0 * kyy / nn1 - 2.0 * kxy / (static_cast<double>(n) * static_cast<double>(n));

  if (want_grad && bw.data_dependent && !bw.floored) {
    // sigma = sqrt(m) (Median, m = median distance) or sqrt(m / 2) (MedianSquaredHalf, m = median r^2).
    const double dsig_dm = kernel.mode == BandwidthMode::Median ? 1.0 / (2.0 * sigma) : 1.0 / (4.0 * sigma);
    const double share = g_sigma * dsig_dm / static_cast<double>(bw.mid.size());
    for (const auto& pd : bw.mid) {
      const double* za = z + pd.a * d;
      const double* zb = z + pd.b * d;
      double scale;
      if (kernel.mode == BandwidthMode::Median) {
        if (pd.value <= 0.0) continue;
        scale = share / pd.value;  // d r / d z_a = (z_a - z_b) / r
      } else {
        scale = 2.0 * share;       // d r^2 / d z_a = 2 (z_a - z_b)
      }
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = za[t] - zb[t];
        g[pd.a * d + t] += scale * diff;
        g[pd.b * d + t] -= scale * diff;
      }
    }
  }
  if (grad_i) *grad_i = Tensor({n, d}, std::vector<double>(gp.data().begin(), gp.data().begin() + n * d));
  if (grad_j) *grad_j = Tensor({n, d}, std::vector<double>(gp.data().begin() + n * d, gp.data().end()));
  return total;
}

std::vector<std::size_t> joint_arm_codes(const Tensor& treatments) {
  const std::size_t N = treatments.dim(0), da = treatments.dim(1);
  std::vector<std::size_t> codes(N, 0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < da; ++c)
      if (treatments.at(i, c) != 0.0) codes[i] |= std::size_t{1} << c;
  return codes;
}

BalanceResult smmd_loss(const Tensor& B, const Tensor& treatments, const SmmdConfig& cfg, const KernelConfig& kernel,
                        RngStream& stream) {
  cfg.validate();
  kernel.validate();
  if (B.rank() != 2 || treatments.rank() != 2 || B.dim(0) != treatments.dim(0)) {
    throw ShapeError("smmd_loss: representations and treatments are not aligned");
  }
  const std::size_t N = B.dim(0), D = B.dim(1), da = treatments.dim(1);
  BalanceResult res;
  res.grad = Tensor({N, D});

  // Each partition is a list of groups (row indices); pairs are taken within a partition.
  std::vector<std::vector<std::vector<std::size_t>>> partitions;
  double normalizer;
  if (cfg.grouping == GroupingMode::Joint) {
    const std::size_t G = std::size_t{1} << da;
    std::vector<std::vector<std::size_t>> groups(G);
    const auto codes = joint_arm_codes(treatments);
    for (std::size_t i = 0; i < N; ++i) groups[codes[i]].push_back(i);
    partitions.push_back(std::move(groups));
    normalizer = static_cast<double>(G * (G - 1) / 2);
  } else {
    for (std::size_t c = 0; c < da; ++c) {
      std::vector<std::vector<std::size_t>> groups(2);
      for (std::size_t i = 0; i < N; ++i) groups[treatments.at(i, c) != 0.0 ? 1 : 0].push_back(i);
      partitions.push_back(std::move(groups));
    }
    normalizer = static_cast<double>(da);
  }

  double sum = 0.0;
  for (const auto& groups : partitions) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (std::size_t h = g + 1; h < groups.size(); ++h) {
        ++res.pairs_total;
        const auto& gi = groups[g];
        const auto& gj = groups[h];
        std::size_t n = cfg.subset_size;
        if (gi.size() < n || gj.size() < n) {
          if (cfg.pair_policy == PairPolicy::Skip) continue;
          n = std::min(gi.size(), gj.size());
          if (n < 2) continue;
        }
        const auto pick_i = sample_without_replacement(stream, gi.size(), n);
        const auto pick_j = sample_without_replacement(stream, gj.size(), n);
        Tensor si({n, D}), sj({n, D});
        for (std::size_t r = 0; r < n; ++r) {
          auto src_i = B.row(gi[pick_i[r]]);
          auto src_j = B.row(gj[pick_j[r]]);
          std::copy(src_i.begin(), src_i.end(), si.row(r).begin());
          std::copy(src_j.begin(), src_j.end(), sj.row(r).begin());
        }
        Tensor g_i, g_j;
        sum += mmd2_u_grad(si, sj, kernel, &g_i, &g_j);
        for (std::size_t r = 0; r < n; ++r) {
          auto dst_i = res.grad.row(gi[pick_i[r]]);
          auto dst_j = res.grad.row(gj[pick_j[r]]);
          for (std::size_t t = 0; t < D; ++t) {
            dst_i[t] += g_i.at(r, t) / normalizer;
            dst_j[t] += g_j.at(r, t) / normalizer;
          }
        }
        ++res.pairs_used;
      }
    }
  }
  res.loss = sum / normalizer;
  return res;
}

namespace {

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void softmax(std::span<const double> z, std::vector<double>& p, std::vector<double>& logp) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  p.resize(z.size());
  logp.resize(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) s += (p[k] = std::exp(z[k] - m));
  const double log_s = std::log(s);
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] /= s;
    logp[k] = z[k] - m - log_s;
  }
}

}  // namespace

DiscriminatorLoss discriminator_loss(const Tensor& B, const Tensor& treatments, const Discriminator& disc,
                                     const ParamSet& params) {
  if (B.rank() != 2 || treatments.rank() != 2 || B.dim(0) != treatments.dim(0) ||
      treatments.dim(1) != disc.treatment_width()) {
    throw ShapeError("discriminator_loss: representations and treatments are not aligned");
  }
  const std::size_t N = B.dim(0), L = disc.logits(), da = treatments.dim(1);
  DiscriminatorLoss out;
  out.param_grad = params.zeros_like();
  out.input_grad = Tensor({N, B.dim(1)});
  if (N == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(N);
  const auto codes = joint_arm_codes(treatments);
  std::vector<double> z(L), h(params[1].size()), gz(L), p, logp;
  for (std::size_t i = 0; i < N; ++i) {
    disc.forward(params, B.row(i), z, h);
    if (disc.mode() == DiscriminatorMode::PerChannel) {
      for (std::size_t c = 0; c < da; ++c) {
        const double y = treatments.at(i, c);
        out.loss -= inv_n * (y * log_sigmoid(z[c]) + (1.0 - y) * log_sigmoid(-z[c]));
        gz[c] = inv_n * (sigmoid(z[c]) - y);
      }
    } else {
      softmax(z, p, logp);
      out.loss -= inv_n * logp[codes[i]];
      for (std::size_t k = 0; k < L; ++k) gz[k] = inv_n * (p[k] - (k == codes[i] ? 1.0 : 0.0));
    }
    disc.backward(params, B.row(i), h, gz, &out.param_grad, out.input_grad.row(i));
  }
  return out;
}

AdversarialResult grl_losses(const Tensor& B, const Tensor& treatments, const Discriminator& disc,
                             const ParamSet& params) {
  DiscriminatorLoss dl = discriminator_loss(B, treatments, disc, params);
  AdversarialResult out;
  out.disc_loss = dl.loss;
  out.disc_grad = std::move(dl.param_grad);
  out.encoder_grad = std::move(dl.input_grad);
  out.encoder_grad *= -1.0;
  return out;
}

ConfusionResult cdc_loss(const Tensor& B, const Discriminator& disc, const ParamSet& params) {
  if (B.rank() != 2) throw ShapeError("cdc_loss: representations must be N x D");
  const std::size_t N = B.dim(0), L = disc.logits();
  ConfusionResult out;
  out.encoder_grad = Tensor({N, B.dim(1)});
  if (N == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(N);
  std::vector<double> z(L), h(params[1].size()), gz(L), p, logp;
  for (std::size_t i = 0; i < N; ++i) {
    disc.forward(params, B.row(i), z, h);
    if (disc.mode() == DiscriminatorMode::PerChannel) {
      for (std::size_t c = 0; c < L; ++c) {
        out.loss -= inv_n * 0.5 * (log_sigmoid(z[c]) + log_sigmoid(-z[c]));
        gz[c] = inv_n * (sigmoid(z[c]) - 0.5);
      }
    } else {
      softmax(z, p, logp);
      const double u = 1.0 / static_cast<double>(L);
      for (std::size_t k = 0; k < L; ++k) {
        out.loss -= inv_n * u * logp[k];
        gz[k] = inv_n * (p[k] - u);
      }
    }
    disc.backward(params, B.row(i), h, gz, nullptr, out.encoder_grad.row(i));
  }
  return out;
}

}  // namespace cfx
