#include "counterfact/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cfx {

TrajectoryRecord impute_locf_nocb(const TrajectoryRecord& record, const Schema& schema) {
  TrajectoryRecord out = record;
  const std::size_t T = record.length();
  const std::size_t dx = schema.d_x();
  for (std::size_t j = 0; j < dx; ++j) {
    std::optional<std::size_t> first;
    for (std::size_t t = 0; t < T; ++t) {
      if (record.observed[t * dx + j]) {
        first = t;
        break;
      }
    }
    if (!first) {
      throw Error("cannot impute feature '" + schema.x_names[j] + "' of patient '" + record.patient_id +
                  "': no observed value");
    }
    double last = record.x.at(*first, j);
    for (std::size_t t = 0; t < T; ++t) {
      if (record.observed[t * dx + j]) {
        last = record.x.at(t, j);
      }
      out.x.at(t, j) = last;  // leading gap takes the first observation (NOCB)
    }
  }
  return out;
}

Dataset impute_dataset(const Dataset& ds) {
  Dataset out = ds;
  for (auto& r : out.records) r = impute_locf_nocb(r, ds.schema);
  return out;
}

NormalizationStats zscore_fit(const Dataset& train) {
  const Schema& s = train.schema;
  NormalizationStats st;
  auto finish = [](std::vector<double>& mean, std::vector<double>& var, std::size_t n) {
    std::vector<double> sd(mean.size(), 1.0);
    for (std::size_t j = 0; j < mean.size(); ++j) {
      if (n == 0) {
        mean[j] = 0.0;
        continue;
      }
      const double v = var[j];
      sd[j] = v > 0.0 ? std::sqrt(v) : 1.0;
    }
    return sd;
  };

  // Two passes for numerical stability.
  std::size_t nsteps = 0;
  st.x_mean.assign(s.d_x(), 0.0);
  st.y_mean.assign(s.d_y(), 0.0);
  for (const auto& r : train.records) {
    for (std::size_t t = 0; t < r.length(); ++t) {
      for (std::size_t j = 0; j < s.d_x(); ++j) st.x_mean[j] += r.x.at(t, j);
      for (std::size_t j = 0; j < s.d_y(); ++j) st.y_mean[j] += r.y.at(t, j);
    }
    nsteps += r.length();
  }
  if (nsteps) {
    for (double& m : st.x_mean) m /= static_cast<double>(nsteps);
    for (double& m : st.y_mean) m /= static_cast<double>(nsteps);
  }
  std::vector<double> xvar(s.d_x(), 0.0), yvar(s.d_y(), 0.0);
  for (const auto& r : train.records) {
    for (std::size_t t = 0; t < r.length(); ++t) {
      for (std::size_t j = 0; j < s.d_x(); ++j) xvar[j] += std::pow(r.x.at(t, j) - st.x_mean[j], 2);
      for (std::size_t j = 0; j < s.d_y(); ++j) yvar[j] += std::pow(r.y.at(t, j) - st.y_mean[j], 2);
    }
  }
  if (nsteps) {
    for (double& v : xvar) v /= static_cast<double>(nsteps);
    for (double& v : yvar) v /= static_cast<double>(nsteps);
  }
  st.x_std = finish(st.x_mean, xvar, nsteps);
  st.y_std = finish(st.y_mean, yvar, nsteps);

  const std::size_t np = train.records.size();
  st.v_mean.assign(s.d_v(), 0.0);
  std::vector<double> vvar(s.d_v(), 0.0);
  for (const auto& r : train.records)
    for (std::size_t j = 0; j < s.d_v(); ++j) st.v_mean[j] += r.statics[j];
  if (np)
    for (double& m : st.v_mean) m /= static_cast<double>(np);
  for (const auto& r : train.records)
    for (std::size_t j = 0; j < s.d_v(); ++j) vvar[j] += std::pow(r.statics[j] - st.v_mean[j], 2);
  if (np)
    for (double& v : vvar) v /= static_cast<double>(np);
  st.v_std = finish(st.v_mean, vvar, np);
  for (std::size_t j = 0; j < s.d_v(); ++j) {
    if (s.is_onehot_column(j)) {
      st.v_mean[j] = 0.0;
      st.v_std[j] = 1.0;
    }
  }
  return st;
}

namespace {

void check_stats(const Schema& s, const NormalizationStats& st) {
  if (st.x_mean.size() != s.d_x() || st.x_std.size() != s.d_x() || st.y_mean.size() != s.d_y() ||
      st.y_std.size() != s.d_y() || st.v_mean.size() != s.d_v() || st.v_std.size() != s.d_v()) {
    throw ShapeError("normalization stats do not match the dataset schema");
  }
}

}  // namespace

TrajectoryRecord normalize_record(const TrajectoryRecord& r, const Schema& s, const NormalizationStats& st) {
  check_stats(s, st);
  TrajectoryRecord out = r;
  for (std::size_t t = 0; t < r.length(); ++t) {
    for (std::size_t j = 0; j < s.d_x(); ++j) out.x.at(t, j) = (r.x.at(t, j) - st.x_mean[j]) / st.x_std[j];
    for (std::size_t j = 0; j < s.d_y(); ++j) out.y.at(t, j) = (r.y.at(t, j) - st.y_mean[j]) / st.y_std[j];
  }
  for (std::size_t j = 0; j < s.d_v(); ++j) out.statics[j] = (r.statics[j] - st.v_mean[j]) / st.v_std[j];
  return out;
}

Dataset zscore_apply(const Dataset& ds, const NormalizationStats& stats) {
  if (ds.stats) throw Error("dataset is already normalized");
  check_stats(ds.schema, stats);
  Dataset out = ds;
  for (auto& r : out.records) r = normalize_record(r, ds.schema, stats);
  out.stats = stats;
  return out;
}

Dataset zscore_invert(const Dataset& ds) {
  if (!ds.stats) throw Error("dataset is not normalized");
  const auto& st = *ds.stats;
  const Schema& s = ds.schema;
  Dataset out = ds;
  for (auto& r : out.records) {
    for (std::size_t t = 0; t < r.length(); ++t) {
      for (std::size_t j = 0; j < s.d_x(); ++j) r.x.at(t, j) = r.x.at(t, j) * st.x_std[j] + st.x_mean[j];
      for (std::size_t j = 0; j < s.d_y(); ++j) r.y.at(t, j) = r.y.at(t, j) * st.y_std[j] + st.y_mean[j];
    }
    for (std::size_t j = 0; j < s.d_v(); ++j) r.statics[j] = r.statics[j] * st.v_std[j] + st.v_mean[j];
  }
  out.stats.reset();
  return out;
}

std::vector<HistoryWindow> rolling_origin_windows(const TrajectoryRecord& record, std::size_t record_index,
                                                  std::size_t tau_max, std::size_t t_min) {
  if (tau_max < 1) throw ConfigError("tau_max must be at least 1");
  if (t_min < 1) throw ConfigError("t_min must be at least 1");
  std::vector<HistoryWindow> out;
  const std::size_t T = record.length();
  if (T <= tau_max) return out;
  for (std::size_t t = t_min; t + tau_max <= T; ++t) out.push_back({record_index, t, tau_max});
  return out;
}

std::vector<HistoryWindow> rolling_origin_windows(const Dataset& ds, std::size_t tau_max, std::size_t t_min) {
  std::vector<HistoryWindow> out;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    auto w = rolling_origin_windows(ds.records[i], i, tau_max, t_min);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

Tensor encoder_inputs(const TrajectoryRecord& r, const Schema& s, std::size_t length) {
  if (length > r.length()) throw ShapeError("requested history longer than the record");
  Tensor in({length, s.input_width()});
  for (std::size_t t = 0; t < length; ++t) {
    auto row = in.row(t);
    std::size_t k = 0;
    for (std::size_t j = 0; j < s.d_x(); ++j) row[k++] = r.x.at(t, j);
    for (std::size_t j = 0; j < s.d_y(); ++j) row[k++] = r.y.at(t, j);
    for (std::size_t j = 0; j < s.d_v(); ++j) row[k++] = r.statics[j];
    for (std::size_t j = 0; j < s.d_a(); ++j) row[k++] = t > 0 ? r.a.at(t - 1, j) : 0.0;
  }
  return in;
}

Tensor encoder_inputs(const TrajectoryRecord& r, const Schema& s) { return encoder_inputs(r, s, r.length()); }

Splits split_patients(const Dataset& ds, const std::vector<double>& ratios, RngStream& stream) {
  if (ratios.size() != 3) throw ConfigError("split needs three ratios (train, val, test)");
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  const std::size_t n = ds.records.size();
  const std::size_t nonzero = static_cast<std::size_t>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; }));
  if (n < nonzero) throw ConfigError("too few patients (" + std::to_string(n) + ") for the requested split");

  // Largest-remainder allocation, then at least one patient per non-empty split.
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t allocated = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(sizes[i]);
    allocated += sizes[i];
  }
  while (allocated < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    sizes[best] += 1;
    rem[best] = -1.0;
    ++allocated;
  }
  for (int i = 0; i < 3; ++i) {
    if (ratios[i] > 0 && sizes[i] == 0) {
      int donor = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      sizes[donor] -= 1;
      sizes[i] = 1;
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(stream, order);

  Splits out;
  Dataset* parts[3] = {&out.train, &out.val, &out.test};
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    Dataset& part = *parts[i];
    part.schema = ds.schema;
    part.stats = ds.stats;
    part.provenance = ds.provenance;
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[i]));
    std::sort(idx.begin(), idx.end());  // keep original record order inside a split
    for (auto k : idx) part.records.push_back(ds.records[k]);
    pos += sizes[i];
  }
  return out;
}

bool PositivityReport::ok() const noexcept {
  return std::none_of(arms.begin(), arms.end(), [](const ArmSupport& a) { return a.zero_support || a.below_minimum; });
}

nlohmann::json PositivityReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& a : arms) {
    arr.push_back({{"assignment", a.assignment},
                   {"steps", a.steps},
                   {"fraction", a.fraction},
                   {"zero_support", a.zero_support},
                   {"below_minimum", a.below_minimum}});
  }
  return {{"arms", arr}, {"channel_positive", channel_positive}, {"total_steps", total_steps},
          {"min_fraction", min_fraction}, {"ok", ok()}};
}

PositivityReport positivity_check(const Dataset& ds, double min_fraction) {
  PositivityReport rep;
  rep.min_fraction = min_fraction;
  if (ds.records.empty()) return rep;
  const std::size_t d = ds.schema.d_a();
  if (d > 20) throw ConfigError("too many treatment channels for a joint-arm report");
  const std::size_t n_arms = std::size_t{1} << d;
  std::vector<std::size_t> counts(n_arms, 0);
  rep.channel_positive.assign(d, 0);
  for (const auto& r : ds.records) {
    for (std::size_t t = 0; t < r.length(); ++t) {
      std::size_t code = 0;
      for (std::size_t c = 0; c < d; ++c) {
        if (r.a.at(t, c) != 0.0) {
          code |= std::size_t{1} << c;
          rep.channel_positive[c] += 1;
        }
      }
      counts[code] += 1;
      rep.total_steps += 1;
    }
  }
  for (std::size_t code = 0; code < n_arms; ++code) {
    ArmSupport arm;
    for (std::size_t c = 0; c < d; ++c) arm.assignment.push_back(static_cast<int>((code >> c) & 1));
    arm.steps = counts[code];
    arm.fraction = rep.total_steps ? static_cast<double>(counts[code]) / static_cast<double>(rep.total_steps) : 0.0;
    arm.zero_support = counts[code] == 0;
    arm.below_minimum = !arm.zero_support && arm.fraction < min_fraction;
    rep.arms.push_back(std::move(arm));
  }
  return rep;
}

}  // namespace cfx
