#include "doctest.h"

#include <cmath>

#include "counterfact/inference.hpp"
#include "counterfact/preprocess.hpp"
#include "counterfact/training.hpp"
#include "counterfact/tumorsim.hpp"

using namespace cfx;

namespace {

tumorsim::Cohort cohort(std::size_t n, std::size_t horizon, double gamma, std::uint64_t seed) {
  tumorsim::SimCohortConfig c;
  c.n_patients = n;
  c.horizon = horizon;
  c.gamma = gamma;
  c.seed = seed;
  return tumorsim::simulate_cohort(c);
}

Model random_model(const Dataset& raw, std::uint64_t seed) {
  ModelConfig mc;
  mc.encoder.channels = 6;
  mc.encoder.dilations = {1, 2};
  mc.encoder.repr_width = 5;
  mc.head_hidden = 7;
  Model m = Model::create(raw.schema, mc, RngStream(seed, 3));
  m.stats = zscore_fit(impute_dataset(raw));
  m.ig_baseline = input_feature_means(prepare_for_model(m, raw));
  return m;
}

TreatmentPlan plan_of(std::string label, std::vector<std::vector<double>> rows) {
  TreatmentPlan p;
  p.label = std::move(label);
  p.steps = Tensor({rows.size(), rows.front().size()});
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (std::size_t j = 0; j < rows[k].size(); ++j) p.steps.at(k, j) = rows[k][j];
  return p;
}

// Trained once and shared by the slower checks below.
struct Trained {
  tumorsim::Cohort data;
  Splits splits;
  Model model;
};

const Trained& trained() {
  static const Trained t = [] {
    auto c = cohort(300, 24, 0.0, 77);
    RngStream ss(77, 5);
    Splits sp = split_patients(c.dataset, {0.7, 0.15, 0.15}, ss);
    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 32;
    cfg.learning_rate = 5e-3;
    cfg.patience = 15;
    cfg.model.encoder.channels = 8;
    cfg.model.encoder.repr_width = 8;
    cfg.model.head_hidden = 16;
    auto r = train(sp.train, sp.val, cfg);
    return Trained{std::move(c), std::move(sp), std::move(r.model)};
  }();
  return t;
}

}  // namespace

TEST_CASE("one-step rollout equals a single head prediction") {
  const auto c = cohort(3, 12, 1.0, 4);
  const Model m = random_model(c.dataset, 1);
  const auto& rec = c.dataset.records[1];
  const auto ctx = make_context(m, rec, 7);
  const auto plan = plan_of("Chemo", {{1, 0}});
  const Tensor y = rollout_normalized(m, ctx, plan);

  const TrajectoryRecord norm = normalize_record(impute_locf_nocb(rec, m.schema()), m.schema(), m.stats);
  const Tensor repr = m.encoder().forward(m.enc_params, encoder_inputs(norm, m.schema(), 7));
  const auto direct = m.head().predict(m.head_params, repr.row(6), plan.steps.row(0));
  CHECK(y.at(0, 0) == direct[0]);
  CHECK(rollout(m, ctx, plan).at(0, 0) == doctest::Approx(direct[0] * m.stats.y_std[0] + m.stats.y_mean[0]));
}

TEST_CASE("three-step rollout equals a manual encode-predict-append loop") {
  const auto c = cohort(2, 15, 3.0, 6);
  const Model m = random_model(c.dataset, 2);
  const auto& rec = c.dataset.records[0];
  const std::size_t origin = 9;
  const auto ctx = make_context(m, rec, origin);
  const auto plan = plan_of("mix", {{1, 0}, {0, 1}, {1, 1}});
  const Tensor y = rollout_normalized(m, ctx, plan);

  const TrajectoryRecord norm = normalize_record(impute_locf_nocb(rec, m.schema()), m.schema(), m.stats);
  Tensor in = encoder_inputs(norm, m.schema(), origin);
  const Schema& s = m.schema();
  for (std::size_t k = 0; k < 3; ++k) {
    // re-encode the whole sequence from scratch each step
    const Tensor repr = m.encoder().forward(m.enc_params, in);
    const auto yhat = m.head().predict(m.head_params, repr.row(in.dim(0) - 1), plan.steps.row(k));
    CHECK(y.at(k, 0) == doctest::Approx(yhat[0]).epsilon(1e-12));
    Tensor grown({in.dim(0) + 1, in.dim(1)});
    for (std::size_t r = 0; r < in.dim(0); ++r)
      for (std::size_t i = 0; i < in.dim(1); ++i) grown.at(r, i) = in.at(r, i);
    auto row = grown.row(in.dim(0));
    auto prev = in.row(in.dim(0) - 1);
    std::copy(prev.begin(), prev.end(), row.begin());
    row[0] = yhat[0];                       // volume covariate mirrors the outcome
    const auto& d = s.covariate_dynamics.at(0);
    const double conc = prev[1] * m.stats.x_std[1] + m.stats.x_mean[1];
    row[1] = (d.decay * conc + d.dose * plan.steps.at(k, 0) - m.stats.x_mean[1]) / m.stats.x_std[1];
    row[s.d_x()] = yhat[0];                 // outcome
    row[s.d_x() + 1 + s.d_v()] = plan.steps.at(k, 0);
    row[s.d_x() + 1 + s.d_v() + 1] = plan.steps.at(k, 1);
    in = grown;
  }
}

TEST_CASE("plans sharing a prefix agree on the prefix") {
  const auto c = cohort(2, 15, 2.0, 8);
  const Model m = random_model(c.dataset, 3);
  const auto ctx = make_context(m, c.dataset.records[1]);
  const auto p1 = plan_of("a", {{1, 0}, {0, 0}, {1, 1}, {0, 1}});
  const auto p2 = plan_of("b", {{1, 0}, {0, 0}, {0, 0}, {1, 1}});
  const Tensor y1 = rollout(m, ctx, p1), y2 = rollout(m, ctx, p2);
  for (std::size_t k = 0; k < 2; ++k) CHECK(y1.at(k, 0) == y2.at(k, 0));
  CHECK(y1.at(2, 0) != y2.at(2, 0));
}

TEST_CASE("counterfactual compare shapes and validation") {
  const auto c = cohort(2, 12, 2.0, 9);
  const Model m = random_model(c.dataset, 4);
  const auto ctx = make_context(m, c.dataset.records[0], 8);
  const auto plans = default_plans(m.schema(), 6);
  const auto r = counterfactual_compare(m, ctx, plans);
  REQUIRE(r.trajectories.size() == 4);
  for (const auto& t : r.trajectories) CHECK(t.dim(0) == 6);
  const auto twin = counterfactual_compare(m, ctx, {plans[1], plans[1]});
  CHECK(twin.trajectories[0] == twin.trajectories[1]);
  CHECK(r.to_json()["plans"].size() == 4);

  CHECK_THROWS_AS(counterfactual_compare(m, ctx, {}), ShapeError);
  CHECK_THROWS_AS(counterfactual_compare(m, ctx, {plans[0], TreatmentPlan::constant("x", {1, 0}, 3)}), ShapeError);
  CHECK_THROWS_AS(rollout(m, ctx, TreatmentPlan::constant("bad", {2, 0}, 3)), ShapeError);
  CHECK_THROWS_AS(rollout(m, ctx, TreatmentPlan::constant("wide", {1, 0, 1}, 3)), ShapeError);
  CHECK_THROWS_AS(make_context(m, c.dataset.records[0], 13), ShapeError);
}

TEST_CASE("integrated gradients of an affine function are exact") {
  const std::vector<double> w{0.5, -2.0, 3.0, 0.25};
  const std::vector<double> x{1.0, 2.0, -1.5, 4.0};
  const std::vector<double> zero(4, 0.0);
  auto grad = [&](std::span<const double>) { return w; };
  for (std::size_t m : {8u, 13u, 64u}) {
    const auto phi = integrated_gradients(grad, x, zero, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(phi[i] - w[i] * x[i]) <= 1e-10);
  }
  CHECK_THROWS_AS(integrated_gradients(grad, x, zero, 7), ConfigError);
  CHECK_THROWS_AS(integrated_gradients(grad, x, std::vector<double>(3), 8), ShapeError);
  auto nan_grad = [](std::span<const double>) { return std::vector<double>(4, std::nan("")); };
  CHECK_THROWS_AS(integrated_gradients(nan_grad, x, zero, 8), NumericError);
}

TEST_CASE("integrated gradients of a quadratic converge to the exact path integral") {
  // f = sum x_i^2, gradient 2x; along the straight path phi_i = x_i^2 - b_i^2 exactly for midpoints.
  const std::vector<double> x{1.0, -2.0}, b{0.5, 0.5};
  auto grad = [](std::span<const double> p) { return std::vector<double>{2 * p[0], 2 * p[1]}; };
  const auto phi = integrated_gradients(grad, x, b, 16);
  CHECK(phi[0] == doctest::Approx(1.0 - 0.25).epsilon(1e-12));
  CHECK(phi[1] == doctest::Approx(4.0 - 0.25).epsilon(1e-12));
}

TEST_CASE("model attribution: zero at the baseline and complete along the path") {
  const auto c = cohort(4, 20, 2.0, 12);
  const Model m = random_model(c.dataset, 5);
  const auto ctx = make_context(m, c.dataset.records[2], 18);
  const auto plan = plan_of("mix", {{1, 0}, {0, 1}, {1, 1}, {0, 0}});

  IgConfig cfg;
  cfg.steps = kIgVerificationSteps;
  const auto rep = integrated_gradients(m, ctx, plan, cfg);
  CHECK(rep.phi.dim(0) == 4);
  CHECK(rep.phi.dim(1) == m.schema().input_width());
  for (std::size_t j = 0; j < 4; ++j) {
    const double d = rep.f_input[j] - rep.f_baseline[j];
    CHECK(std::abs(rep.phi_sum[j] - d) <= 1e-3 * std::abs(d) + 1e-6);
  }
  // rows older than the receptive field never reach the forecast
  const std::size_t first = 18 - std::min<std::size_t>(18, m.encoder().receptive_field());
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t r = 0; r < first; ++r) CHECK(rep.temporal.at(j, r) == 0.0);
  double sum = 0.0;
  for (double w : rep.omega) sum += w;
  CHECK(std::abs(sum - 1.0) <= 1e-9);
  CHECK(rep.f_input[0] == doctest::Approx(rollout(m, ctx, plan).at(0, 0)).epsilon(1e-12));

  // a history equal to the baseline in every row attributes nothing
  RolloutContext flat = ctx;
  for (std::size_t r = 0; r < flat.inputs.dim(0); ++r)
    for (std::size_t i = 0; i < flat.inputs.dim(1); ++i) flat.inputs.at(r, i) = m.ig_baseline[i];
  m.encoder().forward(m.enc_params, flat.inputs, &flat.tape);
  const auto zero = integrated_gradients(m, flat, plan, IgConfig{});
  for (double v : zero.phi.data()) CHECK(v == 0.0);

  IgConfig bad;
  bad.steps = 4;
  CHECK_THROWS_AS(integrated_gradients(m, ctx, plan, bad), ConfigError);
  CHECK_THROWS_AS(integrated_gradients(m, ctx, plan, IgConfig{}, std::vector<double>(3)), ShapeError);
}

TEST_CASE("model attribution matches finite differences of the rollout") {
  // With one integration step at alpha = 1/2 the attribution is (x - b) * grad f(midpoint); check
  // that gradient against central differences of the rollout itself.
  const auto c = cohort(3, 14, 2.0, 13);
  const Model m = random_model(c.dataset, 6);
  const auto ctx = make_context(m, c.dataset.records[0], 6);
  const auto plan = plan_of("mix", {{0, 1}, {1, 1}, {1, 0}});
  const std::size_t W = m.schema().input_width();
  std::vector<double> base(W, 0.0);

  auto f = [&](const Tensor& inputs, std::size_t j) {
    RolloutContext k = ctx;
    k.inputs = inputs;
    m.encoder().forward(m.enc_params, k.inputs, &k.tape);
    return rollout(m, k, plan).at(j, 0);
  };
  // the midpoint-rule IG with 8 steps on the exact path integral, compared with 8 explicit gradient probes
  IgConfig cfg;
  cfg.steps = 8;
  const auto rep = integrated_gradients(m, ctx, plan, cfg, base);
  for (std::size_t j = 0; j < 3; ++j) {
    double expect = 0.0;
    for (std::size_t k = 0; k < 8; ++k) {
      const double alpha = (k + 0.5) / 8.0;
      Tensor mid = ctx.inputs;
      mid *= alpha;
      for (std::size_t r = 0; r < mid.dim(0); ++r)
        for (std::size_t i = 0; i < W; ++i) {
          const double h = 1e-6;
          Tensor up = mid, dn = mid;
          up.at(r, i) += h;
          dn.at(r, i) -= h;
          expect += ctx.inputs.at(r, i) * (f(up, j) - f(dn, j)) / (2 * h) / 8.0;
        }
    }
    CHECK(rep.phi_sum[j] == doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("softmax aggregation examples") {
  Tensor phi({2, 2});
  phi.at(0, 1) = std::log(3.0) - 0.1;
  phi.at(1, 1) = std::log(3.0) + 0.1;
  const auto [raw, w] = aggregate_attribution(phi);
  CHECK(raw[0] == 0.0);
  CHECK(raw[1] == doctest::Approx(std::log(3.0)));
  CHECK(w[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(0.75).epsilon(1e-12));

  Tensor flat({3, 5}, 0.7);
  for (double v : aggregate_attribution(flat).second) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  RngStream rs(1, 1);
  Tensor r({4, 6});
  for (double& v : r.storage()) v = 5 * rs.normal();
  Tensor shifted = r;
  for (double& v : shifted.storage()) v += 3.25;
  const auto a = aggregate_attribution(r).second, b = aggregate_attribution(shifted).second;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(a[i] - b[i]) <= 1e-12);
    sum += a[i];
  }
  CHECK(std::abs(sum - 1.0) <= 1e-9);
  CHECK_THROWS_AS(aggregate_attribution(Tensor({0, 3})), ShapeError);
}

TEST_CASE("largest remainder percentages always total 100") {
  RngStream rs(3, 3);
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t n = 1 + rs.below(7);
    std::vector<double> w(n);
    for (double& v : w) v = rs.bernoulli(0.2) ? 0.0 : rs.uniform();
    const auto p = largest_remainder_percent(w);
    int total = 0;
    for (int v : p) {
      CHECK(v >= 0);
      total += v;
    }
    CHECK(total == 100);
  }
  CHECK(largest_remainder_percent(std::vector<double>{1, 1, 1}) == std::vector<int>{34, 33, 33});
  CHECK(largest_remainder_percent(std::vector<double>{0, 0}) == std::vector<int>{50, 50});
  CHECK(largest_remainder_percent(std::vector<double>{0.4, 0.6}) == std::vector<int>{40, 60});
  CHECK_THROWS_AS(largest_remainder_percent(std::vector<double>{-1, 2}), ShapeError);
}

TEST_CASE("identical trajectories are ranked by treatment burden") {
  CounterfactualResult r;
  r.origin = 5;
  r.horizon = 3;
  r.outcome_names = {"volume"};
  for (const auto& p : default_plans(tumorsim::cohort_schema(), 3)) {
    r.plans.push_back(p);
    r.trajectories.push_back(Tensor({3, 1}, 2.0));
  }
  const auto s = preference_scores(r, 1.0, 3.0);
  // None, Chemo, Radio, Both
  CHECK(s[0] > s[1]);
  CHECK(s[1] == s[2]);
  CHECK(s[2] > s[3]);
  const auto pct = largest_remainder_percent(s);
  CHECK(pct[0] == *std::max_element(pct.begin(), pct.end()));
  CHECK_THROWS_AS(preference_scores(r, 3.0, 3.0), ConfigError);
}

TEST_CASE("template explanation is deterministic and well formed") {
  const auto c = cohort(3, 16, 2.0, 14);
  const Model m = random_model(c.dataset, 7);
  const auto& rec = c.dataset.records[1];
  const auto ctx = make_context(m, rec);
  const auto plans = default_plans(m.schema(), 6);
  const auto res = counterfactual_compare(m, ctx, plans);
  const auto att = integrated_gradients(m, ctx, plans[0], IgConfig{});
  const auto e1 = template_explanation(m, rec, res, att, 1.0, 50.0);
  const auto e2 = template_explanation(m, rec, res, att, 1.0, 50.0);
  CHECK(e1.text() == e2.text());
  CHECK(e1.to_json().dump() == e2.to_json().dump());
  int total = 0;
  for (int p : e1.preference) total += p;
  CHECK(total == 100);
  for (const auto& sec : e1.sections) CHECK_FALSE(sec.empty());
  CHECK(e1.sections[1].find(att.input_names[att.top_k(1)[0]]) != std::string::npos);
  CHECK(e1.labels == std::vector<std::string>{"None", "Chemo", "Radio", "Both"});
}

TEST_CASE("trained model: both treatments shrink tumours relative to none") {
  const auto& t = trained();
  const auto& test = t.splits.test;
  std::size_t ok = 0, total = 0;
  for (const auto& rec : test.records) {
    if (rec.length() < 12) continue;
    const auto ctx = make_context(t.model, rec, 12);
    const auto res = counterfactual_compare(t.model, ctx, default_plans(t.model.schema(), 6));
    ok += res.trajectories[3].at(5, 0) <= res.trajectories[0].at(5, 0);
    ++total;
  }
  REQUIRE(total > 20);
  CHECK(static_cast<double>(ok) / static_cast<double>(total) >= 0.9);
}

TEST_CASE("trained model: completeness within tolerance at 256 steps") {
  const auto& t = trained();
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 10 && i < t.splits.test.records.size(); ++i) {
    const auto& rec = t.splits.test.records[i];
    const auto ctx = make_context(t.model, rec, 15);
    IgConfig cfg;
    cfg.steps = kIgVerificationSteps;
    const auto rep = integrated_gradients(t.model, ctx, default_plans(t.model.schema(), 6)[i % 4], cfg);
    for (std::size_t j = 0; j < 6; ++j) {
      const double d = rep.f_input[j] - rep.f_baseline[j];
      CHECK(std::abs(rep.phi_sum[j] - d) <= 1e-3 * std::abs(d) + 1e-6);
    }
    ++checked;
  }
  CHECK(checked == 10);
}
