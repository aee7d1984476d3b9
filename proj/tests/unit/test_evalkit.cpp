#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "counterfact/evalkit.hpp"
#include "counterfact/inference.hpp"
#include "counterfact/preprocess.hpp"
#include "counterfact/rng.hpp"
#include "counterfact/tumorsim.hpp"

using namespace cfx;

namespace {

tumorsim::Cohort small_cohort(std::size_t n, std::size_t horizon, double gamma, std::uint64_t seed) {
  tumorsim::SimCohortConfig c;
  c.n_patients = n;
  c.horizon = horizon;
  c.gamma = gamma;
  c.seed = seed;
  return tumorsim::simulate_cohort(c);
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder.channels = 6;
  m.encoder.dilations = {1, 2};
  m.encoder.repr_width = 8;
  m.head_hidden = 8;
  return m;
}

Model fitted_model(const Dataset& raw, std::uint64_t seed) {
  Model m = Model::create(raw.schema, tiny_model(), RngStream(seed, 1));
  m.stats = zscore_fit(impute_dataset(raw));
  return m;
}

// Rank-sum oracle: P(score+ > score-) + 0.5 P(tie).
double mann_whitney(const std::vector<double>& s, const std::vector<int>& y) {
  double u = 0.0, np = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    np += 1.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      u += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  for (int v : y) nn += v == 0;
  return u / (np * nn);
}

ProbeReport report_with(std::vector<double> r2, std::vector<bool> constant) {
  ProbeReport p;
  for (std::size_t j = 0; j < r2.size(); ++j) p.variables.push_back("v" + std::to_string(j));
  p.r2 = std::move(r2);
  p.constant = std::move(constant);
  return p;
}

}  // namespace

TEST_CASE("rmse examples and errors") {
  const std::vector<double> a{1.0, 2.0, 3.0};
  CHECK(rmse(a, a) == 0.0);
  const std::vector<double> shifted{1.5, 2.5, 3.5};
  CHECK(rmse(shifted, a) == doctest::Approx(0.5).epsilon(1e-15));
  const std::vector<double> p{1.0, 2.0}, t{0.0, 0.0};
  CHECK(rmse(p, t) == doctest::Approx(std::sqrt(2.5)).epsilon(1e-15));
  CHECK(rmse(p, t) == doctest::Approx(1.5811).epsilon(1e-4));
  CHECK_THROWS_AS(rmse(std::vector<double>{}, std::vector<double>{}), ShapeError);
  CHECK_THROWS_AS(rmse(p, a), ShapeError);
}

TEST_CASE("rmse is invariant under joint permutation") {
  RngStream s(4, 0);
  std::vector<double> p(50), t(50);
  for (std::size_t i = 0; i < 50; ++i) {
    p[i] = s.normal();
    t[i] = s.normal();
  }
  const double base = rmse(p, t);
  std::vector<std::size_t> idx(50);
  for (std::size_t i = 0; i < 50; ++i) idx[i] = i;
  shuffle(s, idx);
  std::vector<double> pp(50), tt(50);
  for (std::size_t i = 0; i < 50; ++i) {
    pp[i] = p[idx[i]];
    tt[i] = t[idx[i]];
  }
  CHECK(rmse(pp, tt) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("classification metrics on a confusion layout") {
  std::vector<int> pred, truth;
  const auto push = [&](int p, int t, int n) {
    for (int i = 0; i < n; ++i) {
      pred.push_back(p);
      truth.push_back(t);
    }
  };
  push(1, 1, 52);
  push(0, 1, 15);
  push(1, 0, 38);
  push(0, 0, 100);
  const auto m = classification_metrics(pred, truth);
  CHECK(m.tp == 52);
  CHECK(m.fn == 15);
  CHECK(m.fp == 38);
  CHECK(m.tn == 100);
  CHECK(m.recall == doctest::Approx(52.0 / 67.0));
  CHECK(m.recall == doctest::Approx(0.7761).epsilon(1e-4));
  CHECK(m.precision == doctest::Approx(0.5778).epsilon(1e-4));
  CHECK(m.accuracy == doctest::Approx(0.7415).epsilon(1e-4));
  CHECK(m.f1 == doctest::Approx(2 * m.precision * m.recall / (m.precision + m.recall)));
  CHECK_FALSE(m.precision_degenerate);
}

TEST_CASE("classification zero-denominator conventions") {
  const std::vector<int> all{1, 0, 1, 0};
  const auto perfect = classification_metrics(all, all);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);

  const std::vector<int> none{0, 0, 0, 0};
  const auto m = classification_metrics(none, all);
  CHECK(m.precision == 0.0);
  CHECK(m.precision_degenerate);
  CHECK(m.recall == 0.0);
  CHECK_FALSE(m.recall_degenerate);
  CHECK(m.f1 == 0.0);
  CHECK(m.f1_degenerate);

  const auto neg = classification_metrics(none, none);
  CHECK(neg.accuracy == 1.0);
  CHECK(neg.recall_degenerate);
  CHECK(std::isfinite(neg.f1));
  CHECK_THROWS_AS(classification_metrics(std::vector<int>{2}, std::vector<int>{1}), ShapeError);
}

TEST_CASE("auroc examples") {
  CHECK(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{0, 0, 1, 1}) == 0.0);
  CHECK(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{0, 1, 0, 1}) == 0.5);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), ShapeError);
}

TEST_CASE("auroc equals the normalized Mann-Whitney statistic") {
  RngStream s(11, 0);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 2 + s.below(199);
    std::vector<double> sc(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = s.bernoulli(0.4) ? 1 : 0;
      // Coarse scores force ties.
      sc[i] = std::round((s.uniform() + 0.3 * y[i]) * 10.0) / 10.0;
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(auroc(sc, y) == doctest::Approx(mann_whitney(sc, y)).epsilon(1e-12));
  }
}

TEST_CASE("ece examples") {
  CHECK(ece(std::vector<double>{1.0, 1.0}, std::vector<int>{1, 1}) == 0.0);
  std::vector<double> p7(10, 0.7);
  std::vector<int> y7{1, 1, 1, 1, 1, 1, 1, 0, 0, 0};
  CHECK(ece(p7, y7) == doctest::Approx(0.0).epsilon(1e-12));
  std::vector<double> p9(10, 0.9);
  std::vector<int> y5{1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  CHECK(ece(p9, y5) == doctest::Approx(0.4));
  CHECK_THROWS_AS(ece(std::vector<double>{}, std::vector<int>{}), ShapeError);
  CHECK_THROWS_AS(ece(std::vector<double>{1.2}, std::vector<int>{1}), ShapeError);
  CHECK_THROWS_AS(ece(p9, y5, 0), ConfigError);
}

TEST_CASE("ece of a calibrated generator is small") {
  RngStream s(5, 0);
  const std::size_t n = 10000;
  std::vector<double> p(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = s.uniform();
    y[i] = s.bernoulli(p[i]) ? 1 : 0;
  }
  CHECK(ece(p, y, 10) < 0.02);
}

TEST_CASE("paired t-test against a hand computation") {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0}, b{0.5, 1.0, 2.5, 3.0};
  // d = {0.5, 1, 0.5, 1}: mean 0.75, sd 0.288675, t = 5.196152, df 3.
  const auto r = paired_t_test(a, b);
  CHECK(r.mean_difference == doctest::Approx(0.75));
  CHECK(r.t == doctest::Approx(5.196152).epsilon(1e-6));
  CHECK(r.df == 3);
  CHECK(r.p_value == doctest::Approx(0.013846).epsilon(1e-4));
  const auto flat = paired_t_test(a, a);
  CHECK(flat.t == 0.0);
  CHECK(flat.p_value == 1.0);
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), ShapeError);
}

TEST_CASE("delta r2 examples and antisymmetry") {
  const auto u = report_with({0.9, 0.5, 0.3}, {false, false, true});
  const auto b = report_with({0.86, 0.7, 0.1}, {false, false, false});
  const auto d = delta_r2(u, b);
  CHECK(d.delta[0] == doctest::Approx(0.04));
  CHECK(d.delta[1] < 0.0);
  CHECK(d.excluded[2]);
  CHECK(d.delta[2] == 0.0);
  const auto back = delta_r2(b, u);
  for (std::size_t j = 0; j < 3; ++j) CHECK(back.delta[j] == -d.delta[j]);
  for (double v : delta_r2(u, u).delta) CHECK(v == 0.0);
  auto other = b;
  other.variables[0] = "renamed";
  CHECK_THROWS_AS(delta_r2(u, other), ShapeError);
  CHECK(d.to_json()["variables"][2]["delta_r2"].is_null());
}

TEST_CASE("factual horizon rmse matches a manual rollout") {
  const auto cohort = small_cohort(4, 10, 2.0, 3);
  const Model m = fitted_model(cohort.dataset, 7);
  const PreparedSet set = prepare_for_model(m, cohort.dataset);
  const auto h = factual_horizon_rmse(m, set, 3, 2);
  REQUIRE(h.rmse.size() == 3);
  // Origins 2..7 for four patients.
  CHECK(h.count[0] == 24);

  std::vector<double> sse(3, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto& raw = cohort.dataset.records[r];
    for (std::size_t origin = 2; origin <= 7; ++origin) {
      const auto ctx = make_context(m, raw, origin);
      TreatmentPlan plan{"f", Tensor({3, 2})};
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t j = 0; j < 2; ++j) plan.steps.at(k, j) = raw.a.at(origin - 1 + k, j);
      const Tensor p = rollout(m, ctx, plan);
      for (std::size_t k = 0; k < 3; ++k) sse[k] += std::pow(p.at(k, 0) - raw.y.at(origin + k, 0), 2);
    }
  }
  for (std::size_t k = 0; k < 3; ++k) CHECK(h.rmse[k] == doctest::Approx(std::sqrt(sse[k] / 24.0)).epsilon(1e-9));
  CHECK(factual_horizon_rmse(m, set, 3, 2, 2).count[0] == 12);
  CHECK_THROWS_AS(factual_horizon_rmse(m, set, 20, 1), ShapeError);
}

TEST_CASE("counterfactual rmse covers every plan and origin") {
  const auto cohort = small_cohort(5, 12, 0.0, 9);
  const Model m = fitted_model(cohort.dataset, 2);
  const auto cf = counterfactual_horizon_rmse(m, cohort.dataset, cohort.truth, cohort.config, 4);
  CHECK(cf.rmse.size() == 4);
  CHECK(cf.count[0] == 5 * 8 * 4);  // origins 1..8, four plans
  for (double v : cf.rmse) CHECK(std::isfinite(v));
  std::vector<tumorsim::PatientTruth> short_truth(cohort.truth.begin(), cohort.truth.begin() + 2);
  CHECK_THROWS_AS(counterfactual_horizon_rmse(m, cohort.dataset, short_truth, cohort.config, 4), ShapeError);
}

TEST_CASE("eval report json and csv layout") {
  EvalReport a;
  a.label = "smmd";
  a.factual.rmse = {0.5, 0.75};
  a.factual.count = {10, 10};
  a.seed = 10;
  EvalReport b = a;
  b.label = "grl";
  b.factual.rmse = {1.0, 2.0};
  const std::vector<EvalReport> reps{a, b};
  CHECK(horizon_rmse_csv(reps) == "model,tau_1,tau_2\nsmmd,0.5,0.75\ngrl,1,2\n");
  const auto j = a.to_json();
  CHECK(j["counterfactual"].is_null());
  CHECK(j["factual"]["rmse"][1] == 0.75);
}

TEST_CASE("probe leaves the encoder untouched and reconstructs from a rich representation") {
  const auto cohort = small_cohort(60, 12, 1.0, 21);
  Dataset tr = cohort.dataset, va = cohort.dataset;
  tr.records.resize(45);
  va.records.erase(va.records.begin(), va.records.begin() + 45);
  const Model m = fitted_model(tr, 4);
  const std::string before = serialize_checkpoint(m);
  ProbeConfig pc;
  pc.epochs = 60;
  pc.learning_rate = 1e-2;
  pc.batch_size = 16;
  std::size_t calls = 0;
  const auto rep = reconstruction_probe(m, tr, va, pc, [&](std::size_t, double, double) { ++calls; });
  CHECK(serialize_checkpoint(m) == before);
  CHECK(rep.encoder_digest == encoder_digest(m));
  CHECK(rep.train_loss.size() == 60);
  CHECK(rep.val_loss.size() == 60);
  CHECK(calls == 60);
  CHECK(rep.val_loss.back() < rep.val_loss.front());
  REQUIRE(rep.variables.size() == 3);
  // The current volume enters the encoder directly, so it is recoverable.
  CHECK(rep.r2[0] > 0.9);
  CHECK(rep.r2[2] > 0.9);
  for (bool c : rep.constant) CHECK_FALSE(c);

  const auto again = reconstruction_probe(m, tr, va, pc);
  CHECK(again.val_loss == rep.val_loss);
  CHECK_THROWS_AS(ProbeConfig::from_json({{"epochs", 3}, {"bogus", 1}}), ConfigError);
  CHECK(ProbeConfig::from_json(pc.to_json()).epochs == 60);
}

TEST_CASE("representation export shape and determinism") {
  const auto cohort = small_cohort(3, 7, 0.0, 2);
  const Model m = fitted_model(cohort.dataset, 1);
  const std::string csv = export_representations(m, cohort.dataset);
  CHECK(csv == export_representations(m, cohort.dataset));
  std::vector<std::string> lines;
  std::size_t start = 0;
  for (std::size_t i = 0; i < csv.size(); ++i)
    if (csv[i] == '\n') {
      lines.push_back(csv.substr(start, i - start));
      start = i + 1;
    }
  REQUIRE(lines.size() == 1 + 3 * 7);
  const auto cols = [](const std::string& l) { return 1 + std::count(l.begin(), l.end(), ','); };
  const std::size_t expected = 2 + 8 + 2 + cohort.dataset.schema.d_v();
  CHECK(static_cast<std::size_t>(cols(lines[0])) == expected);
  CHECK(static_cast<std::size_t>(cols(lines[5])) == expected);
  CHECK(lines[0].rfind("patient_id,t,B_1", 0) == 0);
}
