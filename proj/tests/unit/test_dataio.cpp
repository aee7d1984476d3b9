#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>

#include "counterfact/preprocess.hpp"
#include "counterfact/tumorsim.hpp"

using namespace cfx;

namespace {

Schema tiny_schema() {
  Schema s;
  s.x_names = {"hr"};
  s.a_names = {"drug"};
  s.y_names = {"bp"};
  s.v_names = {"age", "sex_f", "sex_m"};
  s.onehot_groups = {{"sex", {1, 2}}};
  return s;
}

TrajectoryRecord tiny_record(std::string id, std::vector<double> x, std::vector<std::uint8_t> mask) {
  TrajectoryRecord r;
  r.patient_id = std::move(id);
  const std::size_t T = x.size();
  r.statics = {50.0, 1.0, 0.0};
  r.x = Tensor({T, 1}, x);
  r.a = Tensor({T, 1});
  r.y = Tensor({T, 1});
  for (std::size_t t = 0; t < T; ++t) {
    r.a[t] = t % 2;
    r.y[t] = 100.0 + t;
  }
  r.observed = std::move(mask);
  return r;
}

Dataset sim_dataset(std::size_t n, std::size_t T, double gamma = 0.0) {
  tumorsim::SimCohortConfig c;
  c.n_patients = n;
  c.horizon = T;
  c.gamma = gamma;
  return tumorsim::simulate_cohort(c).dataset;
}

}  // namespace

TEST_CASE("save/load round trip and empty datasets") {
  auto dir = std::filesystem::temp_directory_path() / "cfx_dataio_rt";
  std::filesystem::remove_all(dir);
  Dataset ds = sim_dataset(4, 6);
  save_dataset(ds, dir);
  CHECK(load_dataset(dir) == ds);
  Dataset empty;
  empty.schema = ds.schema;
  save_dataset(empty, dir / "empty");
  Dataset back = load_dataset(dir / "empty");
  CHECK(back.records.empty());
  CHECK(back.schema == ds.schema);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a treatment value of 2 is rejected with its location") {
  Dataset ds = sim_dataset(2, 3);
  std::string csv = write_trajectory_csv(ds);
  // Row 3 (second data row), first treatment column.
  auto line_start = csv.find('\n', csv.find('\n') + 1) + 1;
  auto line_end = csv.find('\n', line_start);
  std::string line = csv.substr(line_start, line_end - line_start);
  std::vector<std::string> cells;
  std::size_t pos = 0;
  while (true) {
    auto c = line.find(',', pos);
    cells.push_back(line.substr(pos, c - pos));
    if (c == std::string::npos) break;
    pos = c + 1;
  }
  cells[4] = "2";
  std::string fixed;
  for (std::size_t i = 0; i < cells.size(); ++i) fixed += (i ? "," : "") + cells[i];
  csv.replace(line_start, line_end - line_start, fixed);
  try {
    parse_trajectory_csv(csv, ds.schema);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.row() == 3);
    CHECK(e.column() == "a_chemo");
  }
}

TEST_CASE("missing column is reported") {
  Dataset ds = sim_dataset(1, 2);
  std::string csv = write_trajectory_csv(ds);
  auto pos = csv.find(",y_volume");
  csv.erase(pos, std::string(",y_volume").size());
  CHECK_THROWS_AS(parse_trajectory_csv(csv, ds.schema), ParseError);
}

TEST_CASE("LOCF then NOCB imputation") {
  Schema s = tiny_schema();
  auto r = impute_locf_nocb(tiny_record("a", {0, 5, 0, 7}, {0, 1, 0, 1}), s);
  CHECK(r.x.storage() == std::vector<double>{5, 5, 5, 7});
  CHECK(r.observed == std::vector<std::uint8_t>{0, 1, 0, 1});
  r = impute_locf_nocb(tiny_record("b", {1, 0, 0, 4}, {1, 0, 0, 1}), s);
  CHECK(r.x.storage() == std::vector<double>{1, 1, 1, 4});
  auto full = tiny_record("c", {1, 2, 3}, {1, 1, 1});
  CHECK(impute_locf_nocb(full, s).x == full.x);
  CHECK_THROWS(impute_locf_nocb(tiny_record("d", {0, 0}, {0, 0}), s));
}

TEST_CASE("z-score fit and apply") {
  Dataset ds;
  ds.schema = tiny_schema();
  ds.records.push_back(tiny_record("a", {1.0}, {1}));
  ds.records.push_back(tiny_record("b", {3.0}, {1}));
  auto st = zscore_fit(ds);
  CHECK(st.x_mean[0] == 2.0);
  CHECK(st.x_std[0] == 1.0);
  Dataset z = zscore_apply(ds, st);
  CHECK(z.records[0].x[0] == -1.0);
  CHECK(z.records[1].x[0] == 1.0);
  // Constant outcome and statics: sigma replaced by 1, all zeros after shifting.
  CHECK(st.y_std[0] == 1.0);
  CHECK(z.records[0].y[0] == 0.0);
  CHECK(st.v_mean[1] == 0.0);
  CHECK(st.v_std[1] == 1.0);
  CHECK_THROWS(zscore_apply(z, st));
}

TEST_CASE("z-score on the training split has zero mean and unit std") {
  Dataset ds = impute_dataset(sim_dataset(40, 10));
  auto st = zscore_fit(ds);
  Dataset z = zscore_apply(ds, st);
  for (std::size_t j = 0; j < 2; ++j) {
    double m = 0, v = 0, n = 0;
    for (const auto& r : z.records)
      for (std::size_t t = 0; t < r.length(); ++t) {
        m += r.x.at(t, j);
        ++n;
      }
    m /= n;
    for (const auto& r : z.records)
      for (std::size_t t = 0; t < r.length(); ++t) v += (r.x.at(t, j) - m) * (r.x.at(t, j) - m);
    v /= n;
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(std::sqrt(v) - 1.0) < 1e-9);
  }
  Dataset back = zscore_invert(z);
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    for (std::size_t k = 0; k < ds.records[i].x.size(); ++k)
      CHECK(std::abs(back.records[i].x[k] - ds.records[i].x[k]) <= 1e-12 * std::abs(ds.records[i].x[k]) + 1e-12);
}

TEST_CASE("rolling origin windows") {
  auto r10 = tiny_record("a", std::vector<double>(10, 1.0), std::vector<std::uint8_t>(10, 1));
  auto w = rolling_origin_windows(r10, 0, 3);
  REQUIRE(w.size() == 7);
  CHECK(w.front().origin == 1);
  CHECK(w.back().origin == 7);
  auto r4 = tiny_record("b", std::vector<double>(4, 1.0), std::vector<std::uint8_t>(4, 1));
  CHECK(rolling_origin_windows(r4, 0, 6).empty());
  CHECK(rolling_origin_windows(r10, 0, 1).size() == 9);
}

TEST_CASE("encoder inputs never look past the origin") {
  Dataset ds = sim_dataset(1, 8);
  const auto& r = ds.records[0];
  Tensor full = encoder_inputs(r, ds.schema);
  Tensor part = encoder_inputs(r, ds.schema, 4);
  CHECK(part.dim(0) == 4);
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t j = 0; j < full.dim(1); ++j) CHECK(part.at(s, j) == full.at(s, j));
  // Previous-treatment columns at step 0 are zero, then lag by one.
  const std::size_t base = ds.schema.d_x() + ds.schema.d_y() + ds.schema.d_v();
  CHECK(full.at(0, base) == 0.0);
  CHECK(full.at(3, base) == r.a.at(2, 0));
}

TEST_CASE("patient split is an exact deterministic partition") {
  Dataset ds = sim_dataset(100, 3);
  RngStream a(5, 0), b(5, 0);
  Splits s = split_patients(ds, {0.7, 0.15, 0.15}, a);
  Splits s2 = split_patients(ds, {0.7, 0.15, 0.15}, b);
  CHECK(s.train.size() == 70);
  CHECK(s.val.size() == 15);
  CHECK(s.test.size() == 15);
  CHECK(s.train == s2.train);
  std::set<std::string> ids;
  for (const Dataset* d : {&s.train, &s.val, &s.test})
    for (const auto& r : d->records) ids.insert(r.patient_id);
  CHECK(ids.size() == 100);
  Dataset two = sim_dataset(2, 3);
  RngStream c(1, 1);
  CHECK_THROWS_AS(split_patients(two, {0.7, 0.15, 0.15}, c), ConfigError);
}

TEST_CASE("positivity report") {
  Dataset ds = sim_dataset(300, 20, 0.0);
  auto rep = positivity_check(ds);
  REQUIRE(rep.arms.size() == 4);
  for (const auto& arm : rep.arms) CHECK(std::abs(arm.fraction - 0.25) < 0.03);
  CHECK(rep.ok());
  for (auto& r : ds.records)
    for (std::size_t t = 0; t < r.length(); ++t) r.a.at(t, 1) = 0.0;
  rep = positivity_check(ds);
  std::size_t flagged = 0;
  for (const auto& arm : rep.arms)
    if (arm.assignment[1] == 1) flagged += arm.zero_support;
  CHECK(flagged == 2);
  CHECK_FALSE(rep.ok());
  Dataset empty;
  empty.schema = ds.schema;
  CHECK(positivity_check(empty).arms.empty());
}
