#include "counterfact/dataset.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "counterfact/fileutil.hpp"

namespace cfx {

namespace {

using nlohmann::json;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

std::optional<double> parse_number(const std::string& cell, std::size_t row, const std::string& column) {
  if (cell.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ParseError("not a number: '" + cell + "'", row, column);
  return v;
}

std::vector<std::string> units_or_empty(const json& j, const char* key, std::size_t n) {
  if (!j.contains(key)) return std::vector<std::string>(n);
  return j.at(key).get<std::vector<std::string>>();
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> Schema::input_names() const {
  std::vector<std::string> out;
  for (const auto& n : x_names) out.push_back("x_" + n);
  for (const auto& n : y_names) out.push_back("y_" + n);
  for (const auto& n : v_names) out.push_back("v_" + n);
  for (const auto& n : a_names) out.push_back("a_prev_" + n);
  return out;
}

bool Schema::is_onehot_column(std::size_t v_index) const noexcept {
  for (const auto& g : onehot_groups)
    for (auto c : g.columns)
      if (c == v_index) return true;
  return false;
}

void Schema::validate() const {
  if (d_a() == 0) throw ConfigError("schema declares no treatment columns");
  if (d_y() == 0) throw ConfigError("schema declares no outcome columns");
  auto check_units = [](const std::vector<std::string>& units, std::size_t n, const char* what) {
    if (!units.empty() && units.size() != n) throw ConfigError(std::string("unit list length mismatch for ") + what);
  };
  check_units(x_units, d_x(), "x");
  check_units(y_units, d_y(), "y");
  check_units(v_units, d_v(), "v");
  for (const auto& g : onehot_groups) {
    if (g.columns.empty()) throw ConfigError("one-hot group '" + g.name + "' is empty");
    for (auto c : g.columns)
      if (c >= d_v()) throw ConfigError("one-hot group '" + g.name + "' references a missing static column");
  }
  for (auto [xi, yi] : outcome_mirrors)
    if (xi >= d_x() || yi >= d_y()) throw ConfigError("outcome mirror references a missing column");
  for (const auto& d : covariate_dynamics) {
    if (d.x >= d_x() || d.treatment >= d_a()) throw ConfigError("covariate dynamics reference a missing column");
    for (auto [xi, yi] : outcome_mirrors)
      if (xi == d.x) throw ConfigError("a covariate cannot both mirror an outcome and follow treatment dynamics");
    if (!std::isfinite(d.decay) || !std::isfinite(d.dose)) throw ConfigError("covariate dynamics must be finite");
  }
}

json Schema::to_json() const {
  json groups = json::array();
  for (const auto& g : onehot_groups) groups.push_back({{"name", g.name}, {"columns", g.columns}});
  json mirrors = json::array();
  for (auto [xi, yi] : outcome_mirrors) mirrors.push_back({{"x", xi}, {"y", yi}});
  json dyn = json::array();
  for (const auto& d : covariate_dynamics)
    dyn.push_back({{"x", d.x}, {"treatment", d.treatment}, {"decay", d.decay}, {"dose", d.dose}});
  return {{"x", x_names},     {"a", a_names},       {"y", y_names},
          {"v", v_names},     {"x_units", x_units}, {"y_units", y_units},
          {"v_units", v_units}, {"onehot_groups", groups}, {"outcome_mirrors", mirrors},
          {"covariate_dynamics", dyn},
          {"d_x", d_x()},     {"d_a", d_a()},       {"d_y", d_y()},
          {"d_v", d_v()}};
}

Schema Schema::from_json(const json& j) {
  Schema s;
  s.x_names = j.at("x").get<std::vector<std::string>>();
  s.a_names = j.at("a").get<std::vector<std::string>>();
  s.y_names = j.at("y").get<std::vector<std::string>>();
  s.v_names = j.at("v").get<std::vector<std::string>>();
  s.x_units = units_or_empty(j, "x_units", s.x_names.size());
  s.y_units = units_or_empty(j, "y_units", s.y_names.size());
  s.v_units = units_or_empty(j, "v_units", s.v_names.size());
  if (j.contains("onehot_groups"))
    for (const auto& g : j.at("onehot_groups"))
      s.onehot_groups.push_back({g.at("name").get<std::string>(), g.at("columns").get<std::vector<std::size_t>>()});
  if (j.contains("outcome_mirrors"))
    for (const auto& m : j.at("outcome_mirrors"))
      s.outcome_mirrors.emplace_back(m.at("x").get<std::size_t>(), m.at("y").get<std::size_t>());
  if (j.contains("covariate_dynamics"))
    for (const auto& d : j.at("covariate_dynamics"))
      s.covariate_dynamics.push_back({d.at("x").get<std::size_t>(), d.at("treatment").get<std::size_t>(),
                                      d.at("decay").get<double>(), d.at("dose").get<double>()});
  s.validate();
  return s;
}

void TrajectoryRecord::validate(const Schema& schema) const {
  const std::size_t T = length();
  if (T == 0) throw ShapeError("record '" + patient_id + "' is empty");
  if (statics.size() != schema.d_v()) throw ShapeError("record '" + patient_id + "' has wrong static width");
  auto check = [&](const Tensor& t, std::size_t width, const char* what) {
    if (t.rank() != 2 || t.dim(0) != T || t.dim(1) != width) {
      throw ShapeError("record '" + patient_id + "': " + what + " has shape " + shape_string(t.shape()));
    }
  };
  check(x, schema.d_x(), "X");
  check(a, schema.d_a(), "A");
  check(y, schema.d_y(), "Y");
  if (observed.size() != T * schema.d_x()) throw ShapeError("record '" + patient_id + "': mask misaligned with X");
  for (double v : a.data())
    if (v != 0.0 && v != 1.0) throw ShapeError("record '" + patient_id + "': treatment outside {0,1}");
  for (const auto& g : schema.onehot_groups) {
    double s = 0.0;
    for (auto c : g.columns) {
      if (statics[c] != 0.0 && statics[c] != 1.0) throw ShapeError("record '" + patient_id + "': one-hot value not in {0,1}");
      s += statics[c];
    }
    if (s != 1.0) throw ShapeError("record '" + patient_id + "': one-hot group '" + g.name + "' does not sum to 1");
  }
}

json NormalizationStats::to_json() const {
  return {{"x_mean", x_mean}, {"x_std", x_std}, {"y_mean", y_mean},
          {"y_std", y_std},   {"v_mean", v_mean}, {"v_std", v_std}};
}

NormalizationStats NormalizationStats::from_json(const json& j) {
  NormalizationStats s;
  s.x_mean = j.at("x_mean").get<std::vector<double>>();
  s.x_std = j.at("x_std").get<std::vector<double>>();
  s.y_mean = j.at("y_mean").get<std::vector<double>>();
  s.y_std = j.at("y_std").get<std::vector<double>>();
  s.v_mean = j.at("v_mean").get<std::vector<double>>();
  s.v_std = j.at("v_std").get<std::vector<double>>();
  return s;
}

void Dataset::validate() const {
  schema.validate();
  for (const auto& r : records) r.validate(schema);
  if (stats) {
    if (stats->x_mean.size() != schema.d_x() || stats->y_mean.size() != schema.d_y() ||
        stats->v_mean.size() != schema.d_v()) {
      throw ShapeError("normalization stats do not match the schema");
    }
  }
}

TreatmentPlan TreatmentPlan::constant(std::string label, std::vector<double> assignment, std::size_t horizon) {
  TreatmentPlan p;
  p.label = std::move(label);
  p.steps = Tensor({horizon, assignment.size()});
  for (std::size_t t = 0; t < horizon; ++t)
    for (std::size_t c = 0; c < assignment.size(); ++c) p.steps.at(t, c) = assignment[c];
  return p;
}

std::vector<TreatmentPlan> default_plans(const Schema& schema, std::size_t horizon) {
  const std::size_t d = schema.d_a();
  std::vector<TreatmentPlan> plans;
  plans.push_back(TreatmentPlan::constant("None", std::vector<double>(d, 0.0), horizon));
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<double> one(d, 0.0);
    one[c] = 1.0;
    std::string label = schema.a_names[c];
    if (!label.empty()) label[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(label[0])));
    plans.push_back(TreatmentPlan::constant(label, one, horizon));
  }
  if (d > 1) plans.push_back(TreatmentPlan::constant("Both", std::vector<double>(d, 1.0), horizon));
  return plans;
}

std::string write_trajectory_csv(const Dataset& ds) {
  const Schema& s = ds.schema;
  std::string out = "patient_id,t";
  for (const auto& n : s.x_names) out += ",x_" + n;
  for (const auto& n : s.a_names) out += ",a_" + n;
  for (const auto& n : s.y_names) out += ",y_" + n;
  for (const auto& n : s.v_names) out += ",v_" + n;
  out += '\n';
  for (const auto& r : ds.records) {
    for (std::size_t t = 0; t < r.length(); ++t) {
      out += r.patient_id;
      out += ',';
      out += std::to_string(t);
      for (std::size_t j = 0; j < s.d_x(); ++j) {
        out += ',';
        if (r.observed[t * s.d_x() + j]) out += format_double(r.x.at(t, j));
      }
      for (std::size_t j = 0; j < s.d_a(); ++j) out += r.a.at(t, j) != 0.0 ? ",1" : ",0";
      for (std::size_t j = 0; j < s.d_y(); ++j) out += ',' + format_double(r.y.at(t, j));
      for (std::size_t j = 0; j < s.d_v(); ++j) out += ',' + format_double(r.statics[j]);
      out += '\n';
    }
  }
  return out;
}

Schema schema_from_header(const std::string& header_line) {
  auto cells = split_csv_line(header_line);
  if (cells.size() < 2 || cells[0] != "patient_id" || cells[1] != "t") {
    throw ParseError("header must start with patient_id,t", 1);
  }
  Schema s;
  for (std::size_t i = 2; i < cells.size(); ++i) {
    const std::string& c = cells[i];
    if (c.size() < 3 || c[1] != '_') throw ParseError("unrecognized column '" + c + "'", 1, c);
    const std::string name = c.substr(2);
    switch (c[0]) {
      case 'x': s.x_names.push_back(name); break;
      case 'a': s.a_names.push_back(name); break;
      case 'y': s.y_names.push_back(name); break;
      case 'v': s.v_names.push_back(name); break;
      default: throw ParseError("unrecognized column '" + c + "'", 1, c);
    }
  }
  return s;
}

std::vector<TrajectoryRecord> parse_trajectory_csv(const std::string& text, const Schema& schema) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("trajectory CSV is empty", 1);

  // Map header columns onto schema slots; every schema column must be present.
  const auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "patient_id" || header[1] != "t") {
    throw ParseError("header must start with patient_id,t", 1);
  }
  enum class Kind { X, A, Y, V };
  struct Slot {
    Kind kind;
    std::size_t index;
  };
  std::vector<Slot> slots;
  std::unordered_map<std::string, Slot> wanted;
  for (std::size_t j = 0; j < schema.d_x(); ++j) wanted["x_" + schema.x_names[j]] = {Kind::X, j};
  for (std::size_t j = 0; j < schema.d_a(); ++j) wanted["a_" + schema.a_names[j]] = {Kind::A, j};
  for (std::size_t j = 0; j < schema.d_y(); ++j) wanted["y_" + schema.y_names[j]] = {Kind::Y, j};
  for (std::size_t j = 0; j < schema.d_v(); ++j) wanted["v_" + schema.v_names[j]] = {Kind::V, j};
  for (std::size_t i = 2; i < header.size(); ++i) {
    auto it = wanted.find(header[i]);
    if (it == wanted.end()) throw ParseError("column not in schema", 1, header[i]);
    slots.push_back(it->second);
    wanted.erase(it);
  }
  if (!wanted.empty()) throw ParseError("missing column", 1, wanted.begin()->first);

  struct Rows {
    std::string id;
    std::vector<std::vector<std::optional<double>>> x;
    std::vector<std::vector<double>> a, y;
    std::vector<double> v;
  };
  std::vector<Rows> groups;
  std::unordered_map<std::string, std::size_t> by_id;

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()), row);
    }
    const std::string& id = cells[0];
    if (id.empty()) throw ParseError("empty patient_id", row, "patient_id");
    auto t = parse_number(cells[1], row, "t");
    if (!t || *t < 0 || std::floor(*t) != *t) throw ParseError("t must be a non-negative integer", row, "t");

    auto [it, inserted] = by_id.try_emplace(id, groups.size());
    if (inserted) {
      groups.push_back({});
      groups.back().id = id;
    }
    Rows& g = groups[it->second];
    if (static_cast<std::size_t>(*t) != g.a.size()) {
      throw ParseError("ragged or out-of-order steps for patient '" + id + "'", row, "t");
    }
    std::vector<std::optional<double>> xr(schema.d_x());
    std::vector<double> ar(schema.d_a()), yr(schema.d_y()), vr(schema.d_v());
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const std::string& col = header[i + 2];
      auto value = parse_number(cells[i + 2], row, col);
      switch (slots[i].kind) {
        case Kind::X: xr[slots[i].index] = value; break;
        case Kind::A:
          if (!value || (*value != 0.0 && *value != 1.0)) throw ParseError("treatment must be 0 or 1", row, col);
          ar[slots[i].index] = *value;
          break;
        case Kind::Y:
          if (!value) throw ParseError("missing outcome", row, col);
          yr[slots[i].index] = *value;
          break;
        case Kind::V:
          if (!value) throw ParseError("missing static covariate", row, col);
          vr[slots[i].index] = *value;
          break;
      }
    }
    if (g.a.empty()) {
      g.v = vr;
    } else if (g.v != vr) {
      throw ParseError("static covariates change within patient '" + id + "'", row);
    }
    g.x.push_back(std::move(xr));
    g.a.push_back(std::move(ar));
    g.y.push_back(std::move(yr));
  }

  std::vector<TrajectoryRecord> records;
  records.reserve(groups.size());
  for (auto& g : groups) {
    const std::size_t T = g.a.size();
    TrajectoryRecord r;
    r.patient_id = g.id;
    r.statics = g.v;
    r.x = Tensor({T, schema.d_x()});
    r.a = Tensor({T, schema.d_a()});
    r.y = Tensor({T, schema.d_y()});
    r.observed.assign(T * schema.d_x(), 0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < schema.d_x(); ++j) {
        if (g.x[t][j]) {
          r.x.at(t, j) = *g.x[t][j];
          r.observed[t * schema.d_x() + j] = 1;
        }
      }
      for (std::size_t j = 0; j < schema.d_a(); ++j) r.a.at(t, j) = g.a[t][j];
      for (std::size_t j = 0; j < schema.d_y(); ++j) r.y.at(t, j) = g.y[t][j];
    }
    records.push_back(std::move(r));
  }
  return records;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  json manifest = {{"format_version", kFormatVersion},
                   {"schema", ds.schema.to_json()},
                   {"normalization", ds.stats ? ds.stats->to_json() : json(nullptr)},
                   {"provenance", ds.provenance},
                   {"n_records", ds.records.size()}};
  write_file_atomic(dir / kTrajectoryFile, write_trajectory_csv(ds));
  write_file_atomic(dir / kManifestFile, manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestFile;
  const auto csv_path = dir / kTrajectoryFile;
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ParseError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format_version", std::string{}) != kFormatVersion) {
    throw ParseError("unsupported dataset format version in " + manifest_path.string());
  }
  Dataset ds;
  try {
    ds.schema = Schema::from_json(manifest.at("schema"));
    if (!manifest.at("normalization").is_null()) ds.stats = NormalizationStats::from_json(manifest.at("normalization"));
  } catch (const json::exception& e) {
    throw ParseError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  ds.provenance = manifest.value("provenance", json::object());
  ds.records = parse_trajectory_csv(read_file(csv_path), ds.schema);
  try {
    ds.validate();
  } catch (const ShapeError& e) {
    throw ParseError(e.what());
  }
  return ds;
}

}  // namespace cfx
