#include "doctest.h"

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "counterfact/fileutil.hpp"

using namespace cfx;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cfx_cli_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "counterfact");
  args.push_back("--quiet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

const char* kSmallConfig = R"(
[simulate]
n_patients = 60
horizon = 14
gamma = 2.0
seed = 4

[train]
epochs = 3
batch_size = 16

[train.model]
head_hidden = 8

[train.model.encoder]
channels = 6
dilations = [1, 2]
repr_width = 6

[evaluate]
tau_max = 3

[probe]
epochs = 4
)";

fs::path small_config(const fs::path& dir) {
  const fs::path p = dir / "config.toml";
  write_file_atomic(p, kSmallConfig);
  return p;
}

std::string digest_tree(const fs::path& dir) {
  std::string all;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + read_file(f);
  return sha256_hex(all);
}

}  // namespace

TEST_CASE("config: defaults round trip through JSON and unknown entries are rejected") {
  cli::RunConfig c;
  c.simulate = tumorsim::SimCohortConfig{};
  c.predict.target_range = std::make_pair(1.0, 2.0);
  const json j = c.to_json();
  CHECK(cli::RunConfig::from_json(j).to_json() == j);

  CHECK_THROWS_AS(cli::RunConfig::from_json(json{{"bogus", json::object()}}), ConfigError);
  CHECK_THROWS_AS(cli::RunConfig::from_json(json{{"evaluate", {{"tau", 3}}}}), ConfigError);
  CHECK_THROWS_AS(cli::RunConfig::from_json(json{{"evaluate", {{"split", "holdout"}}}}), ConfigError);
  CHECK_THROWS_AS(cli::RunConfig::from_json(json{{"predict", {{"horizon", "six"}}}}), ConfigError);
  CHECK_THROWS_AS(cli::RunConfig::from_json(json{{"split", {{"ratios", {0.5, 0.5}}}}}), ConfigError);
}

TEST_CASE("config: TOML and JSON documents give the same configuration") {
  const json from_toml = cli::toml_to_json(kSmallConfig);
  CHECK(from_toml["train"]["model"]["encoder"]["dilations"] == json{1, 2});
  CHECK(from_toml["simulate"]["gamma"].get<double>() == 2.0);
  const auto a = cli::RunConfig::from_json(from_toml);
  const auto b = cli::RunConfig::from_json(json::parse(from_toml.dump()));
  CHECK(a.to_json() == b.to_json());
  CHECK_THROWS_AS(cli::toml_to_json("when = 2024-01-01\n"), ConfigError);
  CHECK_THROWS_AS(cli::toml_to_json("x = = 1\n"), ConfigError);
}

TEST_CASE("config: the shipped sample configuration parses") {
  const auto cfg = cli::RunConfig::from_json(cli::read_config_document(CFX_SAMPLE_CONFIG));
  REQUIRE(cfg.simulate.has_value());
  CHECK(cfg.simulate->gamma == 4.0);
  CHECK(cfg.train.epochs == 100);
}

TEST_CASE("config: every key is documented with a unit") {
  const auto keys = cli::config_keys();
  CHECK(keys.size() > 80);
  bool saw_gamma = false;
  for (const auto& k : keys) {
    CHECK_MESSAGE(!k.unit.empty(), k.key);
    CHECK_MESSAGE(!k.description.empty(), k.key);
    if (k.key == "simulate.gamma") saw_gamma = true;
  }
  CHECK(saw_gamma);
  CHECK(cli::config_keys_text().find("train.kernel.bandwidth") != std::string::npos);
}

TEST_CASE("cli: exit codes for usage and configuration errors") {
  const fs::path dir = scratch("codes");
  CHECK(run({}) == 2);
  CHECK(run({"train"}) == 2);  // no --out
  write_file_atomic(dir / "train_only.toml", "[train]\nepochs = 2\n");
  CHECK(run({"simulate", "--config", (dir / "train_only.toml").string(), "--out", (dir / "x").string()}) == 2);
  write_file_atomic(dir / "typo.toml", "[train]\nepoch = 2\n");
  CHECK(run({"train", "--config", (dir / "typo.toml").string(), "--out", (dir / "y").string()}) == 2);
  CHECK(run({"keys"}) == 0);
}

TEST_CASE("cli: simulate is deterministic and the gamma sweep writes one directory per value") {
  const fs::path dir = scratch("simulate");
  const auto cfg = small_config(dir).string();
  REQUIRE(run({"simulate", "--config", cfg, "--out", (dir / "a").string()}) == 0);
  REQUIRE(run({"simulate", "--config", cfg, "--out", (dir / "b").string()}) == 0);
  CHECK(digest_tree(dir / "a") == digest_tree(dir / "b"));
  REQUIRE(run({"simulate", "--config", cfg, "--out", (dir / "c").string(), "--seed", "5"}) == 0);
  CHECK(digest_tree(dir / "a") != digest_tree(dir / "c"));

  REQUIRE(run({"simulate", "--config", cfg, "--out", (dir / "sweep").string(), "--gammas", "0,1,2,3"}) == 0);
  for (const char* g : {"gamma_0", "gamma_1", "gamma_2", "gamma_3"}) {
    CHECK(fs::exists(dir / "sweep" / g / "manifest.json"));
    CHECK(fs::exists(dir / "sweep" / g / "truth.json"));
  }
  const json r = json::parse(read_file(dir / "sweep" / "gamma_3" / "resolved_config.json"));
  CHECK(r["simulate"]["gamma"].get<double>() == 3.0);
}

TEST_CASE("cli: train, evaluate, predict, attribute, probe and export end to end") {
  const fs::path dir = scratch("pipeline");
  const auto cfg = small_config(dir).string();
  const auto data = (dir / "data").string();
  REQUIRE(run({"simulate", "--config", cfg, "--out", data}) == 0);
  const std::string before = digest_tree(data);

  CHECK(run({"train", "--config", cfg, "--data", data, "--out", data}) == 2);
  REQUIRE(run({"train", "--config", cfg, "--data", data, "--out", (dir / "m").string()}) == 0);
  for (const char* f : {"model.cfxm", "train_report.json", "metrics.csv", "splits.json", "resolved_config.json"})
    CHECK(fs::exists(dir / "m" / f));

  // The validation split reproduces the metric used for model selection.
  REQUIRE(run({"evaluate", "--config", cfg, "--data", data, "--checkpoint", (dir / "m" / "model.cfxm").string(),
               "--split", "val", "--out", (dir / "ev").string()}) == 0);
  const json tr = json::parse(read_file(dir / "m" / "train_report.json"));
  const json ev = json::parse(read_file(dir / "ev" / "eval_report.json"));
  CHECK(ev["one_step_rmse"].get<double>() == doctest::Approx(tr["best_val_rmse"].get<double>()).epsilon(1e-9));
  CHECK(ev.contains("counterfactual"));
  CHECK(read_file(dir / "ev" / "horizon_rmse.csv").rfind("model,tau_1,tau_2,tau_3\n", 0) == 0);

  const auto ck = (dir / "m" / "model.cfxm").string();
  REQUIRE(run({"predict", "--config", cfg, "--data", data, "--checkpoint", ck, "--patient", "p2", "--origin", "9",
               "--out", (dir / "pr").string()}) == 0);
  const json pr = json::parse(read_file(dir / "pr" / "prediction.json"));
  CHECK(pr["origin"] == 9);
  CHECK(pr["plans"].size() == 4);
  int total = 0;
  for (const auto& p : pr["explanation"]["preference"]) total += p["percent"].get<int>();
  CHECK(total == 100);
  CHECK(run({"predict", "--config", cfg, "--data", data, "--checkpoint", ck, "--patient", "nobody", "--out",
             (dir / "pr2").string()}) == 2);

  REQUIRE(run({"attribute", "--config", cfg, "--data", data, "--checkpoint", ck, "--patient", "p2", "--plan", "Both",
               "--out", (dir / "at").string()}) == 0);
  const json at = json::parse(read_file(dir / "at" / "attribution.json"));
  CHECK(at["attribution"]["plan"] == "Both");

  REQUIRE(run({"probe", "--config", cfg, "--data", data, "--checkpoint", ck, "--balanced", ck, "--out",
               (dir / "pb").string()}) == 0);
  const json d = json::parse(read_file(dir / "pb" / "delta_r2.json"));
  for (const auto& v : d["variables"]) CHECK(v["delta_r2"].get<double>() == 0.0);

  REQUIRE(run({"export-repr", "--data", data, "--checkpoint", ck, "--out", (dir / "ex").string()}) == 0);
  CHECK(fs::exists(dir / "ex" / "representations.csv"));

  CHECK(digest_tree(data) == before);
}

TEST_CASE("cli: seed batches train one model per seed and summarize mean and spread") {
  const fs::path dir = scratch("seeds");
  const auto cfg = small_config(dir).string();
  const auto data = (dir / "data").string();
  REQUIRE(run({"simulate", "--config", cfg, "--out", data}) == 0);
  REQUIRE(run({"train", "--config", cfg, "--data", data, "--out", (dir / "m").string(), "--seeds", "1,2"}) == 0);
  CHECK(fs::exists(dir / "m" / "seed_1" / "model.cfxm"));
  CHECK(fs::exists(dir / "m" / "seed_2" / "model.cfxm"));
  REQUIRE(run({"evaluate", "--config", cfg, "--data", data, "--checkpoint", (dir / "m").string(), "--seeds", "1,2",
               "--out", (dir / "ev").string()}) == 0);
  const std::string summary = read_file(dir / "ev" / "summary.csv");
  CHECK(summary.find("none,factual,") != std::string::npos);
  CHECK(summary.find("none,counterfactual,") != std::string::npos);
  CHECK(summary.find("±") != std::string::npos);
}

TEST_CASE("cli: training divergence exits with the numeric failure code") {
  const fs::path dir = scratch("diverge");
  const auto cfg = small_config(dir).string();
  REQUIRE(run({"simulate", "--config", cfg, "--out", (dir / "data").string()}) == 0);
  write_file_atomic(dir / "wild.toml", "[train]\nepochs = 3\nlearning_rate = 1e9\n");
  CHECK(run({"train", "--config", (dir / "wild.toml").string(), "--data", (dir / "data").string(), "--out",
             (dir / "m").string()}) == 3);
}

TEST_CASE("cli: serve prints its port, answers /health and stops on SIGTERM") {
  const fs::path dir = scratch("serve");
  const auto cfg = small_config(dir).string();
  REQUIRE(run({"simulate", "--config", cfg, "--out", (dir / "data").string()}) == 0);
  REQUIRE(run({"train", "--config", cfg, "--data", (dir / "data").string(), "--out", (dir / "m").string()}) == 0);

  int out_pipe[2];
  REQUIRE(::pipe(out_pipe) == 0);
  const pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(out_pipe[0]);
    const std::string ck = (dir / "m" / "model.cfxm").string();
    ::execl(CFX_CLI_BINARY, "counterfact", "serve", "--checkpoint", ck.c_str(), "--port", "0", "--quiet",
            static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(out_pipe[1]);
  std::string line;
  char ch = 0;
  while (::read(out_pipe[0], &ch, 1) == 1 && ch != '\n') line += ch;
  REQUIRE(line.rfind("listening on http://127.0.0.1:", 0) == 0);
  const int port = std::stoi(line.substr(line.rfind(':') + 1));

  httplib::Client client("127.0.0.1", port);
  const auto res = client.Get("/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body)["status"] == "ok");

  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  ::close(out_pipe[0]);
}
