#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "perfit/config.hpp"
#include "perfit/harness.hpp"

using namespace perfit;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "schema": "perfed/v1",
  "seed": 7,
  "data": {"synthetic": {"num_classes": 4, "samples_per_class": 60, "dim": 8, "sigma": 1.0,
                         "num_subjects": 6, "subject_shift": 0.5, "swap_prob": 0.3}},
  "partition": {"num_clients": 5, "per_client_train": 40, "per_client_test": 20},
  "shared": {"size": 20},
  "models": {
    "m": {"input_shape": [8], "num_classes": 4,
          "layers": [{"kind": "Dense", "in": 8, "out": 16}, {"kind": "ReLU"},
                     {"kind": "Dense", "in": 16, "out": 4}, {"kind": "Softmax"}]},
    "n": {"input_shape": [8], "num_classes": 4,
          "layers": [{"kind": "Dense", "in": 8, "out": 4}, {"kind": "Softmax"}]}
  },
  "model": "m",
  "fd_models": [{"model": "m", "count": 3}, {"model": "n", "count": 2}],
  "round": {"K": 2, "batch_size": 8, "lr": 0.05},
  "rounds": 3,
  "repeat_count": 2,
  "strategies": [
    {"kind": "GlobalOnly"},
    {"kind": "FineTune", "epochs": 2},
    {"kind": "FedPer", "base_layer_count": 1},
    {"kind": "MamlFineTune", "inner_steps": 2},
    {"kind": "FedDistill"},
    {"kind": "Centralized", "epochs": 2}
  ],
  "sweep_ks": [1, 5]
})";

ExperimentConfig tiny() { return config_from_json(nlohmann::json::parse(kTiny)); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("perfit_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Summary, SingleValue) {
  const auto s = summarize({0.5});
  EXPECT_EQ(s, (SixNumberSummary{0.5, 0.5, 0.5, 0.5, 0.5, 0.5}));
}

TEST(Summary, FivePoints) {
  const auto s = summarize({1, 0.25, 0, 0.75, 0.5});
  EXPECT_EQ(s, (SixNumberSummary{0, 0.25, 0.5, 0.75, 1, 0.5}));
}

TEST(Summary, EmptyThrows) { EXPECT_THROW(summarize({}), Error); }

TEST(Summary, SortAndIndexOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform();
    const auto s = summarize(v);
    // oracle: insertion sort, then h = (n-1)p, x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h])
    auto w = v;
    for (std::size_t i = 1; i < w.size(); ++i)
      for (std::size_t j = i; j > 0 && w[j - 1] > w[j]; --j) std::swap(w[j - 1], w[j]);
    auto q = [&](double p) {
      const double h = (static_cast<double>(n) - 1) * p;
      const auto k = static_cast<std::size_t>(h);
      return k + 1 < n ? w[k] + (h - static_cast<double>(k)) * (w[k + 1] - w[k]) : w[k];
    };
    double mean = 0;
    for (double x : w) mean += x;
    mean /= static_cast<double>(n);
    EXPECT_NEAR(s.min, w.front(), 1e-12);
    EXPECT_NEAR(s.max, w.back(), 1e-12);
    EXPECT_NEAR(s.lower_quartile, q(0.25), 1e-12);
    EXPECT_NEAR(s.median, q(0.5), 1e-12);
    EXPECT_NEAR(s.upper_quartile, q(0.75), 1e-12);
    EXPECT_NEAR(s.mean, mean, 1e-12);
    EXPECT_LE(s.min, s.lower_quartile);
    EXPECT_LE(s.lower_quartile, s.median);
    EXPECT_LE(s.median, s.upper_quartile);
    EXPECT_LE(s.upper_quartile, s.max);
  }
}

TEST(Summary, DeltaVariance) {
  EXPECT_NEAR(delta_variance({0.1, 0.2, 0.3}), 0.0, 1e-30);
  EXPECT_NEAR(delta_variance({0, 1, 0}), 1.0, 1e-15);
}

TEST(Config, CanonicalRoundTrip) {
  const auto cfg = tiny();
  const auto j = to_json(cfg);
  EXPECT_EQ(to_json(config_from_json(j)), j);
}

TEST(Config, UnknownKeyRejected) {
  auto j = nlohmann::json::parse(kTiny);
  j["round"]["kk"] = 3;
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("round.kk"), std::string::npos) << e.what();
  }
}

TEST(Config, WrongSchemaOrTypeRejected) {
  auto j = nlohmann::json::parse(kTiny);
  j["schema"] = "perfed/v0";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = nlohmann::json::parse(kTiny);
  j["rounds"] = "three";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = nlohmann::json::parse(kTiny);
  j["repeat_count"] = 0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = nlohmann::json::parse(kTiny);
  j["models"]["m"]["layers"][2]["in"] = 17;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = nlohmann::json::parse(kTiny);
  j["fd_models"][1]["count"] = 1;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Override, SetsOneField) {
  const auto cfg = tiny();
  const auto k = override(cfg, "round.K", "5");
  EXPECT_EQ(k.round.K, 5u);
  auto expect = to_json(cfg);
  expect["round"]["K"] = 5;
  EXPECT_EQ(to_json(k), expect);
}

TEST(Override, MatchesDirectEdit) {
  const auto cfg = tiny();
  auto edited = nlohmann::json::parse(kTiny);
  edited["strategies"][1]["epochs"] = 7;
  edited["round"]["lr"] = 0.125;
  const auto via = override(override(cfg, "strategies.1.epochs", "7"), "round.lr", "0.125");
  EXPECT_EQ(to_json(config_from_json(to_json(via))), to_json(config_from_json(edited)));
}

TEST(Override, Errors) {
  const auto cfg = tiny();
  try {
    override(cfg, "round.K", "abc");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("round.K"), std::string::npos);
    EXPECT_NE(msg.find("unsigned integer"), std::string::npos);
  }
  EXPECT_THROW(override(cfg, "round.nope", "1"), ConfigError);
  EXPECT_THROW(override(cfg, "round.K", "-1"), ConfigError);
  EXPECT_THROW(override(cfg, "round.K", "99"), ConfigError);  // valid type, invalid value
  EXPECT_THROW(override(cfg, "strategies.9.epochs", "1"), ConfigError);
  EXPECT_THROW(override(cfg, "shared.balanced", "yes"), ConfigError);
}

TEST(Experiment, ShapesAndCompleteness) {
  const auto cfg = tiny();
  const auto report = run_experiment(cfg);
  ASSERT_EQ(report.strategies.size(), 6u);
  for (const auto& s : report.strategies) {
    ASSERT_EQ(s.accuracy.size(), 2u) << s.name;
    for (const auto& row : s.accuracy) EXPECT_EQ(row.size(), 5u);
    ASSERT_EQ(s.curves.size(), 2u);
    for (const auto& c : s.curves) EXPECT_EQ(c.size(), 3u) << s.name;
    EXPECT_EQ(s.comm.size(), 2u);
    EXPECT_EQ(s.client_mean.size(), 5u);
    EXPECT_LE(s.summary.min, s.summary.mean);
    EXPECT_LE(s.summary.mean, s.summary.max);
  }
  // weight-exchange strategies share the FedAvg run's accounting
  EXPECT_EQ(report.strategy("GlobalOnly").comm, report.strategy("FineTune").comm);
  EXPECT_EQ(report.strategy("GlobalOnly").comm[0].uplink_per_round[0], 2u * 212u);
  EXPECT_EQ(report.strategy("FedPer").comm[0].uplink_per_round[0], 2u * 144u);
  EXPECT_EQ(report.strategy("FedDistill").comm[0].uplink_per_round[0], 2u * 80u);
  EXPECT_EQ(report.strategy("Centralized").comm[0].uplink_total, 0u);
  EXPECT_EQ(report.model_params.at("m"), 212u);
  // repeats differ (fresh init and sampling streams)
  EXPECT_NE(report.strategy("FineTune").accuracy[0], report.strategy("FineTune").accuracy[1]);
}

TEST(Experiment, DeterministicAcrossThreads) {
  const auto cfg = tiny();
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg, Executor{3});
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Experiment, LogHasBothStages) {
  const auto cfg = tiny();
  std::size_t fed = 0, pers = 0;
  run_experiment(cfg, {}, [&](const nlohmann::json& j) {
    const auto stage = j.at("stage").get<std::string>();
    fed += stage == "federation";
    pers += stage == "personalization";
    EXPECT_EQ(j.at("schema"), "v1");
  });
  // FedAvg + FedPer + FedDistill, 3 rounds, 2 repeats; 6 strategies x 5 clients x 2 repeats
  EXPECT_EQ(fed, 3u * 3u * 2u);
  EXPECT_EQ(pers, 6u * 5u * 2u);
}

TEST(Experiment, DataStreamIndependentOfRepeatStreams) {
  auto cfg = tiny();
  const auto a = prepare_data(cfg);
  cfg.round.lr = 0.9;
  cfg.repeat_count = 4;
  const auto b = prepare_data(cfg);
  for (std::size_t i = 0; i < a.clients.size(); ++i) EXPECT_EQ(a.clients[i].train_index, b.clients[i].train_index);
  EXPECT_EQ(a.shared.source_index, b.shared.source_index);
}

TEST(Report, FilesAndRoundTrip) {
  const auto cfg = tiny();
  const auto report = run_experiment(cfg);
  const auto dir = temp_dir("report");
  emit_report(report, dir);
  EXPECT_EQ(lines(dir / "accuracy.csv"), 1 + 5u * 6u * 2u);
  EXPECT_EQ(lines(dir / "boxplot.csv"), 1 + 6u);
  EXPECT_EQ(lines(dir / "comm.csv"), 1 + 6u * 2u);
  EXPECT_EQ(lines(dir / "curves.csv"), 1 + 6u * 2u);
  const auto text = slurp(dir / "report.json");
  const auto back = report_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(back, report);
  EXPECT_EQ(to_json(back).dump(2) + "\n", text);
  // the embedded config reparses under the config schema
  auto cj = back.config;
  cj["output_dir"] = "x";
  EXPECT_NO_THROW(config_from_json(cj));
  // 9 significant digits
  std::ifstream box(dir / "boxplot.csv");
  std::string header, row;
  std::getline(box, header);
  std::getline(box, row);
  EXPECT_EQ(header, "strategy,min,lower_quartile,median,upper_quartile,max,mean");
  fs::remove_all(dir);
}

TEST(Report, UnwritableDirectoryNamesPath) {
  ExperimentReport r;
  try {
    emit_report(r, "/proc/perfit-no-such-dir");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/proc/perfit-no-such-dir"), std::string::npos) << e.what();
  }
}

TEST(Sweep, CurvesAndTime) {
  const auto cfg = tiny();
  const auto s = sweep_k(cfg, {1, 5});
  ASSERT_EQ(s.points.size(), 2u);
  for (const auto& p : s.points) EXPECT_EQ(p.curve.size(), 3u);
  EXPECT_EQ(s.points[1].uplink_total, 5 * s.points[0].uplink_total);
  EXPECT_GE(s.points[1].simulated_time_s, s.points[0].simulated_time_s);
  EXPECT_THROW(sweep_k(cfg, {6}), ConfigError);
  EXPECT_THROW(sweep_k(cfg, {0}), ConfigError);
}

TEST(Sweep, ServerTermMakesLargerKSlower) {
  auto cfg = tiny();
  cfg.round.server_seconds_per_scalar = 1e-3;
  const auto s = sweep_k(cfg, {1, 5});
  EXPECT_GT(s.points[1].simulated_time_s, s.points[0].simulated_time_s);
}
