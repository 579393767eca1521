#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "schema": "perfed/v1",
  "seed": 3,
  "data": {"synthetic": {"num_classes": 4, "samples_per_class": 60, "dim": 8, "num_subjects": 6, "subject_shift": 0.5}},
  "partition": {"num_clients": 5, "per_client_train": 40, "per_client_test": 20},
  "shared": {"size": 20},
  "models": {"m": {"input_shape": [8], "num_classes": 4,
                   "layers": [{"kind": "Dense", "in": 8, "out": 16}, {"kind": "ReLU"},
                              {"kind": "Dense", "in": 16, "out": 4}, {"kind": "Softmax"}]}},
  "model": "m",
  "round": {"K": 2, "batch_size": 8, "lr": 0.05},
  "rounds": 2,
  "repeat_count": 2,
  "strategies": [{"kind": "GlobalOnly"}, {"kind": "FineTune", "epochs": 1}, {"kind": "FedDistill"}],
  "sweep_ks": [1, 5]
})";

struct Fixture {
  fs::path dir;
  fs::path config;

  Fixture() {
    dir = fs::temp_directory_path() / ("perfit_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = dir / "tiny.json";
    std::ofstream(config) << kTiny;
  }
  ~Fixture() { fs::remove_all(dir); }
};

struct Result {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result cli(const Fixture& f, const std::string& args) {
  const auto out = f.dir / "stdout.txt", err = f.dir / "stderr.txt";
  const std::string cmd = std::string(PERFIT_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

}  // namespace

TEST(Cli, ValidateConfigPrintsCanonicalForm) {
  Fixture f;
  const auto r = cli(f, "validate-config --config " + f.config.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("schema"), "perfed/v1");
  EXPECT_EQ(j.at("round").at("batch_size"), 8);
  EXPECT_TRUE(j.at("round").contains("local_epochs"));  // defaults filled in
}

TEST(Cli, SetOverridesAndSeed) {
  Fixture f;
  const auto r = cli(f, "validate-config --config " + f.config.string() + " --set round.K=5 --set rounds=4 --seed 99");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("round").at("K"), 5);
  EXPECT_EQ(j.at("rounds"), 4);
  EXPECT_EQ(j.at("seed"), 99);
}

TEST(Cli, ConfigErrorsExitOne) {
  Fixture f;
  EXPECT_EQ(cli(f, "bogus").code, 1);
  EXPECT_EQ(cli(f, "").code, 1);
  auto r = cli(f, "validate-config --config " + f.config.string() + " --set round.K=abc");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("round.K"), std::string::npos);
  EXPECT_EQ(cli(f, "validate-config --config " + f.config.string() + " --set round.nokey=1").code, 1);
  EXPECT_EQ(cli(f, "validate-config --config " + (f.dir / "missing.json").string()).code, 1);
  std::ofstream(f.dir / "bad.json") << "{\"schema\": \"perfed/v1\", \"seed\": 1, \"typo\": 2}";
  EXPECT_EQ(cli(f, "validate-config --config " + (f.dir / "bad.json").string()).code, 1);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  Fixture f;
  // four labels so the csv source agrees with the 4-class model
  const auto r = cli(f, "run --config " + f.config.string() +
                            " --set data.source=csv --set 'data.csv.activity_labels=[\"A\",\"B\",\"C\",\"D\"]'"
                            " --set data.csv_path=" + (f.dir / "nope.csv").string() + " --out " + (f.dir / "o").string());
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NE(r.err.find("nope.csv"), std::string::npos);
}

TEST(Cli, RunTwiceIsByteIdentical) {
  Fixture f;
  const auto a = f.dir / "a", b = f.dir / "b";
  ASSERT_EQ(cli(f, "run --config " + f.config.string() + " --set round.K=2 --out " + a.string()).code, 0);
  ASSERT_EQ(cli(f, "run --config " + f.config.string() + " --set round.K=2 --threads 2 --out " + b.string()).code, 0);
  for (const char* name : {"report.json", "accuracy.csv", "comm.csv", "curves.csv", "boxplot.csv", "rounds.ndjson"}) {
    ASSERT_TRUE(fs::exists(a / name)) << name;
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  }
}

TEST(Cli, ReportReemitsFromJson) {
  Fixture f;
  const auto a = f.dir / "a", c = f.dir / "c";
  ASSERT_EQ(cli(f, "run --config " + f.config.string() + " --out " + a.string()).code, 0);
  const auto r = cli(f, "report --from " + (a / "report.json").string() + " --out " + c.string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"report.json", "accuracy.csv", "comm.csv", "curves.csv", "boxplot.csv"})
    EXPECT_EQ(slurp(a / name), slurp(c / name)) << name;
}

TEST(Cli, DataPartitionAndSweep) {
  Fixture f;
  const auto o = f.dir / "o";
  ASSERT_EQ(cli(f, "gen-data --config " + f.config.string() + " --out " + o.string()).code, 0);
  ASSERT_EQ(cli(f, "partition --config " + f.config.string() + " --out " + o.string()).code, 0);
  ASSERT_EQ(cli(f, "sweep-k --config " + f.config.string() + " --out " + o.string()).code, 0);
  const auto pool = slurp(o / "pool.csv");
  EXPECT_EQ(pool.substr(0, 16), "label,subject,f0");
  const auto manifest = nlohmann::json::parse(slurp(o / "partition.json"));
  EXPECT_EQ(manifest.at("clients").size(), 5u);
  EXPECT_EQ(manifest.at("shared").size(), 20u);
  const auto sweep = nlohmann::json::parse(slurp(o / "sweep.json"));
  ASSERT_EQ(sweep.at("points").size(), 2u);
  EXPECT_EQ(sweep.at("points")[1].at("curve").size(), 2u);
}
