// perfit: command-line front end for the federated personalization simulator.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "perfit/config.hpp"
#include "perfit/harness.hpp"

namespace fs = std::filesystem;
using namespace perfit;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string from;
};

void add_common(CLI::App* sub, Options& o, bool needs_config = true) {
  auto* c = sub->add_option("--config", o.config, "experiment config (JSON)");
  if (needs_config) c->required();
  sub->add_option("--set", o.sets, "override KEY=VALUE (dotted key, repeatable)");
  sub->add_option("--out", o.out, "output directory");
  sub->add_option("--seed", o.seed, "master seed");
  sub->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig load(const Options& o) {
  auto cfg = load_config(o.config);
  auto doc = to_json(cfg);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) doc["seed"] = *o.seed;
  cfg = config_from_json(doc);
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

fs::path out_dir(const ExperimentConfig& cfg) {
  fs::path dir = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

int gen_data(const Options& o) {
  const auto cfg = load(o);
  const auto pool = build_pool(cfg);
  const auto dir = out_dir(cfg);
  std::ofstream out(dir / "pool.csv");
  if (!out) throw Error("cannot write " + (dir / "pool.csv").string());
  write_pool_csv(out, pool);
  return 0;
}

int do_partition(const Options& o) {
  const auto cfg = load(o);
  const auto data = prepare_data(cfg);
  write_json_file(out_dir(cfg) / "partition.json", partition_manifest(data.clients, &data.shared));
  return 0;
}

int run(const Options& o) {
  const auto cfg = load(o);
  const auto dir = out_dir(cfg);
  std::ofstream log(dir / "rounds.ndjson", std::ios::binary);
  if (!log) throw Error("cannot write " + (dir / "rounds.ndjson").string());
  const auto report = run_experiment(cfg, Executor{o.threads}, [&](const nlohmann::json& j) { log << j.dump() << '\n'; });
  emit_report(report, dir);
  return 0;
}

int sweep(const Options& o) {
  const auto cfg = load(o);
  emit_sweep(sweep_k(cfg, cfg.sweep_ks, Executor{o.threads}), out_dir(cfg));
  return 0;
}

int report(const Options& o) {
  if (o.out.empty()) throw ConfigError("report: --out is required");
  const fs::path from = o.from.empty() ? fs::path(o.out) / "report.json" : fs::path(o.from);
  std::ifstream in(from);
  if (!in) throw Error("cannot open " + from.string());
  const auto rep = report_from_json(nlohmann::json::parse(in));
  emit_report(rep, o.out);
  return 0;
}

int validate(const Options& o) {
  std::cout << to_json(load(o)).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated personalization simulator"};
  app.require_subcommand(1);
  Options o;
  auto* gen = app.add_subcommand("gen-data", "build the sample pool and write it as CSV");
  auto* part = app.add_subcommand("partition", "partition the pool and write the manifest");
  auto* run_cmd = app.add_subcommand("run", "run every strategy and write the report files");
  auto* sweep_cmd = app.add_subcommand("sweep-k", "FedAvg learning curves for each K in sweep_ks");
  auto* rep = app.add_subcommand("report", "re-emit CSV files from a report.json");
  auto* val = app.add_subcommand("validate-config", "check a config and print it in canonical form");
  for (auto* s : {gen, part, run_cmd, sweep_cmd, val}) add_common(s, o);
  add_common(rep, o, false);
  rep->add_option("--from", o.from, "report.json to read (default OUT/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*gen) return gen_data(o);
    if (*part) return do_partition(o);
    if (*run_cmd) return run(o);
    if (*sweep_cmd) return sweep(o);
    if (*rep) return report(o);
    if (*val) return validate(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
