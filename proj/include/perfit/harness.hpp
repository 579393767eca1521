#pragma once

// Config-driven experiment runner: data, federation, personalization,
// summaries, K-sweeps and report files.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "perfit/config.hpp"
#include "perfit/data.hpp"
#include "perfit/nn.hpp"
#include "perfit/parallel.hpp"
#include "perfit/personalization.hpp"
#include "perfit/protocol.hpp"

namespace perfit {

// ---------------------------------------------------------------------------
// Summaries

struct SixNumberSummary {
  double min = 0, lower_quartile = 0, median = 0, upper_quartile = 0, max = 0, mean = 0;

  double iqr() const { return upper_quartile - lower_quartile; }
  friend bool operator==(const SixNumberSummary&, const SixNumberSummary&) = default;
};

/// Inclusive quantile of sorted data: position q·(n−1), linear between the
/// neighbouring order statistics.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline SixNumberSummary summarize(std::vector<double> values) {
  if (values.empty()) throw Error("summarize: empty list");
  for (double v : values)
    if (!std::isfinite(v)) throw Error("summarize: non-finite value");
  std::sort(values.begin(), values.end());
  SixNumberSummary s;
  s.min = values.front();
  s.max = values.back();
  s.lower_quartile = quantile_sorted(values, 0.25);
  s.median = quantile_sorted(values, 0.5);
  s.upper_quartile = quantile_sorted(values, 0.75);
  // rounding can nudge the mean of equal values past them
  s.mean = std::clamp(std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size()), s.min,
                      s.max);
  return s;
}

/// Population variance of successive differences of a curve.
inline double delta_variance(const std::vector<double>& curve) {
  if (curve.size() < 2) return 0.0;
  std::vector<double> d(curve.size() - 1);
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) d[i] = curve[i + 1] - curve[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  double var = 0.0;
  for (double x : d) var += (x - mean) * (x - mean);
  return var / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Report types

struct StrategyReport {
  std::string name;
  std::string kind;
  std::vector<std::size_t> client_ids;
  std::vector<std::vector<double>> accuracy;  // [repeat][client]
  std::vector<double> client_mean;            // per client, averaged over repeats
  SixNumberSummary summary;                   // over client_mean
  std::vector<CommReport> comm;               // per repeat
  std::vector<std::vector<double>> curves;    // [repeat][round]
  std::vector<double> simulated_time_s;       // per repeat

  double mean_accuracy() const { return summary.mean; }
  friend bool operator==(const StrategyReport&, const StrategyReport&) = default;
};

struct ExperimentReport {
  nlohmann::json config;  // canonical, without output_dir
  std::size_t num_clients = 0;
  std::size_t rounds = 0;
  std::size_t repeat_count = 0;
  std::map<std::string, std::size_t> model_params;
  std::vector<StrategyReport> strategies;

  const StrategyReport& strategy(const std::string& name) const {
    for (const auto& s : strategies)
      if (s.name == name) return s;
    throw Error("report has no strategy '" + name + "'");
  }
  friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

inline constexpr const char* kReportSchema = "perfed/report/v1";

inline nlohmann::json to_json(const SixNumberSummary& s) {
  return {{"min", s.min},       {"lower_quartile", s.lower_quartile}, {"median", s.median},
          {"upper_quartile", s.upper_quartile}, {"max", s.max},       {"mean", s.mean}};
}

inline SixNumberSummary summary_from_json(const nlohmann::json& j) {
  return {j.at("min").get<double>(),  j.at("lower_quartile").get<double>(), j.at("median").get<double>(),
          j.at("upper_quartile").get<double>(), j.at("max").get<double>(), j.at("mean").get<double>()};
}

inline nlohmann::json to_json(const CommReport& c) {
  return {{"uplink_per_round", c.uplink_per_round},
          {"downlink_per_round", c.downlink_per_round},
          {"uplink_total", c.uplink_total},
          {"downlink_total", c.downlink_total}};
}

inline CommReport comm_from_json(const nlohmann::json& j) {
  CommReport c;
  j.at("uplink_per_round").get_to(c.uplink_per_round);
  j.at("downlink_per_round").get_to(c.downlink_per_round);
  j.at("uplink_total").get_to(c.uplink_total);
  j.at("downlink_total").get_to(c.downlink_total);
  return c;
}

inline nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json strategies = nlohmann::json::array();
  for (const auto& s : r.strategies) {
    nlohmann::json comm = nlohmann::json::array();
    for (const auto& c : s.comm) comm.push_back(to_json(c));
    strategies.push_back({{"name", s.name},
                          {"kind", s.kind},
                          {"client_ids", s.client_ids},
                          {"accuracy", s.accuracy},
                          {"client_mean", s.client_mean},
                          {"summary", to_json(s.summary)},
                          {"comm", comm},
                          {"curves", s.curves},
                          {"simulated_time_s", s.simulated_time_s}});
  }
  return {{"schema", kReportSchema},   {"config", r.config},   {"num_clients", r.num_clients},
          {"rounds", r.rounds},        {"repeat_count", r.repeat_count}, {"model_params", r.model_params},
          {"strategies", strategies}};
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
  if (j.at("schema") != kReportSchema) throw Error("report: unsupported schema");
  ExperimentReport r;
  r.config = j.at("config");
  j.at("num_clients").get_to(r.num_clients);
  j.at("rounds").get_to(r.rounds);
  j.at("repeat_count").get_to(r.repeat_count);
  j.at("model_params").get_to(r.model_params);
  for (const auto& s : j.at("strategies")) {
    StrategyReport out;
    s.at("name").get_to(out.name);
    s.at("kind").get_to(out.kind);
    s.at("client_ids").get_to(out.client_ids);
    s.at("accuracy").get_to(out.accuracy);
    s.at("client_mean").get_to(out.client_mean);
    out.summary = summary_from_json(s.at("summary"));
    for (const auto& c : s.at("comm")) out.comm.push_back(comm_from_json(c));
    s.at("curves").get_to(out.curves);
    s.at("simulated_time_s").get_to(out.simulated_time_s);
    r.strategies.push_back(std::move(out));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Experiment setup

// Everything derived from the master seed that stays fixed across repeats.
struct ExperimentData {
  LabeledSet pool;
  std::vector<ClientDataset> clients;
  LabeledSet shared;
  std::vector<double> speed_factors;
  std::vector<Sample> union_test;
};

inline LabeledSet build_pool(const ExperimentConfig& cfg) {
  if (cfg.data.source == "csv") {
    const auto recs = load_csv(cfg.data.csv_path, cfg.data.csv_schema);
    return recordings_to_pool(recs, cfg.num_classes(), cfg.data.window_seconds, cfg.data.stride_seconds);
  }
  SynthConfig sc = cfg.data.synthetic;
  sc.seed = derive_seed(cfg.seed, "data");
  return synth_har(sc);
}

inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.pool = build_pool(cfg);
  PartitionPlan plan = cfg.partition;
  plan.seed = derive_seed(cfg.seed, "partition");
  d.clients = partition(d.pool, plan);
  const auto rest = remainder(d.pool, d.clients);
  d.shared = build_shared_set(rest, cfg.shared_size, cfg.shared_balanced, derive_seed(cfg.seed, "shared"));
  if (cfg.sharing_fraction > 0)
    d.clients = apply_data_sharing(std::move(d.clients), cfg.sharing_fraction, d.shared,
                                   derive_seed(cfg.seed, "data-sharing"));
  Rng speed(derive_seed(cfg.seed, "speed"));
  for (std::size_t i = 0; i < d.clients.size(); ++i)
    d.speed_factors.push_back(speed.uniform(cfg.clients.speed_factor_min, cfg.clients.speed_factor_max));
  for (const auto& c : d.clients) d.union_test.insert(d.union_test.end(), c.test.begin(), c.test.end());
  return d;
}

inline std::vector<ClientState> make_clients(const ExperimentConfig& cfg, const ExperimentData& d) {
  std::vector<ClientState> out;
  for (std::size_t i = 0; i < d.clients.size(); ++i) {
    ClientState c{d.clients[i].client_id, d.clients[i], Model{}, d.speed_factors[i], cfg.clients.dropout_prob};
    c.validate();
    out.push_back(std::move(c));
  }
  return out;
}

// Per-repeat seeds.
struct RepeatSeeds {
  std::uint64_t init, round, dropout, personalize;

  static RepeatSeeds of(std::uint64_t master, std::size_t repeat) {
    const auto base = derive_seed(master, "repeat", repeat);
    return {derive_seed(base, "init"), derive_seed(base, "round"), derive_seed(base, "dropout"),
            derive_seed(base, "personalize")};
  }
};

inline double mean_client_accuracy(std::span<const ClientState> clients) {
  double sum = 0.0;
  for (const auto& c : clients) sum += evaluate(c.model, c.data.test);
  return sum / static_cast<double>(clients.size());
}

inline double simulated_total(const std::vector<RoundRecord>& records) {
  double t = 0.0;
  for (const auto& r : records) t += r.simulated_time_s;
  return t;
}

// Line sink for the per-round NDJSON log.
using LogSink = std::function<void(const nlohmann::json&)>;

namespace detail {

inline void log_records(const LogSink& log, const std::vector<RoundRecord>& records, const std::string& strategy,
                        std::size_t repeat) {
  if (!log) return;
  for (const auto& r : records) {
    auto j = to_json(r);
    j["stage"] = "federation";
    j["strategy"] = strategy;
    j["repeat"] = repeat;
    log(j);
  }
}

inline void log_outcomes(const LogSink& log, const std::vector<double>& acc, const std::vector<std::size_t>& ids,
                         const std::string& strategy, std::size_t repeat) {
  if (!log) return;
  for (std::size_t i = 0; i < acc.size(); ++i)
    log({{"schema", kRoundLogSchema},
         {"stage", "personalization"},
         {"strategy", strategy},
         {"repeat", repeat},
         {"client_id", ids[i]},
         {"test_accuracy", acc[i]}});
}

template <typename Fn>
decltype(auto) with_context(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(what + ": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run_experiment

struct RepeatResult {
  std::vector<std::vector<double>> accuracy;  // [strategy][client]
  std::vector<CommReport> comm;
  std::vector<std::vector<double>> curves;
  std::vector<double> time;
};

inline RepeatResult run_repeat(const ExperimentConfig& cfg, const ExperimentData& data, std::size_t repeat,
                               const Executor& exec, const LogSink& log) {
  const auto seeds = RepeatSeeds::of(cfg.seed, repeat);
  RoundConfig rc = cfg.round;
  rc.seed = seeds.round;
  const ModelSpec& spec = cfg.model_spec(cfg.model);
  const std::size_t n = data.clients.size();
  const std::size_t S = cfg.strategies.size();
  RepeatResult out{std::vector<std::vector<double>>(S), std::vector<CommReport>(S), std::vector<std::vector<double>>(S),
                   std::vector<double>(S, 0.0)};

  // One FedAvg run serves every strategy that personalizes its global model.
  std::optional<FederationResult> fedavg;
  std::vector<double> fedavg_curve;
  const bool need_fedavg =
      std::any_of(cfg.strategies.begin(), cfg.strategies.end(), [](const Strategy& s) { return s.uses_fedavg_global(); });
  if (need_fedavg) {
    auto clients = make_clients(cfg, data);
    const Model init = build_model(spec, seeds.init);
    for (auto& c : clients) c.model = init;
    fedavg = detail::with_context("repeat " + std::to_string(repeat) + ", FedAvg", [&] {
      return train_federated(clients, init, cfg.rounds, rc, seeds.dropout, std::nullopt, exec,
                             [&](std::size_t, const ParamVector& global, RoundRecord& rec) {
                               const double acc = evaluate(Model(spec, global), data.union_test);
                               rec.metrics["union_test_accuracy"] = acc;
                               fedavg_curve.push_back(acc);
                             });
    });
    detail::log_records(log, fedavg->records, "FedAvg", repeat);
  }

  for (std::size_t si = 0; si < S; ++si) {
    const Strategy& strategy = cfg.strategies[si];
    const std::string label = strategy.label();
    const std::string ctx = "repeat " + std::to_string(repeat) + ", strategy " + label;
    auto clients = make_clients(cfg, data);
    std::vector<double> acc(n);
    const auto pseed = derive_seed(seeds.personalize, label);

    detail::with_context(ctx, [&] {
      if (strategy.uses_fedavg_global()) {
        out.comm[si] = comm_totals(fedavg->records);
        out.curves[si] = fedavg_curve;
        out.time[si] = simulated_total(fedavg->records);
      }
      std::visit(
          [&](const auto& k) {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, GlobalOnly>) {
              exec.for_each(n, [&](std::size_t i) { acc[i] = personalize_global_only(fedavg->global, clients[i]).test_accuracy; });
            } else if constexpr (std::is_same_v<K, FineTune>) {
              const auto mask = k.trainable_layers ? mask_from_layers(spec, *k.trainable_layers) : default_finetune_mask(spec);
              exec.for_each(n, [&](std::size_t i) {
                acc[i] = personalize_finetune(fedavg->global, clients[i], mask, k.epochs, rc.lr, rc.batch_size, pseed)
                             .test_accuracy;
              });
            } else if constexpr (std::is_same_v<K, MamlFineTune>) {
              exec.for_each(n, [&](std::size_t i) {
                acc[i] = personalize_maml(fedavg->global, clients[i], k.inner_lr, k.inner_steps, k.support_fraction, pseed)
                             .test_accuracy;
              });
            } else if constexpr (std::is_same_v<K, FedPer>) {
              std::vector<double>& curve = out.curves[si];
              const auto base = LayerMask::parametric_range(spec, 0, k.base_layer_count);
              auto run = train_fedper(clients, spec, k.base_layer_count, cfg.rounds, rc, seeds.init, seeds.dropout,
                                      k.epochs, exec, [&](std::size_t, const ParamVector& global, RoundRecord& rec) {
                                        const Model g(spec, global);
                                        const auto shared = g.extract(base);
                                        double sum = 0.0;
                                        for (const auto& c : clients) {
                                          Model m = c.model;
                                          m.assign(base, shared.data);
                                          sum += evaluate(m, c.data.test);
                                        }
                                        const double a = sum / static_cast<double>(n);
                                        rec.metrics["mean_client_accuracy"] = a;
                                        curve.push_back(a);
                                      });
              for (std::size_t i = 0; i < n; ++i) acc[i] = run.outcomes[i].test_accuracy;
              out.comm[si] = comm_totals(run.records);
              out.time[si] = simulated_total(run.records);
              detail::log_records(log, run.records, label, repeat);
            } else if constexpr (std::is_same_v<K, FedDistill>) {
              const auto names = cfg.fd_model_names();
              for (std::size_t i = 0; i < n; ++i)
                clients[i].model = build_model(cfg.model_spec(names[i]), derive_seed(seeds.init, "fd-client", clients[i].client_id));
              FdConfig fc{rc, k.digest_epochs, k.revisit_epochs, k.exclude_self};
              std::vector<double>& curve = out.curves[si];
              auto run = train_feddistill(clients, data.shared, cfg.rounds, fc, seeds.dropout, k.final_sync, exec,
                                          [&](std::size_t, RoundRecord& rec) {
                                            const double a = mean_client_accuracy(clients);
                                            rec.metrics["mean_client_accuracy"] = a;
                                            curve.push_back(a);
                                          });
              for (std::size_t i = 0; i < n; ++i) acc[i] = run.outcomes[i].test_accuracy;
              out.comm[si] = comm_totals(run.records);
              out.time[si] = simulated_total(run.records);
              detail::log_records(log, run.records, label, repeat);
            } else if constexpr (std::is_same_v<K, Centralized>) {
              // curve point r: union accuracy after ceil((r+1)·epochs/rounds) epochs
              std::vector<double> per_epoch;
              const Model m = train_centralized(clients, spec, k.epochs, rc, seeds.init,
                                                [&](std::size_t, const Model& mm) { per_epoch.push_back(evaluate(mm, data.union_test)); });
              for (std::size_t r = 0; r < cfg.rounds; ++r) {
                if (per_epoch.empty()) {
                  out.curves[si].push_back(evaluate(m, data.union_test));
                  continue;
                }
                const auto e = ((r + 1) * k.epochs + cfg.rounds - 1) / cfg.rounds;
                out.curves[si].push_back(per_epoch[std::max<std::size_t>(e, 1) - 1]);
              }
              out.comm[si].uplink_per_round.assign(cfg.rounds, 0);
              out.comm[si].downlink_per_round.assign(cfg.rounds, 0);
              exec.for_each(n, [&](std::size_t i) { acc[i] = evaluate(m, clients[i].data.test); });
            }
          },
          strategy.kind);
      return 0;
    });
    std::vector<std::size_t> ids;
    for (const auto& c : clients) ids.push_back(c.client_id);
    detail::log_outcomes(log, acc, ids, label, repeat);
    out.accuracy[si] = std::move(acc);
  }
  return out;
}

inline nlohmann::json report_config(const ExperimentConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("output_dir");
  return j;
}

/// Runs every strategy `repeat_count` times. Data and partition are fixed by
/// the master seed; init, sampling, dropout and shuffling streams vary per
/// repeat. Deterministic for any executor width.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const Executor& exec = {}, const LogSink& log = {}) {
  cfg.validate();
  const auto data = detail::with_context("data preparation", [&] { return prepare_data(cfg); });
  ExperimentReport report;
  report.config = report_config(cfg);
  report.num_clients = data.clients.size();
  report.rounds = cfg.rounds;
  report.repeat_count = cfg.repeat_count;
  for (const auto& [name, spec] : cfg.models) report.model_params[name] = param_count(spec);
  for (const auto& s : cfg.strategies) {
    StrategyReport sr;
    sr.name = s.label();
    sr.kind = kind_name(s.kind);
    for (const auto& c : data.clients) sr.client_ids.push_back(c.client_id);
    report.strategies.push_back(std::move(sr));
  }
  for (std::size_t r = 0; r < cfg.repeat_count; ++r) {
    auto rep = run_repeat(cfg, data, r, exec, log);
    for (std::size_t si = 0; si < report.strategies.size(); ++si) {
      auto& sr = report.strategies[si];
      sr.accuracy.push_back(std::move(rep.accuracy[si]));
      sr.comm.push_back(std::move(rep.comm[si]));
      sr.curves.push_back(std::move(rep.curves[si]));
      sr.simulated_time_s.push_back(rep.time[si]);
    }
  }
  for (auto& sr : report.strategies) {
    sr.client_mean.assign(report.num_clients, 0.0);
    for (const auto& row : sr.accuracy)
      for (std::size_t i = 0; i < row.size(); ++i) sr.client_mean[i] += row[i];
    for (auto& v : sr.client_mean) v /= static_cast<double>(cfg.repeat_count);
    sr.summary = summarize(sr.client_mean);
  }
  return report;
}

// ---------------------------------------------------------------------------
// K-sweep

struct SweepPoint {
  std::size_t K = 0;
  std::vector<double> curve;  // union test accuracy per round
  double simulated_time_s = 0.0;
  std::uint64_t uplink_total = 0;
  double delta_variance = 0.0;
};

struct SweepReport {
  std::vector<SweepPoint> points;
};

/// FedAvg with the configured model for each K, on repeat 0's seeds.
inline SweepReport sweep_k(const ExperimentConfig& cfg, const std::vector<std::size_t>& ks, const Executor& exec = {}) {
  for (auto k : ks)
    if (k < 1 || k > cfg.partition.num_clients)
      throw ConfigError("sweep_k: K = " + std::to_string(k) + " outside [1, " + std::to_string(cfg.partition.num_clients) + "]");
  const auto data = prepare_data(cfg);
  const auto seeds = RepeatSeeds::of(cfg.seed, 0);
  const ModelSpec& spec = cfg.model_spec(cfg.model);
  SweepReport out;
  for (auto k : ks) {
    RoundConfig rc = cfg.round;
    rc.K = k;
    rc.seed = seeds.round;
    auto clients = make_clients(cfg, data);
    const Model init = build_model(spec, seeds.init);
    for (auto& c : clients) c.model = init;
    SweepPoint p;
    p.K = k;
    auto fed = train_federated(clients, init, cfg.rounds, rc, seeds.dropout, std::nullopt, exec,
                               [&](std::size_t, const ParamVector& global, RoundRecord& rec) {
                                 const double a = evaluate(Model(spec, global), data.union_test);
                                 rec.metrics["union_test_accuracy"] = a;
                                 p.curve.push_back(a);
                               });
    p.simulated_time_s = simulated_total(fed.records);
    p.uplink_total = comm_totals(fed.records).uplink_total;
    p.delta_variance = delta_variance(p.curve);
    out.points.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::json to_json(const SweepReport& s) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : s.points)
    pts.push_back({{"K", p.K},
                   {"curve", p.curve},
                   {"simulated_time_s", p.simulated_time_s},
                   {"uplink_total", p.uplink_total},
                   {"delta_variance", p.delta_variance}});
  return {{"schema", "perfed/sweep/v1"}, {"points", pts}};
}

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline std::string real9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

inline void close_out(std::ofstream& out, const std::filesystem::path& p) {
  out.close();
  if (!out) throw Error("write failed: " + p.string());
}

}  // namespace detail

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  auto out = detail::open_out(p);
  out << j.dump(2) << '\n';
  detail::close_out(out, p);
}

/// Writes report.json, accuracy.csv, comm.csv, curves.csv and boxplot.csv.
inline void emit_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  using detail::real9;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());

  write_json_file(dir / "report.json", to_json(report));

  {
    const auto p = dir / "accuracy.csv";
    auto out = detail::open_out(p);
    out << "client_id,strategy,repeat,accuracy\n";
    for (const auto& s : report.strategies)
      for (std::size_t r = 0; r < s.accuracy.size(); ++r)
        for (std::size_t i = 0; i < s.accuracy[r].size(); ++i)
          out << s.client_ids[i] << ',' << s.name << ',' << r << ',' << real9(s.accuracy[r][i]) << '\n';
    detail::close_out(out, p);
  }
  {
    const auto p = dir / "comm.csv";
    auto out = detail::open_out(p);
    out << "strategy,repeat,rounds,uplink_total,downlink_total,simulated_time_s\n";
    for (const auto& s : report.strategies)
      for (std::size_t r = 0; r < s.comm.size(); ++r)
        out << s.name << ',' << r << ',' << s.comm[r].uplink_per_round.size() << ',' << s.comm[r].uplink_total << ','
            << s.comm[r].downlink_total << ',' << real9(s.simulated_time_s[r]) << '\n';
    detail::close_out(out, p);
  }
  {
    const auto p = dir / "curves.csv";
    auto out = detail::open_out(p);
    out << "strategy,repeat";
    for (std::size_t k = 0; k < report.rounds; ++k) out << ",round_" << k;
    out << '\n';
    for (const auto& s : report.strategies)
      for (std::size_t r = 0; r < s.curves.size(); ++r) {
        out << s.name << ',' << r;
        for (double v : s.curves[r]) out << ',' << real9(v);
        out << '\n';
      }
    detail::close_out(out, p);
  }
  {
    const auto p = dir / "boxplot.csv";
    auto out = detail::open_out(p);
    out << "strategy,min,lower_quartile,median,upper_quartile,max,mean\n";
    for (const auto& s : report.strategies) {
      const auto& m = s.summary;
      out << s.name << ',' << real9(m.min) << ',' << real9(m.lower_quartile) << ',' << real9(m.median) << ','
          << real9(m.upper_quartile) << ',' << real9(m.max) << ',' << real9(m.mean) << '\n';
    }
    detail::close_out(out, p);
  }
}

inline void emit_sweep(const SweepReport& sweep, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  write_json_file(dir / "sweep.json", to_json(sweep));
  const auto p = dir / "sweep.csv";
  auto out = detail::open_out(p);
  out << "K,round,accuracy,simulated_time_s,delta_variance\n";
  for (const auto& pt : sweep.points)
    for (std::size_t r = 0; r < pt.curve.size(); ++r)
      out << pt.K << ',' << r << ',' << detail::real9(pt.curve[r]) << ',' << detail::real9(pt.simulated_time_s) << ','
          << detail::real9(pt.delta_variance) << '\n';
  detail::close_out(out, p);
}

}  // namespace perfit
