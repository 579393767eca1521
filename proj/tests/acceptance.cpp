// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include <unistd.h>

#include "perfit/config.hpp"
#include "perfit/harness.hpp"
#include "perfit/presets.hpp"
#include "test_util.hpp"

using namespace perfit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, const std::function<Outcome()>& fn) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::printf("[%s] %d. %s (%.1fs) %s\n", o.pass ? "PASS" : "FAIL", id, name, secs, o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<ClientState> synthetic_clients(const ModelSpec& spec, std::size_t n, std::size_t samples, std::uint64_t seed) {
  const Model init = build_model(spec, seed);
  std::vector<ClientState> out;
  for (std::size_t i = 0; i < n; ++i) {
    ClientState c;
    c.client_id = i;
    c.data.train = testing_util::random_samples(samples, spec.input_size(), spec.num_classes, seed * 31 + i);
    c.data.test = testing_util::random_samples(spec.num_classes, spec.input_size(), spec.num_classes, seed * 37 + i);
    c.model = init;
    out.push_back(std::move(c));
  }
  return out;
}

ExperimentConfig bench() { return load_config(std::string(PERFIT_SOURCE_DIR) + "/configs/bench.json"); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main() {
  criterion(1, "parameter count", [] {
    const auto nn = param_count(presets::three_nn(1200));
    const auto cnn = param_count(presets::case_study_cnn(30, 40));
    return Outcome{nn == 521510, fmt("3NN(1200)=%zu, CNN(1x30x40)=%zu reported", nn, cnn)};
  });

  criterion(2, "communication accounting", [] {
    bool ok = true;
    const auto spec = presets::three_nn(1200);
    auto clients = synthetic_clients(spec, 6, 2, 1);
    RoundConfig rc;
    rc.K = 5;
    const auto res = run_round(clients, clients[0].model.params, rc, 1, 0);
    for (const auto& m : res.uplink)
      ok &= m.scalar_count == 521510 && (m.payload_bytes().size() - wire::kHeaderBytes) / 8 == 521510;
    ok &= res.record.uplink_scalars == 5u * 521510u;

    // FD over a mixture of architectures, 500-sample shared set, 10 classes
    const auto mlp = presets::three_nn(18 * 18), cnn = presets::case_study_cnn(18, 18);
    std::vector<ClientState> fd;
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& s = i % 2 ? cnn : mlp;
      auto c = synthetic_clients(s, 1, 4, 10 + i).front();
      c.client_id = i;
      fd.push_back(std::move(c));
    }
    const auto shared = LabeledSet::from_samples(testing_util::random_samples(500, 18 * 18, 10, 3), 10);
    FdConfig fc;
    fc.round.K = 6;
    const auto fr = run_fd_round(fd, shared, {}, fc, 1, 0);
    std::size_t per = 0;
    for (const auto& m : fr.uplink) {
      ok &= m.scalar_count == 5000 && (m.payload_bytes().size() - wire::kHeaderBytes) / 8 == 5000;
      ok &= std::holds_alternative<SoftLabelMatrix>(m.payload);
      per = m.scalar_count;
    }
    return Outcome{ok, fmt("FedAvg uplink/participant=%zu, FD uplink/participant=%zu", res.uplink[0].scalar_count, per)};
  });

  criterion(3, "one-step FedAvg equivalence", [] {
    const auto t0 = Clock::now();
    const auto spec = presets::three_nn(64);
    auto clients = synthetic_clients(spec, 5, 32, 2);
    RoundConfig rc;
    rc.K = 5;
    rc.batch_size = 32;
    rc.lr = 0.05;
    const Model init = clients[0].model;
    const auto res = run_round(clients, init.params, rc, 1, 0);
    std::vector<Sample> pooled;
    for (const auto& c : clients) pooled.insert(pooled.end(), c.data.train.begin(), c.data.train.end());
    const auto [x, y] = testing_util::to_batch(pooled, spec);
    const auto central = sgd_step(init, loss_and_grad(init, x, y).second, rc.lr);
    double worst = 0;
    for (std::size_t i = 0; i < central.params.size(); ++i)
      worst = std::max(worst, std::abs(central.params[i] - res.global[i]));
    const double t = elapsed(t0);
    return Outcome{worst <= 1e-9 && t < 1.0, fmt("max |diff|=%.3g, %.3fs", worst, t)};
  });

  criterion(4, "gradient oracle", [] {
    const auto t0 = Clock::now();
    // conv, pool, relu, flatten, dense, softmax
    const ModelSpec spec{{LayerSpec::conv3x3(2, 3), LayerSpec::relu(), LayerSpec::maxpool2x2(), LayerSpec::conv3x3(3, 2),
                          LayerSpec::flatten(), LayerSpec::dense(8, 5), LayerSpec::relu(), LayerSpec::dense(5, 4),
                          LayerSpec::softmax()},
                         {2, 10, 11},
                         4};
    double worst = 0;
    std::size_t probes = 0;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      const Model model = build_model(spec, seed);
      const auto data = testing_util::random_samples(6, spec.input_size(), 4, seed + 100);
      const auto [x, y] = testing_util::to_batch(data, spec);
      worst = std::max(worst, testing_util::max_fd_relative_error(model, x, y, 60, seed + 200));
      probes += 60;
    }
    const double t = elapsed(t0);
    return Outcome{worst < 1e-4 && probes >= 200 && t < 30.0, fmt("%zu probes, max rel err=%.3g, %.2fs", probes, worst, t)};
  });

  // Bench runs are shared by criteria 5, 6 and 8.
  std::optional<ExperimentReport> first;
  const auto dir = fs::temp_directory_path() / ("perfit_acceptance_" + std::to_string(::getpid()));

  criterion(5, "personalization benefit on bench", [&] {
    const auto t0 = Clock::now();
    first = run_experiment(bench());
    emit_report(*first, dir / "a");
    const double g = first->strategy("GlobalOnly").mean_accuracy();
    const double ft = first->strategy("FineTune").mean_accuracy();
    const double fd = first->strategy("FedDistill").mean_accuracy();
    const double t = elapsed(t0);
    return Outcome{ft >= g + 0.05 && fd >= g + 0.02 && t < 600,
                   fmt("GlobalOnly=%.4f FineTune=%.4f (%+.2fpp) FedDistill=%.4f (%+.2fpp), %.0fs", g, ft, 100 * (ft - g), fd,
                       100 * (fd - g), t)};
  });

  criterion(6, "variance narrowing", [&] {
    if (!first) return Outcome{false, "bench run unavailable"};
    const double g = first->strategy("GlobalOnly").summary.iqr();
    const double ft = first->strategy("FineTune").summary.iqr();
    return Outcome{ft <= g, fmt("IQR GlobalOnly=%.4f FineTune=%.4f", g, ft)};
  });

  criterion(7, "K-sweep smoothness", [] {
    const auto s = sweep_k(bench(), {3, 30});
    const double v3 = s.points[0].delta_variance, v30 = s.points[1].delta_variance;
    return Outcome{v30 < v3, fmt("delta variance K=3: %.3g, K=30: %.3g", v3, v30)};
  });

  criterion(8, "determinism", [&] {
    if (!first) return Outcome{false, "bench run unavailable"};
    const auto second = run_experiment(bench(), Executor{2});
    emit_report(second, dir / "b");
    bool same = true;
    for (const char* f : {"report.json", "accuracy.csv", "comm.csv", "curves.csv", "boxplot.csv"})
      same &= slurp(dir / "a" / f) == slurp(dir / "b" / f);
    const auto bytes = slurp(dir / "a" / "report.json").size();
    return Outcome{same && bytes > 0, fmt("report.json %zu bytes, threads 1 vs 2 %s", bytes, same ? "identical" : "DIFFER")};
  });

  criterion(9, "degeneracy lattice", [] {
    bool ok = true;
    const auto spec = presets::three_nn(16, 4);
    RoundConfig rc;
    rc.K = 3;
    rc.batch_size = 4;
    rc.lr = 0.05;
    rc.seed = 8;
    auto a = synthetic_clients(spec, 6, 12, 5), b = synthetic_clients(spec, 6, 12, 5);
    const auto fedper = train_fedper(a, spec, spec.parametric_layer_count(), 5, rc, 77, 4, 3);
    const Model init = build_model(spec, 77);
    for (auto& c : b) c.model = init;
    const auto fedavg = train_federated(b, init, 5, rc, 4);
    ok &= fedper.records == fedavg.records;
    for (const auto& o : fedper.outcomes) ok &= o.model.params == fedavg.global.params;
    for (const auto& c : b) {
      const auto g = personalize_global_only(fedavg.global, c);
      const auto ft = personalize_finetune(fedavg.global, c, default_finetune_mask(spec), 0, 0.05, 4, 1);
      const auto maml = personalize_maml(fedavg.global, c, 0.05, 0, 0.5, 1);
      ok &= ft.model.params == g.model.params && maml.model.params == g.model.params;
      ok &= ft.test_accuracy == g.test_accuracy && maml.test_accuracy == g.test_accuracy;
    }
    return Outcome{ok, "FineTune(0), MamlFineTune(0) == GlobalOnly; FedPer(all) == FedAvg"};
  });

  fs::remove_all(dir);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures;
}
