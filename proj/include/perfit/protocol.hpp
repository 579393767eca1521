#pragma once

// Synchronous round-based federation: client sampling, dropout, local
// training dispatch, weighted averaging, distillation consensus, and exact
// per-round communication accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "perfit/data.hpp"
#include "perfit/errors.hpp"
#include "perfit/nn.hpp"
#include "perfit/parallel.hpp"
#include "perfit/rng.hpp"

namespace perfit {

struct ClientState {
  std::size_t client_id = 0;
  ClientDataset data;
  Model model;
  double speed_factor = 1.0;  // simulated seconds per sample pass
  double dropout_prob = 0.0;

  void validate() const {
    if (!(speed_factor > 0) || !std::isfinite(speed_factor))
      throw Error("client " + std::to_string(client_id) + ": speed_factor must be positive");
    if (!(dropout_prob >= 0 && dropout_prob <= 1))
      throw Error("client " + std::to_string(client_id) + ": dropout_prob outside [0, 1]");
  }
};

struct RoundConfig {
  std::size_t K = 5;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  double lr = 0.01;
  std::uint64_t seed = 0;
  // Server-side transfer cost added to each round's barrier time. Zero keeps
  // round time equal to the slowest participant's compute time.
  double server_seconds_per_scalar = 0.0;

  void validate(std::size_t num_clients) const {
    if (K < 1 || K > num_clients)
      throw Error("K = " + std::to_string(K) + " outside [1, " + std::to_string(num_clients) + "]");
    if (local_epochs == 0) throw Error("local_epochs must be positive");
    if (batch_size == 0) throw Error("batch_size must be positive");
    if (!(lr > 0) || !std::isfinite(lr)) throw Error("lr must be finite and positive");
    if (!(server_seconds_per_scalar >= 0)) throw Error("server_seconds_per_scalar must be non-negative");
  }
};

// Row-stochastic matrix of class probabilities on the shared set.
struct SoftLabelMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t scalar_count() const { return data.size(); }
  bool empty() const { return rows == 0; }

  void validate(double tol = 1e-9) const {
    if (data.size() != rows * cols) throw Error("soft label matrix: size mismatch");
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = at(r, c);
        if (!(v >= 0 && v <= 1)) throw Error("soft label matrix: entry outside [0, 1] in row " + std::to_string(r));
        sum += v;
      }
      if (std::abs(sum - 1.0) > tol) throw Error("soft label matrix: row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
  }

  Tensor as_tensor() const { return Tensor({rows, cols}, data); }
  std::string to_bytes() const { return wire::encode(data); }

  friend bool operator==(const SoftLabelMatrix&, const SoftLabelMatrix&) = default;
};

struct UpMessage {
  std::size_t client_id = 0;
  std::variant<ParamVector, SoftLabelMatrix> payload;
  std::size_t sample_count = 0;
  std::size_t scalar_count = 0;

  std::string payload_bytes() const {
    return std::visit([](const auto& p) { return p.to_bytes(); }, payload);
  }
};

struct RoundRecord {
  std::size_t round_index = 0;
  std::vector<std::size_t> participants;  // sampled and survived
  std::vector<std::size_t> dropouts;      // sampled but failed
  std::uint64_t uplink_scalars = 0;
  std::uint64_t downlink_scalars = 0;
  double simulated_time_s = 0.0;
  bool empty_round = false;
  std::map<std::string, double> metrics;  // global snapshots, e.g. union test accuracy

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

inline constexpr const char* kRoundLogSchema = "v1";

inline nlohmann::json to_json(const RoundRecord& r) {
  return {{"schema", kRoundLogSchema},
          {"round_index", r.round_index},
          {"participants", r.participants},
          {"dropouts", r.dropouts},
          {"uplink_scalars", r.uplink_scalars},
          {"downlink_scalars", r.downlink_scalars},
          {"simulated_time_s", r.simulated_time_s},
          {"empty_round", r.empty_round},
          {"global_metrics", r.metrics}};
}

inline RoundRecord round_record_from_json(const nlohmann::json& j) {
  if (j.at("schema") != kRoundLogSchema) throw Error("round record: unsupported schema");
  RoundRecord r;
  j.at("round_index").get_to(r.round_index);
  j.at("participants").get_to(r.participants);
  j.at("dropouts").get_to(r.dropouts);
  j.at("uplink_scalars").get_to(r.uplink_scalars);
  j.at("downlink_scalars").get_to(r.downlink_scalars);
  j.at("simulated_time_s").get_to(r.simulated_time_s);
  j.at("empty_round").get_to(r.empty_round);
  j.at("global_metrics").get_to(r.metrics);
  return r;
}

/// Uniform sample of K client ids without replacement, returned in ascending
/// order. Depends only on (seed, round).
inline std::vector<std::size_t> sample_clients(std::span<const std::size_t> all, std::size_t K, std::uint64_t seed,
                                               std::size_t round) {
  if (K > all.size())
    throw Error("sample_clients: K = " + std::to_string(K) + " exceeds " + std::to_string(all.size()) + " clients");
  std::vector<std::size_t> pool(all.begin(), all.end());
  Rng rng(derive_seed(seed, "client-sampling", round));
  for (std::size_t i = 0; i < K; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(K);
  std::sort(pool.begin(), pool.end());
  return pool;
}

struct WeightedUpdate {
  std::size_t client_id = 0;
  std::span<const double> params;
  std::size_t sample_count = 0;
};

/// Sample-count weighted mean, sum_i n_i w_i / sum_i n_i. Updates are summed in
/// ascending client_id order whatever order they arrive in.
inline ParamVector fedavg_aggregate(std::vector<WeightedUpdate> updates) {
  if (updates.empty()) throw Error("fedavg_aggregate: no updates");
  std::stable_sort(updates.begin(), updates.end(),
                   [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  const std::size_t n = updates.front().params.size();
  std::size_t total = 0;
  for (const auto& u : updates) {
    if (u.params.size() != n)
      throw Error("fedavg_aggregate: client " + std::to_string(u.client_id) + " sent " +
                  std::to_string(u.params.size()) + " values, expected " + std::to_string(n));
    total += u.sample_count;
  }
  if (total == 0) throw Error("fedavg_aggregate: total sample count is zero");
  ParamVector out{std::vector<double>(n, 0.0)};
  for (const auto& u : updates) {
    const auto w = static_cast<double>(u.sample_count);
    for (std::size_t i = 0; i < n; ++i) out[i] += w * u.params[i];
  }
  const auto inv = static_cast<double>(total);
  for (auto& v : out.data) v /= inv;
  return out;
}

namespace detail {

inline std::vector<std::size_t> client_ids(std::span<const ClientState> clients) {
  std::vector<std::size_t> ids;
  for (const auto& c : clients) ids.push_back(c.client_id);
  return ids;
}

inline const ClientState& find_client(std::span<const ClientState> clients, std::size_t id) {
  for (const auto& c : clients)
    if (c.client_id == id) return c;
  throw Error("unknown client " + std::to_string(id));
}

inline std::size_t client_position(std::span<const ClientState> clients, std::size_t id) {
  for (std::size_t i = 0; i < clients.size(); ++i)
    if (clients[i].client_id == id) return i;
  throw Error("unknown client " + std::to_string(id));
}

// Selection then Bernoulli dropout per selected client.
inline void select_and_drop(std::span<const ClientState> clients, const RoundConfig& cfg, std::uint64_t dropout_seed,
                            std::size_t round, RoundRecord& rec) {
  cfg.validate(clients.size());
  const auto ids = client_ids(clients);
  for (const auto& c : clients) c.validate();
  for (auto id : sample_clients(ids, cfg.K, cfg.seed, round)) {
    Rng rng(derive_seed(dropout_seed, "dropout", round, id));
    (rng.bernoulli(find_client(clients, id).dropout_prob) ? rec.dropouts : rec.participants).push_back(id);
  }
}

}  // namespace detail

struct RoundResult {
  ParamVector global;
  RoundRecord record;
  std::vector<UpMessage> uplink;
};

/// One synchronous weight-exchange round.
///
/// `shared` selects the layers that travel: every layer for FedAvg, the base
/// layers for FedPer. Each survivor overwrites its shared layers with the
/// global ones, trains all of its layers locally, keeps the result as its
/// model, and uploads only the shared slice. Downlink counts the broadcast to
/// every selected client; uplink counts survivors only. Round time is the
/// slowest survivor's samples * epochs * speed_factor, plus the server
/// transfer term.
inline RoundResult run_round(std::span<ClientState> clients, const ParamVector& global, const RoundConfig& cfg,
                             std::uint64_t dropout_seed, std::size_t round, const std::optional<LayerMask>& shared = {},
                             const Executor& exec = {}) {
  RoundResult result{global, {}, {}};
  auto& rec = result.record;
  rec.round_index = round;
  detail::select_and_drop(clients, cfg, dropout_seed, round, rec);

  const ModelSpec& spec = detail::find_client(clients, (rec.participants.empty() ? rec.dropouts : rec.participants).front()).model.spec;
  const LayerMask mask = shared.value_or(LayerMask::all(spec));
  const std::size_t shared_count = mask.param_count(spec);
  for (auto id : rec.participants)
    if (!(detail::find_client(clients, id).model.spec == spec))
      throw Error("run_round: client " + std::to_string(id) + " has a different model architecture");
  if (global.size() != param_count(spec)) throw Error("run_round: global vector does not match the model");

  rec.downlink_scalars = shared_count * (rec.participants.size() + rec.dropouts.size());
  if (rec.participants.empty()) {
    rec.empty_round = true;
    return result;
  }

  Model global_model(spec, global);
  const ParamVector global_shared = global_model.extract(mask);
  result.uplink.resize(rec.participants.size());
  std::vector<double> times(rec.participants.size());
  exec.for_each(rec.participants.size(), [&](std::size_t k) {
    const auto id = rec.participants[k];
    auto& client = clients[detail::client_position(clients, id)];
    Model local = client.model;
    local.assign(mask, global_shared.data);
    const TrainConfig tc{cfg.lr, cfg.batch_size, cfg.local_epochs, derive_seed(cfg.seed, "local-train", round, id)};
    client.model = train_local(std::move(local), client.data.train, tc);
    auto payload = client.model.extract(mask);
    const std::size_t scalars = payload.size();
    result.uplink[k] = UpMessage{id, std::move(payload), client.data.train.size(), scalars};
    times[k] = static_cast<double>(client.data.train.size() * cfg.local_epochs) * client.speed_factor;
  });

  std::vector<WeightedUpdate> updates;
  for (const auto& m : result.uplink) {
    updates.push_back({m.client_id, std::get<ParamVector>(m.payload).data, m.sample_count});
    rec.uplink_scalars += m.scalar_count;
  }
  global_model.assign(mask, fedavg_aggregate(std::move(updates)).data);
  result.global = global_model.params;
  rec.simulated_time_s = *std::max_element(times.begin(), times.end()) +
                         cfg.server_seconds_per_scalar * static_cast<double>(rec.uplink_scalars + rec.downlink_scalars);
  return result;
}

// ---------------------------------------------------------------------------
// Federated distillation

struct FdConfig {
  RoundConfig round;
  std::size_t digest_epochs = 1;
  std::size_t revisit_epochs = 1;
  bool exclude_self = false;  // teacher = mean of the *other* clients' last uploads
};

// Server-side distillation state after a round.
struct FdConsensus {
  SoftLabelMatrix mean;
  std::map<std::size_t, SoftLabelMatrix> contributions;  // last round's uploads

  bool valid() const { return !mean.empty(); }

  /// Teacher for one client: the mean, or with exclude_self the mean of the
  /// other contributors (falls back to the mean when the client is the only one).
  SoftLabelMatrix teacher_for(std::size_t client_id, bool exclude_self) const {
    if (!exclude_self) return mean;
    auto own = contributions.find(client_id);
    if (own == contributions.end() || contributions.size() < 2) return mean;
    SoftLabelMatrix t{mean.rows, mean.cols, std::vector<double>(mean.data.size(), 0.0)};
    for (const auto& [id, m] : contributions)
      if (id != client_id)
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += m.data[i];
    const auto others = static_cast<double>(contributions.size() - 1);
    for (auto& v : t.data) v /= others;
    return t;
  }
};

/// Arithmetic mean of soft-label matrices, summed in ascending client order.
inline SoftLabelMatrix average_soft_labels(const std::map<std::size_t, SoftLabelMatrix>& uploads) {
  if (uploads.empty()) throw Error("average_soft_labels: no uploads");
  const auto& first = uploads.begin()->second;
  SoftLabelMatrix out{first.rows, first.cols, std::vector<double>(first.data.size(), 0.0)};
  for (const auto& [id, m] : uploads) {
    if (m.rows != out.rows || m.cols != out.cols)
      throw Error("average_soft_labels: client " + std::to_string(id) + " sent a mismatched matrix");
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += m.data[i];
  }
  const auto n = static_cast<double>(uploads.size());
  for (auto& v : out.data) v /= n;
  return out;
}

inline SoftLabelMatrix soft_labels(const Model& model, const LabeledSet& shared) {
  auto probs = predict_proba(model, shared.samples);
  return SoftLabelMatrix{shared.size(), model.spec.num_classes, std::move(probs.data)};
}

struct FdRoundResult {
  FdConsensus consensus;
  RoundRecord record;
  std::vector<UpMessage> uplink;
};

/// One distillation round. Each surviving sampled client digests the previous
/// consensus on the shared set (skipped while no consensus exists), revisits
/// its private data, and uploads its class probabilities on the shared set.
/// No parameters leave any client. An empty round keeps `prev`.
inline FdRoundResult run_fd_round(std::span<ClientState> clients, const LabeledSet& shared, const FdConsensus& prev,
                                  const FdConfig& cfg, std::uint64_t dropout_seed, std::size_t round,
                                  const Executor& exec = {}) {
  FdRoundResult result{prev, {}, {}};
  auto& rec = result.record;
  rec.round_index = round;
  if (shared.empty()) throw Error("run_fd_round: shared set is empty");
  detail::select_and_drop(clients, cfg.round, dropout_seed, round, rec);
  const std::size_t classes = clients.front().model.spec.num_classes;
  const std::size_t matrix_size = shared.size() * classes;
  if (prev.valid()) rec.downlink_scalars = matrix_size * (rec.participants.size() + rec.dropouts.size());
  if (rec.participants.empty()) {
    rec.empty_round = true;
    return result;
  }

  result.uplink.resize(rec.participants.size());
  std::vector<double> times(rec.participants.size());
  exec.for_each(rec.participants.size(), [&](std::size_t k) {
    const auto id = rec.participants[k];
    auto& client = clients[detail::client_position(clients, id)];
    if (client.model.spec.num_classes != classes) throw Error("run_fd_round: clients disagree on num_classes");
    Model model = std::move(client.model);
    std::size_t work = 0;
    if (prev.valid() && cfg.digest_epochs > 0) {
      const TrainConfig digest{cfg.round.lr, cfg.round.batch_size, cfg.digest_epochs,
                               derive_seed(cfg.round.seed, "digest", round, id)};
      model = train_soft(std::move(model), shared.samples, prev.teacher_for(id, cfg.exclude_self).as_tensor(), digest);
      work += shared.size() * cfg.digest_epochs;
    }
    if (cfg.revisit_epochs > 0) {
      const TrainConfig revisit{cfg.round.lr, cfg.round.batch_size, cfg.revisit_epochs,
                                derive_seed(cfg.round.seed, "revisit", round, id)};
      model = train_local(std::move(model), client.data.train, revisit);
      work += client.data.train.size() * cfg.revisit_epochs;
    }
    client.model = std::move(model);
    auto labels = soft_labels(client.model, shared);
    const std::size_t scalars = labels.scalar_count();
    result.uplink[k] = UpMessage{id, std::move(labels), client.data.train.size(), scalars};
    times[k] = static_cast<double>(work) * client.speed_factor;
  });

  result.consensus.contributions.clear();
  for (const auto& m : result.uplink) {
    result.consensus.contributions.emplace(m.client_id, std::get<SoftLabelMatrix>(m.payload));
    rec.uplink_scalars += m.scalar_count;
  }
  result.consensus.mean = average_soft_labels(result.consensus.contributions);
  rec.simulated_time_s = *std::max_element(times.begin(), times.end()) +
                         cfg.round.server_seconds_per_scalar * static_cast<double>(rec.uplink_scalars + rec.downlink_scalars);
  return result;
}

// ---------------------------------------------------------------------------
// Accounting

struct CommReport {
  std::vector<std::uint64_t> uplink_per_round;
  std::vector<std::uint64_t> downlink_per_round;
  std::uint64_t uplink_total = 0;
  std::uint64_t downlink_total = 0;

  friend bool operator==(const CommReport&, const CommReport&) = default;
};

inline CommReport comm_totals(std::span<const RoundRecord> records) {
  CommReport r;
  for (const auto& rec : records) {
    r.uplink_per_round.push_back(rec.uplink_scalars);
    r.downlink_per_round.push_back(rec.downlink_scalars);
    r.uplink_total += rec.uplink_scalars;
    r.downlink_total += rec.downlink_scalars;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Multi-round drivers

// Called after every round with the round index and the current global vector.
using RoundObserver = std::function<void(std::size_t, const ParamVector&, RoundRecord&)>;

struct FederationResult {
  Model global;
  std::vector<RoundRecord> records;
};

/// FedAvg (or FedPer when `shared` selects base layers) for `rounds` rounds
/// starting from `init`. Client models are updated in place.
inline FederationResult train_federated(std::span<ClientState> clients, const Model& init, std::size_t rounds,
                                        const RoundConfig& cfg, std::uint64_t dropout_seed,
                                        const std::optional<LayerMask>& shared = {}, const Executor& exec = {},
                                        const RoundObserver& observer = {}) {
  FederationResult out{init, {}};
  for (std::size_t r = 0; r < rounds; ++r) {
    auto step = run_round(clients, out.global.params, cfg, dropout_seed, r, shared, exec);
    out.global.params = std::move(step.global);
    if (observer) observer(r, out.global.params, step.record);
    out.records.push_back(std::move(step.record));
  }
  return out;
}

}  // namespace perfit
