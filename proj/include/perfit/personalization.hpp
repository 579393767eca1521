#pragma once

// Personalization-stage strategies. Each produces one model per client and
// scores it on that client's own balanced test set.

#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "perfit/data.hpp"
#include "perfit/nn.hpp"
#include "perfit/parallel.hpp"
#include "perfit/protocol.hpp"

namespace perfit {

struct GlobalOnly {
  friend bool operator==(const GlobalOnly&, const GlobalOnly&) = default;
};

struct FineTune {
  std::size_t epochs = 5;
  // Layer indices to update; unset means every parametric layer but the first.
  std::optional<std::vector<std::size_t>> trainable_layers;
  friend bool operator==(const FineTune&, const FineTune&) = default;
};

struct FedPer {
  std::size_t base_layer_count = 2;  // leading parametric layers shared through the server
  std::size_t epochs = 1;            // final local epochs on the personalization layers
  friend bool operator==(const FedPer&, const FedPer&) = default;
};

struct MamlFineTune {
  double inner_lr = 0.01;
  std::size_t inner_steps = 5;
  double support_fraction = 0.5;
  friend bool operator==(const MamlFineTune&, const MamlFineTune&) = default;
};

struct FedDistill {
  std::size_t digest_epochs = 1;
  std::size_t revisit_epochs = 1;
  bool exclude_self = false;
  // After the last round every client (sampled or not) digests the final
  // consensus and revisits its data once more.
  bool final_sync = true;
  friend bool operator==(const FedDistill&, const FedDistill&) = default;
};

// Pooled-data baseline: one model trained on the union of all train sets.
struct Centralized {
  std::size_t epochs = 5;
  friend bool operator==(const Centralized&, const Centralized&) = default;
};

using StrategyKind = std::variant<GlobalOnly, FineTune, FedPer, MamlFineTune, FedDistill, Centralized>;

inline const char* kind_name(const StrategyKind& k) {
  static constexpr const char* names[] = {"GlobalOnly", "FineTune", "FedPer", "MamlFineTune", "FedDistill", "Centralized"};
  return names[k.index()];
}

struct Strategy {
  std::string name;  // label in reports; defaults to the kind name
  StrategyKind kind;

  std::string label() const { return name.empty() ? kind_name(kind) : name; }

  // Whether the strategy starts from the FedAvg global model.
  bool uses_fedavg_global() const {
    return std::holds_alternative<GlobalOnly>(kind) || std::holds_alternative<FineTune>(kind) ||
           std::holds_alternative<MamlFineTune>(kind);
  }

  void validate(const ModelSpec* spec = nullptr) const {
    if (const auto* f = std::get_if<FedPer>(&kind)) {
      if (f->base_layer_count == 0) throw ConfigError("FedPer: base_layer_count must be at least 1");
      if (spec && f->base_layer_count > spec->parametric_layer_count())
        throw ConfigError("FedPer: base_layer_count " + std::to_string(f->base_layer_count) + " exceeds the " +
                          std::to_string(spec->parametric_layer_count()) + " parametric layers");
    }
    if (const auto* m = std::get_if<MamlFineTune>(&kind)) {
      if (!(m->support_fraction > 0 && m->support_fraction < 1))
        throw ConfigError("MamlFineTune: support_fraction must be in (0, 1)");
      if (!(m->inner_lr >= 0) || !std::isfinite(m->inner_lr)) throw ConfigError("MamlFineTune: inner_lr must be >= 0");
    }
    if (const auto* f = std::get_if<FineTune>(&kind); f && f->trainable_layers && spec)
      for (auto l : *f->trainable_layers)
        if (l >= spec->layers.size()) throw ConfigError("FineTune: layer index " + std::to_string(l) + " out of range");
  }
};

struct PersonalizedOutcome {
  std::size_t client_id = 0;
  Model model;
  double test_accuracy = 0.0;
  std::string strategy;
  std::optional<double> query_loss;  // MAML diagnostics
};

namespace detail {

inline void check_input(const Model& model, const ClientState& client) {
  const auto& sample = client.data.test.empty() ? client.data.train : client.data.test;
  if (!sample.empty() && sample.front().features.size() != model.spec.input_size())
    throw Error("client " + std::to_string(client.client_id) + ": feature dimension " +
                std::to_string(sample.front().features.size()) + " does not match model input " +
                std::to_string(model.spec.input_size()));
}

inline PersonalizedOutcome score(std::size_t id, Model model, const ClientState& client, std::string strategy) {
  const double acc = evaluate(model, client.data.test);
  return {id, std::move(model), acc, std::move(strategy), std::nullopt};
}

}  // namespace detail

inline PersonalizedOutcome personalize_global_only(const Model& global, const ClientState& client) {
  detail::check_input(global, client);
  return detail::score(client.client_id, global, client, "GlobalOnly");
}

// Freezes the lowest parametric layer, trains the rest.
inline LayerMask default_finetune_mask(const ModelSpec& spec) {
  return LayerMask::parametric_range(spec, 1, spec.parametric_layer_count());
}

inline LayerMask mask_from_layers(const ModelSpec& spec, const std::vector<std::size_t>& layers) {
  LayerMask m = LayerMask::none(spec);
  for (auto l : layers) m.trainable.at(l) = true;
  return m;
}

/// Refines the global model on the client's train set, updating only the
/// layers in `mask`. Zero epochs or an empty mask return the global model.
inline PersonalizedOutcome personalize_finetune(const Model& global, const ClientState& client, const LayerMask& mask,
                                                std::size_t epochs, double lr, std::size_t batch_size,
                                                std::uint64_t seed) {
  detail::check_input(global, client);
  if (!mask.selects_any(global.spec)) {
    std::clog << "warning: fine-tune mask selects no parametric layer; client " << client.client_id
              << " keeps the global model\n";
    return detail::score(client.client_id, global, client, "FineTune");
  }
  if (epochs == 0) return detail::score(client.client_id, global, client, "FineTune");
  const TrainConfig tc{lr, batch_size, epochs, derive_seed(seed, "finetune", client.client_id)};
  return detail::score(client.client_id, train_local(global, client.data.train, tc, mask), client, "FineTune");
}

/// First-order MAML adaptation: `inner_steps` full-batch SGD steps on a seeded
/// support split of the train set. Loss on the remaining query split is
/// reported for diagnostics.
inline PersonalizedOutcome personalize_maml(const Model& global, const ClientState& client, double inner_lr,
                                            std::size_t inner_steps, double support_fraction, std::uint64_t seed) {
  detail::check_input(global, client);
  if (!(support_fraction > 0 && support_fraction < 1)) throw Error("personalize_maml: support_fraction must be in (0, 1)");
  std::vector<std::size_t> order(client.data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "maml-split", client.client_id));
  rng.shuffle(order);
  const auto n_support =
      static_cast<std::size_t>(std::floor(support_fraction * static_cast<double>(order.size())));
  if (n_support == 0) throw Error("personalize_maml: client " + std::to_string(client.client_id) + " has an empty support split");
  std::vector<std::size_t> support(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_support));
  std::vector<std::size_t> query(order.begin() + static_cast<std::ptrdiff_t>(n_support), order.end());
  std::sort(support.begin(), support.end());
  std::sort(query.begin(), query.end());

  auto as_batch = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> shape{idx.size()};
    shape.insert(shape.end(), global.spec.input_shape.begin(), global.spec.input_shape.end());
    std::vector<double> x;
    std::vector<int> y;
    for (auto i : idx) {
      const auto& s = client.data.train[i];
      x.insert(x.end(), s.features.begin(), s.features.end());
      y.push_back(s.label);
    }
    return std::make_pair(Tensor(shape, std::move(x)), std::move(y));
  };

  Model model = global;
  if (inner_steps > 0 && inner_lr != 0.0) {
    const auto [xs, ys] = as_batch(support);
    for (std::size_t step = 0; step < inner_steps; ++step) model = sgd_step(std::move(model), loss_and_grad(model, xs, ys).second, inner_lr);
  }
  auto outcome = detail::score(client.client_id, std::move(model), client, "MamlFineTune");
  if (!query.empty()) {
    const auto [xq, yq] = as_batch(query);
    outcome.query_loss = loss_and_grad(outcome.model, xq, yq).first;
  }
  return outcome;
}

struct StrategyRun {
  std::vector<PersonalizedOutcome> outcomes;
  std::vector<RoundRecord> records;
};

/// FedPer: the first `base_layer_count` parametric layers are federated with
/// FedAvg, the remaining personalization layers never leave their client.
/// After the last round each client takes the final base layers and trains
/// its personalization layers for `head_epochs`.
inline StrategyRun train_fedper(std::span<ClientState> clients, const ModelSpec& spec, std::size_t base_layer_count,
                                std::size_t rounds, const RoundConfig& cfg, std::uint64_t init_seed,
                                std::uint64_t dropout_seed, std::size_t head_epochs, const Executor& exec = {},
                                const RoundObserver& observer = {}) {
  const std::size_t parametric = spec.parametric_layer_count();
  if (base_layer_count < 1 || base_layer_count > parametric)
    throw Error("train_fedper: base_layer_count " + std::to_string(base_layer_count) + " outside [1, " +
                std::to_string(parametric) + "]");
  const Model init = build_model(spec, init_seed);
  for (auto& c : clients) {
    detail::check_input(init, c);
    c.model = init;
  }
  const auto base = LayerMask::parametric_range(spec, 0, base_layer_count);
  const auto personal = LayerMask::parametric_range(spec, base_layer_count, parametric);
  auto fed = train_federated(clients, init, rounds, cfg, dropout_seed, base, exec, observer);

  StrategyRun run{std::vector<PersonalizedOutcome>(clients.size()), std::move(fed.records)};
  const auto global_base = fed.global.extract(base);
  exec.for_each(clients.size(), [&](std::size_t i) {
    auto& client = clients[i];
    Model model = client.model;
    model.assign(base, global_base.data);
    if (head_epochs > 0 && personal.selects_any(spec)) {
      const TrainConfig tc{cfg.lr, cfg.batch_size, head_epochs, derive_seed(cfg.seed, "fedper-head", client.client_id)};
      model = train_local(std::move(model), client.data.train, tc, personal);
    }
    client.model = model;
    run.outcomes[i] = detail::score(client.client_id, std::move(model), client, "FedPer");
  });
  return run;
}

/// Federated distillation over clients that may each run a different
/// architecture. Only soft labels on `shared` are exchanged.
inline StrategyRun train_feddistill(std::span<ClientState> clients, const LabeledSet& shared, std::size_t rounds,
                                    const FdConfig& cfg, std::uint64_t dropout_seed, bool final_sync = true,
                                    const Executor& exec = {},
                                    const std::function<void(std::size_t, RoundRecord&)>& observer = {}) {
  const std::size_t dim = shared.feature_dim();
  for (const auto& c : clients)
    if (c.model.spec.input_size() != dim)
      throw Error("train_feddistill: shared set feature dimension " + std::to_string(dim) +
                  " is incompatible with client " + std::to_string(c.client_id) + " (model input " +
                  std::to_string(c.model.spec.input_size()) + ")");
  StrategyRun run;
  FdConsensus consensus;
  for (std::size_t r = 0; r < rounds; ++r) {
    auto step = run_fd_round(clients, shared, consensus, cfg, dropout_seed, r, exec);
    consensus = std::move(step.consensus);
    if (observer) observer(r, step.record);
    run.records.push_back(std::move(step.record));
  }
  run.outcomes.resize(clients.size());
  exec.for_each(clients.size(), [&](std::size_t i) {
    auto& client = clients[i];
    if (final_sync) {
      if (consensus.valid() && cfg.digest_epochs > 0) {
        const TrainConfig digest{cfg.round.lr, cfg.round.batch_size, cfg.digest_epochs,
                                 derive_seed(cfg.round.seed, "final-digest", client.client_id)};
        client.model = train_soft(std::move(client.model), shared.samples,
                                  consensus.teacher_for(client.client_id, cfg.exclude_self).as_tensor(), digest);
      }
      if (cfg.revisit_epochs > 0) {
        const TrainConfig revisit{cfg.round.lr, cfg.round.batch_size, cfg.revisit_epochs,
                                  derive_seed(cfg.round.seed, "final-revisit", client.client_id)};
        client.model = train_local(std::move(client.model), client.data.train, revisit);
      }
    }
    run.outcomes[i] = detail::score(client.client_id, client.model, client, "FedDistill");
  });
  return run;
}

/// Trains one model on the pooled train sets of all clients. `on_epoch`, if
/// set, sees the model after every epoch.
inline Model train_centralized(std::span<const ClientState> clients, const ModelSpec& spec, std::size_t epochs,
                               const RoundConfig& cfg, std::uint64_t init_seed,
                               const std::function<void(std::size_t, const Model&)>& on_epoch = {}) {
  std::vector<Sample> pooled;
  for (const auto& c : clients) pooled.insert(pooled.end(), c.data.train.begin(), c.data.train.end());
  Model model = build_model(spec, init_seed);
  for (std::size_t e = 0; e < epochs; ++e) {
    const TrainConfig tc{cfg.lr, cfg.batch_size, 1, derive_seed(cfg.seed, "centralized", e)};
    model = train_local(std::move(model), pooled, tc);
    if (on_epoch) on_epoch(e, model);
  }
  return model;
}

}  // namespace perfit
