#pragma once

// Experiment configuration: the `perfed/v1` JSON schema, strict parsing
// (unknown keys are errors), canonical serialization and dotted-key overrides.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "perfit/data.hpp"
#include "perfit/errors.hpp"
#include "perfit/nn.hpp"
#include "perfit/personalization.hpp"
#include "perfit/protocol.hpp"

namespace perfit {

using nlohmann::json;

inline constexpr const char* kConfigSchema = "perfed/v1";

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "csv"
  std::string csv_path;
  CsvSchema csv_schema;
  double window_seconds = 1.0;
  double stride_seconds = 1.0;
  SynthConfig synthetic;  // seed comes from the master seed
};

struct ClientProfile {
  double speed_factor_min = 1.0;
  double speed_factor_max = 1.0;
  double dropout_prob = 0.0;
};

struct ModelAssignment {
  std::string model;
  std::size_t count = 0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  PartitionPlan partition;
  std::size_t shared_size = 500;
  bool shared_balanced = true;
  double sharing_fraction = 0.0;
  std::map<std::string, ModelSpec> models;
  std::string model = "3nn";                 // architecture for weight-exchange strategies
  std::vector<ModelAssignment> fd_models;    // per-client architectures for FedDistill, in client order
  ClientProfile clients;
  RoundConfig round;
  std::size_t rounds = 20;
  std::size_t repeat_count = 5;
  std::vector<Strategy> strategies;
  std::vector<std::size_t> sweep_ks{3, 5, 10, 30};
  std::string output_dir = "out";

  std::size_t num_classes() const {
    return data.source == "csv" ? data.csv_schema.activity_labels.size() : data.synthetic.num_classes;
  }

  const ModelSpec& model_spec(const std::string& name) const {
    auto it = models.find(name);
    if (it == models.end()) throw ConfigError("unknown model '" + name + "'");
    return it->second;
  }

  // Architecture of every client under FedDistill.
  std::vector<std::string> fd_model_names() const {
    std::vector<std::string> names;
    for (const auto& a : fd_models) names.insert(names.end(), a.count, a.model);
    if (fd_models.empty()) names.assign(partition.num_clients, model);
    return names;
  }

  void validate() const;
};

// ---------------------------------------------------------------------------
// Strict object reader

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(j_.at(key), key);
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where() + "missing required key '" + key + "'");
    return convert<T>(j_.at(key), key);
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key '" + path(key) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  template <typename T>
  T convert(const json& v, const std::string& key) const {
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      return v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError("key '" + path(key) + "' has wrong type (got " + std::string(v.type_name()) + ": " +
                        v.dump() + ")");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Model specs

inline json to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    json e{{"kind", to_string(l.kind)}};
    if (l.parametric()) {
      e["in"] = l.in;
      e["out"] = l.out;
    }
    layers.push_back(e);
  }
  return {{"input_shape", spec.input_shape}, {"num_classes", spec.num_classes}, {"layers", layers}};
}

inline ModelSpec model_spec_from_json(const json& j, const std::string& path) {
  detail::ObjectReader r(j, path);
  ModelSpec spec;
  spec.input_shape = r.require<std::vector<std::size_t>>("input_shape");
  spec.num_classes = r.require<std::size_t>("num_classes");
  const json* layers = r.child("layers");
  if (!layers || !layers->is_array()) throw ConfigError(r.path("layers") + ": expected an array");
  for (std::size_t i = 0; i < layers->size(); ++i) {
    detail::ObjectReader lr((*layers)[i], r.path("layers") + "." + std::to_string(i));
    const auto kind_name = lr.require<std::string>("kind");
    const auto kind = layer_kind_from_string(kind_name);
    if (!kind) throw ConfigError(lr.path("kind") + ": unknown layer kind '" + kind_name + "'");
    LayerSpec layer{*kind};
    if (layer.parametric()) {
      layer.in = lr.require<std::size_t>("in");
      layer.out = lr.require<std::size_t>("out");
    }
    lr.finish();
    spec.layers.push_back(layer);
  }
  r.finish();
  try {
    infer_shapes(spec);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Strategies

inline json to_json(const Strategy& s) {
  json j = std::visit(
      [](const auto& k) -> json {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, GlobalOnly>) return json::object();
        else if constexpr (std::is_same_v<K, FineTune>)
          return {{"epochs", k.epochs}, {"trainable_layers", k.trainable_layers ? json(*k.trainable_layers) : json(nullptr)}};
        else if constexpr (std::is_same_v<K, FedPer>)
          return {{"base_layer_count", k.base_layer_count}, {"epochs", k.epochs}};
        else if constexpr (std::is_same_v<K, MamlFineTune>)
          return {{"inner_lr", k.inner_lr}, {"inner_steps", k.inner_steps}, {"support_fraction", k.support_fraction}};
        else if constexpr (std::is_same_v<K, FedDistill>)
          return {{"digest_epochs", k.digest_epochs},
                  {"revisit_epochs", k.revisit_epochs},
                  {"exclude_self", k.exclude_self},
                  {"final_sync", k.final_sync}};
        else
          return {{"epochs", k.epochs}};
      },
      s.kind);
  j["kind"] = kind_name(s.kind);
  j["name"] = s.label();
  return j;
}

inline Strategy strategy_from_json(const json& j, const std::string& path) {
  detail::ObjectReader r(j, path);
  const auto kind = r.require<std::string>("kind");
  Strategy s;
  s.name = r.get<std::string>("name", kind);
  if (kind == "GlobalOnly") {
    s.kind = GlobalOnly{};
  } else if (kind == "FineTune") {
    FineTune f;
    f.epochs = r.get<std::size_t>("epochs", f.epochs);
    if (const json* layers = r.child("trainable_layers"); layers && !layers->is_null()) {
      if (!layers->is_array()) throw ConfigError(r.path("trainable_layers") + ": expected an array or null");
      f.trainable_layers = layers->get<std::vector<std::size_t>>();
    }
    s.kind = f;
  } else if (kind == "FedPer") {
    FedPer f;
    f.base_layer_count = r.get<std::size_t>("base_layer_count", f.base_layer_count);
    f.epochs = r.get<std::size_t>("epochs", f.epochs);
    s.kind = f;
  } else if (kind == "MamlFineTune") {
    MamlFineTune m;
    m.inner_lr = r.get<double>("inner_lr", m.inner_lr);
    m.inner_steps = r.get<std::size_t>("inner_steps", m.inner_steps);
    m.support_fraction = r.get<double>("support_fraction", m.support_fraction);
    s.kind = m;
  } else if (kind == "FedDistill") {
    FedDistill f;
    f.digest_epochs = r.get<std::size_t>("digest_epochs", f.digest_epochs);
    f.revisit_epochs = r.get<std::size_t>("revisit_epochs", f.revisit_epochs);
    f.exclude_self = r.get<bool>("exclude_self", f.exclude_self);
    f.final_sync = r.get<bool>("final_sync", f.final_sync);
    s.kind = f;
  } else if (kind == "Centralized") {
    Centralized c;
    c.epochs = r.get<std::size_t>("epochs", c.epochs);
    s.kind = c;
  } else {
    throw ConfigError(r.path("kind") + ": unknown strategy '" + kind + "'");
  }
  r.finish();
  return s;
}

// ---------------------------------------------------------------------------
// Whole config

inline const char* to_string(SkewKind k) { return k == SkewKind::RandomCounts ? "random-counts" : "dirichlet"; }

inline json to_json(const ExperimentConfig& c) {
  json models = json::object();
  for (const auto& [name, spec] : c.models) models[name] = to_json(spec);
  json fd = json::array();
  for (const auto& a : c.fd_models) fd.push_back({{"model", a.model}, {"count", a.count}});
  json strategies = json::array();
  for (const auto& s : c.strategies) strategies.push_back(to_json(s));
  const auto& sy = c.data.synthetic;
  return {
      {"schema", kConfigSchema},
      {"seed", c.seed},
      {"data",
       {{"source", c.data.source},
        {"csv_path", c.data.csv_path},
        {"csv",
         {{"activity_labels", c.data.csv_schema.activity_labels},
          {"sample_rate_hz", c.data.csv_schema.sample_rate_hz},
          {"window_seconds", c.data.window_seconds},
          {"stride_seconds", c.data.stride_seconds}}},
        {"synthetic",
         {{"num_classes", sy.num_classes},
          {"samples_per_class", sy.samples_per_class},
          {"dim", sy.dim},
          {"sigma", sy.sigma},
          {"separation", sy.separation},
          {"num_subjects", sy.num_subjects},
          {"subject_shift", sy.subject_shift},
          {"swap_prob", sy.swap_prob}}}}},
      {"partition",
       {{"num_clients", c.partition.num_clients},
        {"per_client_train", c.partition.per_client_train},
        {"per_client_test", c.partition.per_client_test},
        {"skew", to_string(c.partition.skew)},
        {"alpha", c.partition.alpha}}},
      {"shared", {{"size", c.shared_size}, {"balanced", c.shared_balanced}, {"sharing_fraction", c.sharing_fraction}}},
      {"models", models},
      {"model", c.model},
      {"fd_models", fd},
      {"clients",
       {{"speed_factor_min", c.clients.speed_factor_min},
        {"speed_factor_max", c.clients.speed_factor_max},
        {"dropout_prob", c.clients.dropout_prob}}},
      {"round",
       {{"K", c.round.K},
        {"local_epochs", c.round.local_epochs},
        {"batch_size", c.round.batch_size},
        {"lr", c.round.lr},
        {"server_seconds_per_scalar", c.round.server_seconds_per_scalar}}},
      {"rounds", c.rounds},
      {"repeat_count", c.repeat_count},
      {"strategies", strategies},
      {"sweep_ks", c.sweep_ks},
      {"output_dir", c.output_dir},
  };
}

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (data.source != "synthetic" && data.source != "csv") fail("data.source must be 'synthetic' or 'csv'");
  if (data.source == "csv" && data.csv_path.empty()) fail("data.csv_path is required when data.source is 'csv'");
  if (num_classes() < 2) fail("need at least two classes");
  if (repeat_count < 1) fail("repeat_count must be at least 1");
  if (rounds < 1) fail("rounds must be at least 1");
  if (partition.num_clients < 1) fail("partition.num_clients must be at least 1");
  if (!(sharing_fraction >= 0 && sharing_fraction <= 1)) fail("shared.sharing_fraction must be in [0, 1]");
  if (!(clients.speed_factor_min > 0) || clients.speed_factor_max < clients.speed_factor_min)
    fail("clients: need 0 < speed_factor_min <= speed_factor_max");
  if (!(clients.dropout_prob >= 0 && clients.dropout_prob <= 1)) fail("clients.dropout_prob must be in [0, 1]");
  if (partition.skew == SkewKind::Dirichlet && !(partition.alpha > 0)) fail("partition.alpha must be positive");
  try {
    round.validate(partition.num_clients);
  } catch (const Error& e) {
    fail(std::string("round: ") + e.what());
  }
  for (const auto& [name, spec] : models)
    if (spec.num_classes != num_classes())
      fail("models." + name + ": num_classes " + std::to_string(spec.num_classes) + " does not match the data's " +
           std::to_string(num_classes()));
  if (strategies.empty()) fail("strategies: at least one strategy is required");
  std::set<std::string> labels;
  for (const auto& s : strategies) {
    if (!labels.insert(s.label()).second) fail("strategies: duplicate name '" + s.label() + "'");
    s.validate(&model_spec(model));
  }
  std::size_t assigned = 0;
  for (const auto& a : fd_models) {
    model_spec(a.model);
    assigned += a.count;
  }
  if (!fd_models.empty() && assigned != partition.num_clients)
    fail("fd_models assigns " + std::to_string(assigned) + " clients, partition has " +
         std::to_string(partition.num_clients));
  for (auto k : sweep_ks)
    if (k < 1 || k > partition.num_clients) fail("sweep_ks: K = " + std::to_string(k) + " outside [1, num_clients]");
  if (data.source == "synthetic" && models.count(model) && model_spec(model).input_size() != data.synthetic.dim)
    fail("models." + model + ": input size does not match data.synthetic.dim");
}

inline ExperimentConfig config_from_json(const json& j) {
  using detail::ObjectReader;
  ObjectReader r(j, "");
  if (r.require<std::string>("schema") != kConfigSchema)
    throw ConfigError(std::string("schema must be '") + kConfigSchema + "'");
  ExperimentConfig c;
  c.seed = r.require<std::uint64_t>("seed");

  if (const json* d = r.child("data")) {
    ObjectReader dr(*d, "data");
    c.data.source = dr.get<std::string>("source", c.data.source);
    c.data.csv_path = dr.get<std::string>("csv_path", c.data.csv_path);
    if (const json* csv = dr.child("csv")) {
      ObjectReader cr(*csv, "data.csv");
      c.data.csv_schema.activity_labels = cr.get("activity_labels", c.data.csv_schema.activity_labels);
      c.data.csv_schema.sample_rate_hz = cr.get<int>("sample_rate_hz", c.data.csv_schema.sample_rate_hz);
      c.data.window_seconds = cr.get<double>("window_seconds", c.data.window_seconds);
      c.data.stride_seconds = cr.get<double>("stride_seconds", c.data.stride_seconds);
      cr.finish();
    }
    if (const json* s = dr.child("synthetic")) {
      ObjectReader sr(*s, "data.synthetic");
      auto& sy = c.data.synthetic;
      sy.num_classes = sr.get<std::size_t>("num_classes", sy.num_classes);
      sy.samples_per_class = sr.get<std::size_t>("samples_per_class", sy.samples_per_class);
      sy.dim = sr.get<std::size_t>("dim", sy.dim);
      sy.sigma = sr.get<double>("sigma", sy.sigma);
      sy.separation = sr.get<double>("separation", sy.separation);
      sy.num_subjects = sr.get<std::size_t>("num_subjects", sy.num_subjects);
      sy.subject_shift = sr.get<double>("subject_shift", sy.subject_shift);
      sy.swap_prob = sr.get<double>("swap_prob", sy.swap_prob);
      sr.finish();
    }
    dr.finish();
  }
  if (const json* p = r.child("partition")) {
    ObjectReader pr(*p, "partition");
    c.partition.num_clients = pr.get<std::size_t>("num_clients", c.partition.num_clients);
    c.partition.per_client_train = pr.get<std::size_t>("per_client_train", c.partition.per_client_train);
    c.partition.per_client_test = pr.get<std::size_t>("per_client_test", c.partition.per_client_test);
    const auto skew = pr.get<std::string>("skew", "random-counts");
    if (skew == "random-counts") c.partition.skew = SkewKind::RandomCounts;
    else if (skew == "dirichlet") c.partition.skew = SkewKind::Dirichlet;
    else throw ConfigError("partition.skew must be 'random-counts' or 'dirichlet'");
    c.partition.alpha = pr.get<double>("alpha", c.partition.alpha);
    pr.finish();
  }
  if (const json* s = r.child("shared")) {
    ObjectReader sr(*s, "shared");
    c.shared_size = sr.get<std::size_t>("size", c.shared_size);
    c.shared_balanced = sr.get<bool>("balanced", c.shared_balanced);
    c.sharing_fraction = sr.get<double>("sharing_fraction", c.sharing_fraction);
    sr.finish();
  }
  const json* models = r.child("models");
  if (!models || !models->is_object() || models->empty()) throw ConfigError("models: at least one model is required");
  for (const auto& [name, spec] : models->items()) c.models[name] = model_spec_from_json(spec, "models." + name);
  c.model = r.get<std::string>("model", c.model);
  if (const json* fd = r.child("fd_models")) {
    if (!fd->is_array()) throw ConfigError("fd_models: expected an array");
    for (std::size_t i = 0; i < fd->size(); ++i) {
      ObjectReader ar((*fd)[i], "fd_models." + std::to_string(i));
      c.fd_models.push_back({ar.require<std::string>("model"), ar.require<std::size_t>("count")});
      ar.finish();
    }
  }
  if (const json* cl = r.child("clients")) {
    ObjectReader cr(*cl, "clients");
    c.clients.speed_factor_min = cr.get<double>("speed_factor_min", c.clients.speed_factor_min);
    c.clients.speed_factor_max = cr.get<double>("speed_factor_max", c.clients.speed_factor_max);
    c.clients.dropout_prob = cr.get<double>("dropout_prob", c.clients.dropout_prob);
    cr.finish();
  }
  if (const json* rd = r.child("round")) {
    ObjectReader rr(*rd, "round");
    c.round.K = rr.get<std::size_t>("K", c.round.K);
    c.round.local_epochs = rr.get<std::size_t>("local_epochs", c.round.local_epochs);
    c.round.batch_size = rr.get<std::size_t>("batch_size", c.round.batch_size);
    c.round.lr = rr.get<double>("lr", c.round.lr);
    c.round.server_seconds_per_scalar = rr.get<double>("server_seconds_per_scalar", c.round.server_seconds_per_scalar);
    rr.finish();
  }
  c.rounds = r.get<std::size_t>("rounds", c.rounds);
  c.repeat_count = r.get<std::size_t>("repeat_count", c.repeat_count);
  const json* strategies = r.child("strategies");
  if (!strategies || !strategies->is_array()) throw ConfigError("strategies: expected an array");
  for (std::size_t i = 0; i < strategies->size(); ++i)
    c.strategies.push_back(strategy_from_json((*strategies)[i], "strategies." + std::to_string(i)));
  c.sweep_ks = r.get("sweep_ks", c.sweep_ks);
  c.output_dir = r.get<std::string>("output_dir", c.output_dir);
  r.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Overrides

/// Replaces the value at dotted `key` (array elements by index, e.g.
/// `strategies.1.epochs`) in a canonical config document. The key must
/// already exist and `value` must parse to the existing value's type.
inline void apply_override(json& doc, const std::string& key, const std::string& value) {
  json* node = &doc;
  std::string part;
  std::istringstream parts(key);
  while (std::getline(parts, part, '.')) {
    if (node->is_object()) {
      if (!node->contains(part)) throw ConfigError("override " + key + ": no such key");
      node = &(*node)[part];
    } else if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(part, &used);
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw ConfigError("override " + key + ": '" + part + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override " + key + ": index " + part + " out of range");
      node = &(*node)[idx];
    } else {
      throw ConfigError("override " + key + ": no such key");
    }
  }
  auto bad = [&](const char* expected) {
    return ConfigError("override " + key + ": expected " + expected + ", got '" + value + "'");
  };
  try {
    std::size_t used = 0;
    switch (node->type()) {
      case json::value_t::number_unsigned: {
        if (value.empty() || value[0] == '-') throw bad("unsigned integer");
        const auto v = std::stoull(value, &used);
        if (used != value.size()) throw bad("unsigned integer");
        *node = v;
        break;
      }
      case json::value_t::number_integer: {
        const auto v = std::stoll(value, &used);
        if (used != value.size()) throw bad("integer");
        *node = v;
        break;
      }
      case json::value_t::number_float: {
        const auto v = std::stod(value, &used);
        if (used != value.size()) throw bad("real number");
        *node = v;
        break;
      }
      case json::value_t::boolean:
        if (value == "true") *node = true;
        else if (value == "false") *node = false;
        else throw bad("boolean");
        break;
      case json::value_t::string:
        *node = value;
        break;
      default:
        *node = json::parse(value);
        break;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    const char* expected = node->is_number_unsigned() ? "unsigned integer"
                           : node->is_number_integer() ? "integer"
                           : node->is_number_float()   ? "real number"
                                                       : "JSON value";
    throw bad(expected);
  }
}

inline ExperimentConfig override(const ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  json doc = to_json(cfg);
  apply_override(doc, key, value);
  return config_from_json(doc);
}

}  // namespace perfit
