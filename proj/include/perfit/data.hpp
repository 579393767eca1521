#pragma once

// Per-client dataset construction: HAR windowing, a synthetic stand-in for
// recorded activity data, non-IID partitioning, the shared public set and
// data-sharing augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "perfit/errors.hpp"
#include "perfit/rng.hpp"
#include "perfit/sample.hpp"

namespace perfit {

inline constexpr std::size_t kImuChannels = 6;  // ax ay az gx gy gz

struct RawRecording {
  std::string subject;
  int activity = 0;
  int trial = 0;
  int sample_rate_hz = 0;
  std::array<std::vector<double>, kImuChannels> channels;

  std::size_t length() const { return channels[0].size(); }

  friend bool operator==(const RawRecording&, const RawRecording&) = default;
};

// A pool of labeled samples. `source_index` maps each sample back to its
// position in the pool it was drawn from (identity for a freshly built pool).
struct LabeledSet {
  std::vector<Sample> samples;
  std::vector<std::size_t> source_index;
  std::size_t num_classes = 10;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  std::size_t feature_dim() const {
    if (samples.empty()) return 0;
    const std::size_t dim = samples.front().features.size();
    for (const auto& s : samples)
      if (s.features.size() != dim)
        throw Error("mixed feature dimensions in labeled set (" + std::to_string(dim) + " and " +
                    std::to_string(s.features.size()) + ")");
    return dim;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& s : samples) counts.at(static_cast<std::size_t>(s.label))++;
    return counts;
  }

  static LabeledSet from_samples(std::vector<Sample> samples, std::size_t num_classes) {
    LabeledSet set{std::move(samples), {}, num_classes};
    set.source_index.resize(set.samples.size());
    std::iota(set.source_index.begin(), set.source_index.end(), std::size_t{0});
    return set;
  }
};

struct ClientDataset {
  std::size_t client_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::vector<std::size_t> train_index;  // pool indices
  std::vector<std::size_t> test_index;
  std::size_t shared_added = 0;          // trailing train samples copied from the shared set
};

// ---------------------------------------------------------------------------
// Windowing

/// Slices a recording into windows of window_seconds, advancing by
/// stride_seconds. Features are channel-major: all ax samples of the window,
/// then ay, az, gx, gy, gz. Recordings shorter than one window yield nothing.
inline std::vector<Sample> window_features(const RawRecording& rec, double window_seconds = 1.0,
                                           double stride_seconds = 1.0) {
  for (const auto& ch : rec.channels)
    if (ch.size() != rec.length())
      throw Error("recording " + rec.subject + "/" + std::to_string(rec.activity) + "/" + std::to_string(rec.trial) +
                  ": channel lengths differ");
  if (rec.sample_rate_hz <= 0) throw Error("recording sample rate must be positive");
  if (!(window_seconds > 0) || !(stride_seconds > 0)) throw Error("window and stride must be positive");
  const auto win = static_cast<std::size_t>(std::llround(window_seconds * rec.sample_rate_hz));
  const auto stride = static_cast<std::size_t>(std::llround(stride_seconds * rec.sample_rate_hz));
  if (win == 0 || stride == 0) throw Error("window or stride shorter than one sample");

  std::vector<Sample> out;
  for (std::size_t start = 0; start + win <= rec.length(); start += stride) {
    Sample s;
    s.label = rec.activity;
    s.features.reserve(kImuChannels * win);
    for (const auto& ch : rec.channels)
      s.features.insert(s.features.end(), ch.begin() + static_cast<std::ptrdiff_t>(start),
                        ch.begin() + static_cast<std::ptrdiff_t>(start + win));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic HAR-like pool

struct SynthConfig {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 100;  // per subject
  std::size_t dim = 64;
  double sigma = 2.0;                   // isotropic within-cluster noise
  double separation = 1.0;              // scale of the class means
  std::size_t num_subjects = 1;
  double subject_shift = 0.0;           // scale of per-(subject, class) mean offsets
  double swap_prob = 0.0;               // chance a subject performs two activities "the other way round"
  std::uint64_t seed = 0;
};

/// Gaussian class clusters. Class c has mean separation * m_c with m_c drawn
/// from N(0, I). Each subject s perturbs the mean of every class by
/// subject_shift * N(0, I), and with probability swap_prob exchanges the means
/// of one random pair of classes (label-conditional concept shift). Samples add
/// sigma * N(0, I). Layout: subject-major, then class, then sample.
inline LabeledSet synth_har(const SynthConfig& cfg) {
  if (cfg.dim < 2) throw Error("synth_har: dim must be at least 2");
  if (cfg.num_classes < 2) throw Error("synth_har: need at least two classes");
  if (cfg.num_subjects == 0) throw Error("synth_har: need at least one subject");
  if (cfg.sigma < 0 || cfg.subject_shift < 0) throw Error("synth_har: noise scales must be non-negative");

  std::vector<std::vector<double>> means(cfg.num_classes, std::vector<double>(cfg.dim));
  Rng mean_rng(derive_seed(cfg.seed, "class-means"));
  for (auto& m : means)
    for (auto& v : m) v = cfg.separation * mean_rng.normal();

  std::vector<Sample> samples;
  samples.reserve(cfg.num_subjects * cfg.num_classes * cfg.samples_per_class);
  for (std::size_t s = 0; s < cfg.num_subjects; ++s) {
    Rng subject_rng(derive_seed(cfg.seed, "subject", s));
    std::vector<std::size_t> perm(cfg.num_classes);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (cfg.num_subjects > 1 && subject_rng.bernoulli(cfg.swap_prob)) {
      const auto a = subject_rng.below(cfg.num_classes);
      auto b = subject_rng.below(cfg.num_classes - 1);
      if (b >= a) ++b;
      std::swap(perm[a], perm[b]);
    }
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      std::vector<double> mean = means[perm[c]];
      if (cfg.num_subjects > 1)
        for (auto& v : mean) v += cfg.subject_shift * subject_rng.normal();
      Rng noise(derive_seed(cfg.seed, "noise", s, c));
      for (std::size_t k = 0; k < cfg.samples_per_class; ++k) {
        Sample sample;
        sample.label = static_cast<int>(c);
        sample.subject = static_cast<int>(s);
        sample.features.resize(cfg.dim);
        for (std::size_t d = 0; d < cfg.dim; ++d) sample.features[d] = mean[d] + cfg.sigma * noise.normal();
        samples.push_back(std::move(sample));
      }
    }
  }
  return LabeledSet::from_samples(std::move(samples), cfg.num_classes);
}

// ---------------------------------------------------------------------------
// Partitioning

enum class SkewKind { RandomCounts, Dirichlet };

struct PartitionPlan {
  std::size_t num_clients = 30;
  std::size_t per_client_train = 480;
  std::size_t per_client_test = 160;
  SkewKind skew = SkewKind::RandomCounts;
  double alpha = 1.0;  // Dirichlet concentration; +inf gives exactly uniform proportions
  std::uint64_t seed = 0;
};

// Uniformly random composition of n into k non-negative parts (stars and bars).
inline std::vector<std::size_t> random_composition(std::size_t n, std::size_t k, Rng& rng) {
  if (k == 0) throw Error("random_composition: zero parts");
  std::vector<std::size_t> slots(n + k - 1);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  for (std::size_t i = 0; i + 1 < k; ++i) {  // partial Fisher-Yates: choose k-1 bar positions
    const auto j = i + static_cast<std::size_t>(rng.below(slots.size() - i));
    std::swap(slots[i], slots[j]);
  }
  std::vector<std::size_t> bars(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(k - 1));
  std::sort(bars.begin(), bars.end());
  std::vector<std::size_t> parts(k);
  std::size_t prev = 0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    parts[i] = bars[i] - prev;
    prev = bars[i] + 1;
  }
  parts[k - 1] = n + k - 1 - prev;
  return parts;
}

// Integer counts summing to n from Dirichlet(alpha) proportions, rounded by
// largest remainder (ties to the lower class).
inline std::vector<std::size_t> dirichlet_counts(std::size_t n, std::size_t k, double alpha, Rng& rng) {
  if (!(alpha > 0)) throw Error("dirichlet alpha must be positive");
  std::vector<double> w(k, 1.0);
  if (std::isfinite(alpha))
    for (auto& v : w) v = rng.gamma(alpha);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<std::size_t> counts(k);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double exact = static_cast<double>(n) * w[c] / total;
    counts[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[c];
    rem.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) counts[rem[i % k].second]++;
  return counts;
}

namespace detail {

inline bool pool_has_subjects(const LabeledSet& pool, std::size_t needed, std::vector<int>& subjects) {
  std::set<int> ids;
  for (const auto& s : pool.samples) {
    if (s.subject < 0) return false;
    ids.insert(s.subject);
  }
  subjects.assign(ids.begin(), ids.end());
  return subjects.size() >= needed;
}

}  // namespace detail

/// Splits a pool into per-client train/test sets.
///
/// When every pool sample carries a subject id and there are at least
/// num_clients subjects, client i draws only from the i-th smallest subject
/// (clients are people, as in a volunteer study). Otherwise all clients draw
/// from the whole pool. Train class counts follow the plan's skew; test sets
/// hold per_client_test / num_classes samples of every class. Samples are
/// drawn without replacement, so no pool index appears twice.
inline std::vector<ClientDataset> partition(const LabeledSet& pool, const PartitionPlan& plan) {
  const std::size_t classes = pool.num_classes;
  if (plan.num_clients == 0) throw Error("partition: num_clients must be positive");
  if (plan.per_client_test % classes != 0)
    throw Error("partition: per_client_test " + std::to_string(plan.per_client_test) +
                " is not divisible by the number of classes " + std::to_string(classes));
  pool.feature_dim();  // rejects mixed pools

  std::vector<int> subjects;
  const bool by_subject = detail::pool_has_subjects(pool, plan.num_clients, subjects);
  const std::size_t groups = by_subject ? plan.num_clients : 1;
  std::map<int, std::size_t> group_of_subject;
  if (by_subject)
    for (std::size_t g = 0; g < groups; ++g) group_of_subject[subjects[g]] = g;

  // available[group][class] = shuffled pool indices
  std::vector<std::vector<std::vector<std::size_t>>> available(groups, std::vector<std::vector<std::size_t>>(classes));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& s = pool.samples[i];
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes)
      throw Error("partition: pool sample " + std::to_string(i) + " has label " + std::to_string(s.label));
    std::size_t g = 0;
    if (by_subject) {
      auto it = group_of_subject.find(s.subject);
      if (it == group_of_subject.end()) continue;
      g = it->second;
    }
    available[g][static_cast<std::size_t>(s.label)].push_back(i);
  }
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t c = 0; c < classes; ++c) {
      Rng rng(derive_seed(plan.seed, "pool-order", g, c));
      rng.shuffle(available[g][c]);
    }

  const std::size_t test_per_class = plan.per_client_test / classes;
  std::vector<std::vector<std::size_t>> train_counts(plan.num_clients);
  for (std::size_t k = 0; k < plan.num_clients; ++k) {
    Rng rng(derive_seed(plan.seed, "composition", k));
    train_counts[k] = plan.skew == SkewKind::RandomCounts
                          ? random_composition(plan.per_client_train, classes, rng)
                          : dirichlet_counts(plan.per_client_train, classes, plan.alpha, rng);
  }

  // Check feasibility before drawing anything.
  std::vector<std::vector<std::size_t>> demand(groups, std::vector<std::size_t>(classes, 0));
  for (std::size_t k = 0; k < plan.num_clients; ++k)
    for (std::size_t c = 0; c < classes; ++c) demand[by_subject ? k : 0][c] += train_counts[k][c] + test_per_class;
  std::ostringstream shortfall;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t c = 0; c < classes; ++c)
      if (demand[g][c] > available[g][c].size()) {
        shortfall << (shortfall.tellp() > 0 ? "; " : "");
        if (by_subject) shortfall << "client " << g << " (subject " << subjects[g] << ") ";
        shortfall << "class " << c << " short by " << demand[g][c] - available[g][c].size();
      }
  if (shortfall.tellp() > 0) throw Error("partition: insufficient pool: " + shortfall.str());

  std::vector<std::vector<std::size_t>> cursor(groups, std::vector<std::size_t>(classes, 0));
  auto take = [&](std::size_t g, std::size_t c) { return available[g][c][cursor[g][c]++]; };

  std::vector<ClientDataset> clients(plan.num_clients);
  for (std::size_t k = 0; k < plan.num_clients; ++k) {
    auto& client = clients[k];
    client.client_id = k;
    const std::size_t g = by_subject ? k : 0;
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t j = 0; j < test_per_class; ++j) client.test_index.push_back(take(g, c));
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t j = 0; j < train_counts[k][c]; ++j) client.train_index.push_back(take(g, c));
    std::sort(client.train_index.begin(), client.train_index.end());
    std::sort(client.test_index.begin(), client.test_index.end());
    for (auto i : client.train_index) client.train.push_back(pool.samples[i]);
    for (auto i : client.test_index) client.test.push_back(pool.samples[i]);
  }
  return clients;
}

/// Pool samples not used by any client, with source_index pointing into `pool`.
inline LabeledSet remainder(const LabeledSet& pool, const std::vector<ClientDataset>& clients) {
  std::vector<char> used(pool.size(), 0);
  for (const auto& c : clients) {
    for (auto i : c.train_index) used.at(i) = 1;
    for (auto i : c.test_index) used.at(i) = 1;
  }
  LabeledSet rest{{}, {}, pool.num_classes};
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!used[i]) {
      rest.samples.push_back(pool.samples[i]);
      rest.source_index.push_back(pool.source_index.empty() ? i : pool.source_index[i]);
    }
  return rest;
}

/// Draws the public set used for distillation and data sharing. Balanced
/// sets take size / num_classes per class (the remainder goes to the lowest
/// classes). The result keeps the pool's source indices, in ascending order.
inline LabeledSet build_shared_set(const LabeledSet& pool, std::size_t size, bool balanced, std::uint64_t seed) {
  const std::size_t classes = pool.num_classes;
  std::vector<std::size_t> chosen;
  Rng rng(derive_seed(seed, "shared-set"));
  if (balanced) {
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < pool.size(); ++i) by_class.at(static_cast<std::size_t>(pool.samples[i].label)).push_back(i);
    std::ostringstream shortfall;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t want = size / classes + (c < size % classes ? 1 : 0);
      if (by_class[c].size() < want) {
        shortfall << (shortfall.tellp() > 0 ? "; " : "") << "class " << c << " short by " << want - by_class[c].size();
        continue;
      }
      rng.shuffle(by_class[c]);
      chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(want));
    }
    if (shortfall.tellp() > 0) throw Error("build_shared_set: insufficient pool: " + shortfall.str());
  } else {
    if (pool.size() < size)
      throw Error("build_shared_set: pool has " + std::to_string(pool.size()) + " samples, need " + std::to_string(size));
    std::vector<std::size_t> all(pool.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    rng.shuffle(all);
    chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(size));
  }
  std::sort(chosen.begin(), chosen.end());
  LabeledSet shared{{}, {}, classes};
  for (auto i : chosen) {
    shared.samples.push_back(pool.samples[i]);
    shared.source_index.push_back(pool.source_index.empty() ? i : pool.source_index[i]);
  }
  return shared;
}

/// Appends floor(fraction * |global|) shared samples, drawn without
/// replacement per client, to every client's train set. Test sets are untouched.
inline std::vector<ClientDataset> apply_data_sharing(std::vector<ClientDataset> clients, double fraction,
                                                     const LabeledSet& global_set, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw Error("apply_data_sharing: fraction " + std::to_string(fraction) + " outside [0, 1]");
  const auto counts = global_set.class_counts();
  if (!global_set.empty() && *std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) > 1)
    throw Error("apply_data_sharing: shared set is not class-balanced");
  const auto m = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(global_set.size())));
  if (m == 0) return clients;
  for (auto& client : clients) {
    std::vector<std::size_t> order(global_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "data-sharing", client.client_id));
    rng.shuffle(order);
    order.resize(m);
    std::sort(order.begin(), order.end());
    for (auto i : order) client.train.push_back(global_set.samples[i]);
    client.shared_added += m;
  }
  return clients;
}

// Shannon entropy (nats) of the empirical label distribution.
inline double label_entropy(const std::vector<Sample>& samples, std::size_t classes) {
  if (samples.empty()) return 0.0;
  std::vector<double> counts(classes, 0.0);
  for (const auto& s : samples) counts.at(static_cast<std::size_t>(s.label)) += 1.0;
  double h = 0.0;
  for (double c : counts)
    if (c > 0) {
      const double p = c / static_cast<double>(samples.size());
      h -= p * std::log(p);
    }
  return h;
}

/// JSON manifest: client_id -> pool indices, plus the shared set's indices.
inline nlohmann::json partition_manifest(const std::vector<ClientDataset>& clients, const LabeledSet* shared = nullptr) {
  nlohmann::json j;
  j["schema"] = "perfed/partition/v1";
  j["clients"] = nlohmann::json::array();
  for (const auto& c : clients)
    j["clients"].push_back({{"client_id", c.client_id}, {"train", c.train_index}, {"test", c.test_index},
                            {"shared_added", c.shared_added}});
  if (shared) j["shared"] = shared->source_index;
  return j;
}

// ---------------------------------------------------------------------------
// CSV ingestion. One row per timestep:
//   subject,activity,trial,t,ax,ay,az,gx,gy,gz

struct CsvSchema {
  std::vector<std::string> activity_labels{"STD", "WAL", "JOG", "JUM", "STU", "STN", "SCH", "CSI", "CSO", "FALL"};
  int sample_rate_hz = 200;
};

inline constexpr const char* kCsvHeader = "subject,activity,trial,t,ax,ay,az,gx,gy,gz";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

inline double parse_real(const std::string& text, std::size_t line_no, const char* column) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error("line " + std::to_string(line_no) + ": column " + column + ": '" + text + "' is not a finite number");
  }
}

}  // namespace detail

inline std::vector<RawRecording> read_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) return {};
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw Error("line 1: expected header '" + std::string(kCsvHeader) + "'");

  std::vector<RawRecording> recs;
  std::map<std::tuple<std::string, int, int>, std::size_t> group;
  static constexpr const char* kColumns[] = {"subject", "activity", "trial", "t", "ax", "ay", "az", "gx", "gy", "gz"};
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 10)
      throw Error("line " + std::to_string(line_no) + ": expected 10 fields, got " + std::to_string(f.size()));
    const auto it = std::find(schema.activity_labels.begin(), schema.activity_labels.end(), f[1]);
    if (it == schema.activity_labels.end())
      throw Error("line " + std::to_string(line_no) + ": unknown activity label '" + f[1] + "'");
    const int activity = static_cast<int>(it - schema.activity_labels.begin());
    const double trial = detail::parse_real(f[2], line_no, kColumns[2]);
    if (trial != std::floor(trial)) throw Error("line " + std::to_string(line_no) + ": trial must be an integer");
    detail::parse_real(f[3], line_no, kColumns[3]);
    const auto key = std::make_tuple(f[0], activity, static_cast<int>(trial));
    auto [pos, inserted] = group.try_emplace(key, recs.size());
    if (inserted) {
      RawRecording r;
      r.subject = f[0];
      r.activity = activity;
      r.trial = static_cast<int>(trial);
      r.sample_rate_hz = schema.sample_rate_hz;
      recs.push_back(std::move(r));
    }
    auto& rec = recs[pos->second];
    for (std::size_t ch = 0; ch < kImuChannels; ++ch)
      rec.channels[ch].push_back(detail::parse_real(f[4 + ch], line_no, kColumns[4 + ch]));
  }
  return recs;
}

inline std::vector<RawRecording> load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_csv(in, schema);
}

inline void write_csv(std::ostream& out, const std::vector<RawRecording>& recs, const CsvSchema& schema) {
  out << kCsvHeader << '\n';
  char buf[32];
  auto real = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : recs) {
    const auto label = schema.activity_labels.at(static_cast<std::size_t>(r.activity));
    for (std::size_t t = 0; t < r.length(); ++t) {
      out << r.subject << ',' << label << ',' << r.trial << ',' << real(static_cast<double>(t) / r.sample_rate_hz);
      for (const auto& ch : r.channels) out << ',' << real(ch[t]);
      out << '\n';
    }
  }
}

inline void write_csv(const std::string& path, const std::vector<RawRecording>& recs, const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_csv(out, recs, schema);
}

/// Windows every recording and tags samples with a dense subject index
/// (subjects numbered in order of first appearance).
inline LabeledSet recordings_to_pool(const std::vector<RawRecording>& recs, std::size_t num_classes,
                                     double window_seconds = 1.0, double stride_seconds = 1.0) {
  std::map<std::string, int> subject_ids;
  std::vector<Sample> samples;
  for (const auto& r : recs) {
    const auto [it, inserted] = subject_ids.try_emplace(r.subject, static_cast<int>(subject_ids.size()));
    for (auto& s : window_features(r, window_seconds, stride_seconds)) {
      s.subject = it->second;
      samples.push_back(std::move(s));
    }
  }
  auto pool = LabeledSet::from_samples(std::move(samples), num_classes);
  pool.feature_dim();
  return pool;
}

// Pool export: label,subject,f0..f{dim-1}.
inline void write_pool_csv(std::ostream& out, const LabeledSet& pool) {
  const std::size_t dim = pool.feature_dim();
  out << "label,subject";
  for (std::size_t d = 0; d < dim; ++d) out << ",f" << d;
  out << '\n';
  char buf[32];
  for (const auto& s : pool.samples) {
    out << s.label << ',' << s.subject;
    for (double v : s.features) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace perfit
