#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "blendfl/data.hpp"
#include "blendfl/errors.hpp"
#include "blendfl/orchestrator.hpp"

namespace blendfl {

/// Everything one experiment needs. Each seed in `seeds` is the root of the named
/// substreams data, holdout, partition, init, shuffle and vertical.
struct ExperimentConfig {
  SyntheticSpec data;
  double validation_fraction = 0.1;
  double test_fraction = 0.2;
  PartitionSpec partition;
  std::size_t latent_dim = 8;
  std::size_t encoder_hidden_layers = 0;
  ProtocolConfig protocol;
  double target = 0.9;  // validation score that counts as converged
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds = {0};

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// ---------------------------------------------------------------------------
// Enum spellings

inline std::optional<Protocol> parse_protocol(const std::string& s) {
  if (s == "blendfl") return Protocol::BlendFL;
  if (s == "fedavg") return Protocol::FedAvg;
  if (s == "splitnn") return Protocol::SplitNN;
  return std::nullopt;
}

inline std::optional<AggregationStrategy> parse_aggregation(const std::string& s) {
  if (s == "blendavg") return AggregationStrategy::BlendAvg;
  if (s == "fedavg") return AggregationStrategy::FedAvg;
  return std::nullopt;
}

inline std::optional<ScoreMetric> parse_metric(const std::string& s) {
  if (s == "auroc") return ScoreMetric::Auroc;
  if (s == "accuracy") return ScoreMetric::Accuracy;
  return std::nullopt;
}

inline std::optional<PartitionLayout> parse_layout(const std::string& s) {
  if (s == "round_robin") return PartitionLayout::RoundRobin;
  if (s == "modality_split") return PartitionLayout::ModalitySplit;
  return std::nullopt;
}

inline const char* to_string(PartitionLayout l) {
  return l == PartitionLayout::RoundRobin ? "round_robin" : "modality_split";
}

inline std::optional<VerticalHeadPolicy> parse_vertical_head(const std::string& s) {
  if (s == "retain") return VerticalHeadPolicy::Retain;
  if (s == "sync") return VerticalHeadPolicy::SyncToBlended;
  if (s == "reinitialize") return VerticalHeadPolicy::Reinitialize;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// YAML config

namespace config_detail {

inline int line_of(const YAML::Node& n) { return n.Mark().is_null() ? 0 : n.Mark().line + 1; }

class Section {
 public:
  Section(const YAML::Node& node, std::string name, std::set<std::string> allowed)
      : node_(node), name_(std::move(name)) {
    if (!node_.IsMap()) throw ConfigError(line_of(node_), name_, "expected a mapping");
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!allowed.count(key)) throw ConfigError(line_of(kv.first), qualify(key), "unknown key");
    }
  }

  template <class T>
  void read(const std::string& key, T& out) const {
    const YAML::Node v = node_[key];
    if (!v) return;
    if (!v.IsScalar()) throw ConfigError(line_of(v), qualify(key), "expected a scalar");
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(line_of(v), qualify(key), "cannot parse '" + v.Scalar() + "'");
    }
  }

  template <class E>
  void read_enum(const std::string& key, E& out, std::optional<E> (*parse)(const std::string&)) const {
    std::string s;
    read(key, s);
    if (s.empty()) return;
    auto e = parse(s);
    if (!e) throw ConfigError(line(key), qualify(key), "unknown value '" + s + "'");
    out = *e;
  }

  int line(const std::string& key) const { return node_[key] ? line_of(node_[key]) : line_of(node_); }
  std::string qualify(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }
  YAML::Node child(const std::string& key) const { return node_[key]; }

 private:
  YAML::Node node_;
  std::string name_;
};

inline void require(bool ok, const Section& s, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(s.line(key), s.qualify(key), what);
}

}  // namespace config_detail

/// Parses and validates a config document. Every failure is a ConfigError naming the
/// offending line and field; unknown keys are rejected.
inline ExperimentConfig parse_config(const std::string& text) {
  using config_detail::require;
  using config_detail::Section;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(e.mark.line + 1, "", e.msg);
  }
  ExperimentConfig cfg;
  if (!root || root.IsNull()) return cfg;
  Section top(root, "", {"data", "split", "partition", "model", "protocol", "evaluation", "output_dir", "seeds"});

  if (auto n = top.child("data")) {
    Section s(n, "data", {"n_samples", "n_classes", "dim_a", "dim_b", "class_separation", "noise_std"});
    int n_samples = static_cast<int>(cfg.data.n_samples), n_classes = static_cast<int>(cfg.data.n_classes);
    int dim_a = static_cast<int>(cfg.data.dim_a), dim_b = static_cast<int>(cfg.data.dim_b);
    s.read("n_samples", n_samples);
    s.read("n_classes", n_classes);
    s.read("dim_a", dim_a);
    s.read("dim_b", dim_b);
    s.read("class_separation", cfg.data.class_separation);
    s.read("noise_std", cfg.data.noise_std);
    require(n_samples >= 1, s, "n_samples", "must be positive");
    require(n_classes >= 2, s, "n_classes", "must be at least 2");
    require(dim_a >= 2, s, "dim_a", "must be at least 2");
    require(dim_b >= 2, s, "dim_b", "must be at least 2");
    require(cfg.data.class_separation > 0 && std::isfinite(cfg.data.class_separation), s, "class_separation",
            "must be positive");
    require(cfg.data.noise_std > 0 && std::isfinite(cfg.data.noise_std), s, "noise_std", "must be positive");
    cfg.data.n_samples = static_cast<std::size_t>(n_samples);
    cfg.data.n_classes = static_cast<std::size_t>(n_classes);
    cfg.data.dim_a = static_cast<std::size_t>(dim_a);
    cfg.data.dim_b = static_cast<std::size_t>(dim_b);
  }
  if (auto n = top.child("split")) {
    Section s(n, "split", {"validation_fraction", "test_fraction"});
    s.read("validation_fraction", cfg.validation_fraction);
    s.read("test_fraction", cfg.test_fraction);
    require(cfg.validation_fraction > 0 && cfg.validation_fraction < 1, s, "validation_fraction", "must be in (0,1)");
    require(cfg.test_fraction > 0 && cfg.test_fraction < 1, s, "test_fraction", "must be in (0,1)");
    require(cfg.validation_fraction + cfg.test_fraction < 1, s, "test_fraction",
            "validation_fraction + test_fraction must be below 1");
  }
  if (auto n = top.child("partition")) {
    Section s(n, "partition", {"n_clients", "paired_fraction", "fragmented_fraction", "layout"});
    s.read("n_clients", cfg.partition.n_clients);
    s.read("paired_fraction", cfg.partition.paired_fraction);
    s.read("fragmented_fraction", cfg.partition.fragmented_fraction);
    s.read_enum("layout", cfg.partition.layout, parse_layout);
    require(cfg.partition.n_clients >= 1, s, "n_clients", "must be positive");
    require(cfg.partition.paired_fraction >= 0 && cfg.partition.paired_fraction <= 1, s, "paired_fraction",
            "must be in [0,1]");
    require(cfg.partition.fragmented_fraction >= 0 && cfg.partition.fragmented_fraction <= 1, s,
            "fragmented_fraction", "must be in [0,1]");
    require(cfg.partition.paired_fraction + cfg.partition.fragmented_fraction <= 1 + 1e-12, s, "fragmented_fraction",
            "paired_fraction + fragmented_fraction exceeds 1");
    require(cfg.partition.fragmented_fraction == 0 || cfg.partition.n_clients >= 2, s, "n_clients",
            "fragmented data needs at least two clients");
    require(cfg.partition.layout != PartitionLayout::ModalitySplit || cfg.partition.n_clients >= 3, s, "layout",
            "modality_split needs at least three clients");
  }
  if (auto n = top.child("model")) {
    Section s(n, "model", {"latent_dim", "encoder_hidden_layers"});
    int latent = static_cast<int>(cfg.latent_dim), hidden = static_cast<int>(cfg.encoder_hidden_layers);
    s.read("latent_dim", latent);
    s.read("encoder_hidden_layers", hidden);
    require(latent >= 1, s, "latent_dim", "must be positive");
    require(hidden >= 0, s, "encoder_hidden_layers", "must not be negative");
    cfg.latent_dim = static_cast<std::size_t>(latent);
    cfg.encoder_hidden_layers = static_cast<std::size_t>(hidden);
  }
  if (auto n = top.child("protocol")) {
    Section s(n, "protocol",
              {"name", "epochs", "lr", "batch_size", "local_epochs_per_round", "aggregation", "metric",
               "fragmented_in_unimodal", "paired_in_unimodal", "vertical_head", "parallel"});
    auto& p = cfg.protocol;
    int batch = static_cast<int>(p.batch_size);
    s.read_enum("name", p.protocol, parse_protocol);
    s.read("epochs", p.epochs);
    s.read("lr", p.lr);
    s.read("batch_size", batch);
    s.read("local_epochs_per_round", p.local_epochs_per_round);
    s.read_enum("aggregation", p.aggregation, parse_aggregation);
    s.read_enum("metric", p.metric, parse_metric);
    s.read("fragmented_in_unimodal", p.fragmented_in_unimodal);
    s.read("paired_in_unimodal", p.paired_in_unimodal);
    s.read_enum("vertical_head", p.vertical_head, parse_vertical_head);
    s.read("parallel", p.parallel);
    require(p.epochs >= 1, s, "epochs", "must be at least 1");
    require(p.lr > 0 && std::isfinite(p.lr), s, "lr", "must be positive");
    require(batch >= 1, s, "batch_size", "must be at least 1");
    require(p.local_epochs_per_round >= 1, s, "local_epochs_per_round", "must be at least 1");
    p.batch_size = static_cast<std::size_t>(batch);
  }
  if (auto n = top.child("evaluation")) {
    Section s(n, "evaluation", {"target"});
    s.read("target", cfg.target);
    require(cfg.target > 0.5 && cfg.target < 1.0, s, "target", "must be in (0.5, 1.0)");
  }
  top.read("output_dir", cfg.output_dir);
  require(!cfg.output_dir.empty(), top, "output_dir", "must not be empty");
  if (auto n = top.child("seeds")) {
    if (!n.IsSequence()) throw ConfigError(config_detail::line_of(n), "seeds", "expected a list");
    cfg.seeds.clear();
    for (const auto& v : n) {
      try {
        cfg.seeds.push_back(v.as<std::uint64_t>());
      } catch (const YAML::Exception&) {
        throw ConfigError(config_detail::line_of(v), "seeds", "cannot parse '" + v.Scalar() + "'");
      }
    }
    require(!cfg.seeds.empty(), top, "seeds", "must not be empty");
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(0, "", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical YAML text; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& c) {
  auto num = [](double v) { return format_double(v); };
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_samples" << YAML::Value << c.data.n_samples;
  out << YAML::Key << "n_classes" << YAML::Value << c.data.n_classes;
  out << YAML::Key << "dim_a" << YAML::Value << c.data.dim_a;
  out << YAML::Key << "dim_b" << YAML::Value << c.data.dim_b;
  out << YAML::Key << "class_separation" << YAML::Value << num(c.data.class_separation);
  out << YAML::Key << "noise_std" << YAML::Value << num(c.data.noise_std);
  out << YAML::EndMap;
  out << YAML::Key << "split" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "validation_fraction" << YAML::Value << num(c.validation_fraction);
  out << YAML::Key << "test_fraction" << YAML::Value << num(c.test_fraction);
  out << YAML::EndMap;
  out << YAML::Key << "partition" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "n_clients" << YAML::Value << c.partition.n_clients;
  out << YAML::Key << "paired_fraction" << YAML::Value << num(c.partition.paired_fraction);
  out << YAML::Key << "fragmented_fraction" << YAML::Value << num(c.partition.fragmented_fraction);
  out << YAML::Key << "layout" << YAML::Value << to_string(c.partition.layout);
  out << YAML::EndMap;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "latent_dim" << YAML::Value << c.latent_dim;
  out << YAML::Key << "encoder_hidden_layers" << YAML::Value << c.encoder_hidden_layers;
  out << YAML::EndMap;
  const auto& p = c.protocol;
  out << YAML::Key << "protocol" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << to_string(p.protocol);
  out << YAML::Key << "epochs" << YAML::Value << p.epochs;
  out << YAML::Key << "lr" << YAML::Value << num(p.lr);
  out << YAML::Key << "batch_size" << YAML::Value << p.batch_size;
  out << YAML::Key << "local_epochs_per_round" << YAML::Value << p.local_epochs_per_round;
  out << YAML::Key << "aggregation" << YAML::Value << to_string(p.aggregation);
  out << YAML::Key << "metric" << YAML::Value << to_string(p.metric);
  out << YAML::Key << "fragmented_in_unimodal" << YAML::Value << p.fragmented_in_unimodal;
  out << YAML::Key << "paired_in_unimodal" << YAML::Value << p.paired_in_unimodal;
  out << YAML::Key << "vertical_head" << YAML::Value << to_string(p.vertical_head);
  out << YAML::Key << "parallel" << YAML::Value << p.parallel;
  out << YAML::EndMap;
  out << YAML::Key << "evaluation" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "target" << YAML::Value << num(c.target);
  out << YAML::EndMap;
  out << YAML::Key << "output_dir" << YAML::Value << YAML::DoubleQuoted << c.output_dir;
  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << c.seeds;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Experiments

/// Generates, holds out and partitions the data for one root seed.
inline Federation build_federation(const ExperimentConfig& cfg, std::uint64_t seed) {
  SyntheticSpec spec = cfg.data;
  spec.seed = seed;
  const auto samples = generate_synthetic(spec);
  auto split = holdout_split(samples, cfg.validation_fraction, cfg.test_fraction, seed);
  PartitionSpec part = cfg.partition;
  part.seed = seed;
  Federation fed;
  fed.clients = partition(split.train, part);
  fed.validation = std::move(split.validation);
  fed.test = std::move(split.test);
  fed.arch = ModelArch{cfg.data.dim_a, cfg.data.dim_b, cfg.latent_dim, cfg.encoder_hidden_layers, cfg.data.n_classes};
  return fed;
}

/// 1-based round at which the multimodal validation score first reaches target.
inline std::optional<int> rounds_to_target(const std::vector<RoundReport>& reports, double target) {
  for (const auto& r : reports)
    if (r.validation_score(Head::Multimodal) >= target) return r.round;
  return std::nullopt;
}

inline RunResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RoundObserver& observer = {}) {
  ProtocolConfig p = cfg.protocol;
  p.seed = seed;
  return run_protocol(build_federation(cfg, seed), p, observer);
}

/// Turns "90/10", "0.9" or "90" into a paired share in [0,1].
inline double parse_ratio(const std::string& s) {
  double v = 0;
  const auto slash = s.find('/');
  try {
    std::size_t used = 0;
    if (slash != std::string::npos) {
      const std::string lhs = s.substr(0, slash), rhs = s.substr(slash + 1);
      std::size_t used_b = 0;
      const double a = std::stod(lhs, &used);
      const double b = std::stod(rhs, &used_b);
      if (used != lhs.size() || used_b != rhs.size() || !(a >= 0 && b >= 0 && a + b > 0)) throw ConfigError(0, "ratios", "bad ratio '" + s + "'");
      v = a / (a + b);
    } else {
      v = std::stod(s, &used);
      if (used != s.size()) throw ConfigError(0, "ratios", "bad ratio '" + s + "'");
      if (v > 1) v /= 100.0;
    }
  } catch (const std::logic_error&) {
    throw ConfigError(0, "ratios", "bad ratio '" + s + "'");
  }
  if (!(v >= 0 && v <= 1)) throw ConfigError(0, "ratios", "ratio '" + s + "' outside [0,1]");
  return v;
}

inline const std::vector<double> kDefaultRatios = {0.9, 0.7, 0.5, 0.3, 0.1};
inline const std::vector<int> kDefaultClientCounts = {4, 8, 12};

struct GridRow {
  Protocol protocol = Protocol::BlendFL;
  double ratio = 0;
  int n_clients = 0;
  std::uint64_t seed = 0;
  Head head = Head::Multimodal;
  HeadMetrics metrics;
  std::optional<int> rounds_to_target;
  std::optional<std::string> failure;
};

enum class Sweep { Ratio, Clients };

struct GridCell {
  Sweep sweep = Sweep::Ratio;
  double ratio = 0;  // paired share of the non-fragmented records
  int n_clients = 0;
};

/// Config for one cell: the ratio splits the non-fragmented share into paired and partial.
inline ExperimentConfig cell_config(const ExperimentConfig& base, const GridCell& cell, Protocol protocol) {
  ExperimentConfig c = base;
  c.protocol.protocol = protocol;
  c.partition.n_clients = cell.n_clients;
  c.partition.paired_fraction = cell.ratio * (1.0 - base.partition.fragmented_fraction);
  return c;
}

inline std::vector<GridCell> grid_cells(const ExperimentConfig& base, const std::vector<double>& ratios,
                                        const std::vector<int>& clients) {
  std::vector<GridCell> cells;
  const double base_ratio = base.partition.fragmented_fraction < 1
                                ? base.partition.paired_fraction / (1.0 - base.partition.fragmented_fraction)
                                : 0.0;
  for (double r : ratios) cells.push_back({Sweep::Ratio, r, base.partition.n_clients});
  for (int n : clients) cells.push_back({Sweep::Clients, base_ratio, n});
  return cells;
}

/// Runs every (cell, protocol, seed) combination. Failing runs become rows marked failed;
/// output order is cell, protocol, seed, head regardless of `parallel`.
inline std::vector<GridRow> run_ablation_grid(const ExperimentConfig& base, const std::vector<double>& ratios,
                                              const std::vector<int>& clients, bool parallel = false) {
  struct Job {
    GridCell cell;
    Protocol protocol;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& cell : grid_cells(base, ratios, clients))
    for (Protocol p : {Protocol::BlendFL, Protocol::FedAvg, Protocol::SplitNN})
      for (auto seed : base.seeds) jobs.push_back({cell, p, seed});

  auto run_job = [&base](const Job& j) {
    std::vector<GridRow> rows;
    const ExperimentConfig cfg = cell_config(base, j.cell, j.protocol);
    auto row = [&](Head h) {
      GridRow r;
      r.protocol = j.protocol;
      r.ratio = j.cell.ratio;
      r.n_clients = j.cell.n_clients;
      r.seed = j.seed;
      r.head = h;
      return r;
    };
    try {
      auto res = run_seed(cfg, j.seed);
      const auto rtt = rounds_to_target(res.reports, cfg.target);
      for (Head h : kAllHeads) {
        GridRow r = row(h);
        r.metrics = res.reports.back().test_metrics(h);
        if (h == Head::Multimodal) r.rounds_to_target = rtt;
        rows.push_back(r);
      }
    } catch (const Error& e) {
      for (Head h : kAllHeads) {
        GridRow r = row(h);
        r.failure = e.what();
        rows.push_back(r);
      }
    }
    return rows;
  };

  std::vector<std::vector<GridRow>> per_job(jobs.size());
  if (parallel) {
    std::vector<std::future<std::vector<GridRow>>> fs;
    for (const auto& j : jobs) fs.push_back(std::async(std::launch::async, run_job, j));
    for (std::size_t i = 0; i < fs.size(); ++i) per_job[i] = fs[i].get();
  } else {
    for (std::size_t i = 0; i < jobs.size(); ++i) per_job[i] = run_job(jobs[i]);
  }
  std::vector<GridRow> out;
  for (auto& rows : per_job) out.insert(out.end(), rows.begin(), rows.end());
  return out;
}

inline std::string format_ratio(double r) {
  const double pct = r * 100.0;
  if (std::abs(pct - std::round(pct)) < 1e-9) {
    const long p = std::lround(pct);
    return std::to_string(p) + "/" + std::to_string(100 - p);
  }
  return format_double(r);
}

namespace experiment_detail {

inline std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : "NaN"; }

}  // namespace experiment_detail

inline void write_grid_csv(std::ostream& os, const std::vector<GridRow>& rows) {
  using experiment_detail::csv_number;
  os << "protocol,ratio,n_clients,seed,head,auroc,auprc,rounds_to_target\n";
  for (const auto& r : rows) {
    os << to_string(r.protocol) << ',' << format_ratio(r.ratio) << ',' << r.n_clients << ',' << r.seed << ','
       << to_string(r.head) << ',';
    if (r.failure) {
      os << "failed,failed,";
    } else {
      os << csv_number(r.metrics.auroc) << ',' << csv_number(r.metrics.auprc) << ',';
    }
    if (r.rounds_to_target) {
      os << *r.rounds_to_target;
    } else if (r.head == Head::Multimodal && !r.failure) {
      os << "unreached";
    }
    os << '\n';
  }
}

struct SpeedupRow {
  int interval = 1;
  std::optional<double> rounds_fedavg;    // mean over seeds; empty if any seed missed the target
  std::optional<double> rounds_blendavg;
  std::optional<double> speedup() const {
    if (!rounds_fedavg || !rounds_blendavg) return std::nullopt;
    return *rounds_fedavg / *rounds_blendavg;
  }
};

/// Rounds to the validation target for the BlendFL protocol under one aggregation rule,
/// stopping at the first round that reaches it (at most `epochs` rounds).
inline std::optional<int> measure_rounds(const ExperimentConfig& base, std::uint64_t seed, int interval,
                                         AggregationStrategy strategy) {
  ExperimentConfig c = base;
  c.protocol.protocol = Protocol::BlendFL;
  c.protocol.aggregation = strategy;
  c.protocol.local_epochs_per_round = interval;
  auto res = run_seed(c, seed, [&](const RoundReport& r) { return !(r.validation_score(Head::Multimodal) >= c.target); });
  return rounds_to_target(res.reports, c.target);
}

inline double speedup_ratio(double rounds_fedavg, double rounds_blendavg) {
  if (!(rounds_fedavg > 0) || !(rounds_blendavg > 0)) throw RunError("round counts must be positive");
  return rounds_fedavg / rounds_blendavg;
}

inline std::vector<SpeedupRow> measure_speedup(const ExperimentConfig& base, const std::vector<int>& intervals,
                                               bool parallel = false) {
  std::vector<SpeedupRow> rows;
  for (int interval : intervals) {
    if (interval < 1) throw ConfigError(0, "intervals", "interval must be at least 1");
    auto mean_rounds = [&](AggregationStrategy s) -> std::optional<double> {
      std::vector<std::future<std::optional<int>>> fs;
      std::vector<std::optional<int>> got;
      for (auto seed : base.seeds) {
        if (parallel) {
          fs.push_back(std::async(std::launch::async, measure_rounds, std::cref(base), seed, interval, s));
        } else {
          got.push_back(measure_rounds(base, seed, interval, s));
        }
      }
      for (auto& f : fs) got.push_back(f.get());
      double sum = 0;
      for (const auto& g : got) {
        if (!g) return std::nullopt;
        sum += *g;
      }
      return sum / static_cast<double>(got.size());
    };
    rows.push_back({interval, mean_rounds(AggregationStrategy::FedAvg), mean_rounds(AggregationStrategy::BlendAvg)});
  }
  return rows;
}

inline void write_speedup_csv(std::ostream& os, const std::vector<SpeedupRow>& rows) {
  os << "interval,rounds_fedavg,rounds_blendavg,speedup\n";
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("unreached"); };
  for (const auto& r : rows)
    os << r.interval << ',' << cell(r.rounds_fedavg) << ',' << cell(r.rounds_blendavg) << ',' << cell(r.speedup())
       << '\n';
}

/// Final-round test metrics per head, one row per (seed, head).
inline void write_summary_csv(std::ostream& os, const std::vector<std::pair<std::uint64_t, RunResult>>& runs,
                              double target) {
  using experiment_detail::csv_number;
  os << "protocol,seed,rounds,head,validation,auroc,auprc,rounds_to_target\n";
  for (const auto& [seed, res] : runs) {
    if (res.reports.empty()) continue;
    const auto& last = res.reports.back();
    const auto rtt = rounds_to_target(res.reports, target);
    for (Head h : kAllHeads) {
      const auto m = last.test_metrics(h);
      os << last.protocol << ',' << seed << ',' << last.round << ',' << to_string(h) << ','
         << csv_number(last.validation_score(h)) << ',' << csv_number(m.auroc) << ',' << csv_number(m.auprc) << ',';
      if (h == Head::Multimodal) os << (rtt ? std::to_string(*rtt) : std::string("unreached"));
      os << '\n';
    }
  }
}

}  // namespace blendfl
