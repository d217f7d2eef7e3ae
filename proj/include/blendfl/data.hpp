#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "blendfl/bundle.hpp"
#include "blendfl/errors.hpp"
#include "blendfl/matrix.hpp"
#include "blendfl/rng.hpp"

namespace blendfl {

using SampleId = std::int64_t;
using ClientId = int;

struct MultimodalSample {
  SampleId id = 0;
  std::optional<std::vector<double>> x_a;
  std::optional<std::vector<double>> x_b;
  int label = 0;

  bool has(Modality m) const { return m == Modality::A ? x_a.has_value() : x_b.has_value(); }
  const std::vector<double>& features(Modality m) const { return m == Modality::A ? *x_a : *x_b; }
  bool paired() const { return x_a && x_b; }

  /// Copy carrying only modality m.
  MultimodalSample only(Modality m) const {
    MultimodalSample s{id, std::nullopt, std::nullopt, label};
    (m == Modality::A ? s.x_a : s.x_b) = features(m);
    return s;
  }

  friend bool operator==(const MultimodalSample&, const MultimodalSample&) = default;
};

using SampleSet = std::vector<MultimodalSample>;

enum class PartitionKind { Paired, FragmentedA, FragmentedB, PartialA, PartialB };

/// One client's holdings, split by how each sample's modalities are distributed.
struct ClientDataset {
  ClientId client_id = 0;
  SampleSet paired;
  SampleSet fragmented_a;
  SampleSet fragmented_b;
  SampleSet partial_a;
  SampleSet partial_b;

  SampleSet& fragmented(Modality m) { return m == Modality::A ? fragmented_a : fragmented_b; }
  const SampleSet& fragmented(Modality m) const { return m == Modality::A ? fragmented_a : fragmented_b; }
  SampleSet& partial(Modality m) { return m == Modality::A ? partial_a : partial_b; }
  const SampleSet& partial(Modality m) const { return m == Modality::A ? partial_a : partial_b; }

  SampleSet& of_kind(PartitionKind k) {
    switch (k) {
      case PartitionKind::Paired: return paired;
      case PartitionKind::FragmentedA: return fragmented_a;
      case PartitionKind::FragmentedB: return fragmented_b;
      case PartitionKind::PartialA: return partial_a;
      case PartitionKind::PartialB: return partial_b;
    }
    return paired;
  }

  std::size_t size() const {
    return paired.size() + fragmented_a.size() + fragmented_b.size() + partial_a.size() + partial_b.size();
  }
  bool empty() const { return size() == 0; }

  /// Whether this client holds any data of modality m (paired, fragmented or partial).
  bool holds(Modality m) const { return !paired.empty() || !fragmented(m).empty() || !partial(m).empty(); }

  /// Number of local records carrying modality m.
  std::size_t count(Modality m) const { return paired.size() + fragmented(m).size() + partial(m).size(); }

  friend bool operator==(const ClientDataset&, const ClientDataset&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  std::size_t n_samples = 500;
  std::size_t n_classes = 4;
  std::size_t dim_a = 8;
  std::size_t dim_b = 8;
  double class_separation = 3.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples < 1) throw DataError("n_samples must be positive");
    if (n_classes < 2) throw DataError("n_classes must be at least 2");
    if (dim_a < 2 || dim_b < 2) throw DataError("modality dimensions must be at least 2");
    if (!(class_separation > 0) || !std::isfinite(class_separation)) throw DataError("class_separation must be > 0");
    if (!(noise_std > 0) || !std::isfinite(noise_std)) throw DataError("noise_std must be > 0");
  }

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

namespace data_detail {

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Random class means rescaled so the closest pair sits exactly at `separation`.
inline std::vector<std::vector<double>> class_means(std::size_t k, std::size_t dim, double separation, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> means(k, std::vector<double>(dim));
  double min_dist = 0;
  do {
    for (auto& m : means)
      for (auto& v : m) v = normal(rng);
    min_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) min_dist = std::min(min_dist, distance(means[i], means[j]));
  } while (!(min_dist > 1e-9));
  const double scale = separation / min_dist * (1.0 + 1e-12);
  for (auto& m : means)
    for (auto& v : m) v *= scale;
  return means;
}

}  // namespace data_detail

/// Class-conditional Gaussian data with two independently noisy views of each class.
/// Labels are balanced (i mod k) and shuffled; ids are 0..n-1 in output order.
inline SampleSet generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, "data");
  const auto means_a = data_detail::class_means(spec.n_classes, spec.dim_a, spec.class_separation, rng);
  const auto means_b = data_detail::class_means(spec.n_classes, spec.dim_b, spec.class_separation, rng);

  std::vector<int> labels(spec.n_samples);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % spec.n_classes);
  shuffle_in_place(labels, rng);

  std::normal_distribution<double> noise(0.0, spec.noise_std);
  SampleSet out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    MultimodalSample s;
    s.id = static_cast<SampleId>(i);
    s.label = labels[i];
    std::vector<double> xa(means_a[labels[i]]), xb(means_b[labels[i]]);
    for (auto& v : xa) v += noise(rng);
    for (auto& v : xb) v += noise(rng);
    s.x_a = std::move(xa);
    s.x_b = std::move(xb);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning

enum class PartitionLayout {
  RoundRobin,     // every client may hold every kind of record
  ModalitySplit,  // clients cycle through roles: paired holder, modality-A holder, modality-B holder
};

struct PartitionSpec {
  int n_clients = 3;
  double paired_fraction = 0.5;
  double fragmented_fraction = 0.0;
  PartitionLayout layout = PartitionLayout::RoundRobin;
  std::uint64_t seed = 0;

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

struct PartitionCounts {
  std::size_t paired = 0;
  std::size_t fragmented = 0;
  std::size_t partial = 0;
};

inline PartitionCounts partition_counts(std::size_t n, double paired_fraction, double fragmented_fraction) {
  PartitionCounts c;
  c.paired = static_cast<std::size_t>(std::floor(paired_fraction * static_cast<double>(n) + 1e-9));
  c.fragmented = static_cast<std::size_t>(std::floor(fragmented_fraction * static_cast<double>(n) + 1e-9));
  if (c.paired + c.fragmented > n) c.fragmented = n - c.paired;
  c.partial = n - c.paired - c.fragmented;
  return c;
}

/// Distributes samples over clients as paired, fragmented and partial records.
inline std::vector<ClientDataset> partition(const SampleSet& samples, const PartitionSpec& spec) {
  const int n_clients = spec.n_clients;
  const double pf = spec.paired_fraction, ff = spec.fragmented_fraction;
  if (!(pf >= 0 && pf <= 1)) throw PartitionError("paired_fraction must be in [0,1]");
  if (!(ff >= 0 && ff <= 1)) throw PartitionError("fragmented_fraction must be in [0,1]");
  if (pf + ff > 1 + 1e-12) throw PartitionError("paired_fraction + fragmented_fraction exceeds 1");
  if (n_clients < 1) throw PartitionError("need at least one client");
  if (ff > 0 && n_clients < 2) throw PartitionError("fragmented data needs at least two clients");
  if (spec.layout == PartitionLayout::ModalitySplit && n_clients < 3)
    throw PartitionError("modality-split layout needs at least three clients");
  for (const auto& s : samples)
    if (!s.paired()) throw PartitionError("partition input must carry both modalities (id " + std::to_string(s.id) + ")");

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = make_rng(spec.seed, "partition");
  shuffle_in_place(order, rng);
  const auto counts = partition_counts(samples.size(), pf, ff);

  std::vector<ClientDataset> clients(static_cast<std::size_t>(n_clients));
  for (int c = 0; c < n_clients; ++c) clients[static_cast<std::size_t>(c)].client_id = c;

  // Role groups for the modality-split layout; round-robin uses every client for every role.
  std::vector<int> paired_group, a_group, b_group;
  for (int c = 0; c < n_clients; ++c) {
    if (spec.layout == PartitionLayout::RoundRobin) {
      paired_group.push_back(c);
      a_group.push_back(c);
      b_group.push_back(c);
    } else {
      (c % 3 == 0 ? paired_group : c % 3 == 1 ? a_group : b_group).push_back(c);
    }
  }
  std::vector<std::pair<int, int>> frag_pairs;
  for (int a : a_group)
    for (int b : b_group)
      if (a != b) frag_pairs.emplace_back(a, b);
  shuffle_in_place(frag_pairs, rng);

  auto at = [&](int c) -> ClientDataset& { return clients[static_cast<std::size_t>(c)]; };
  std::size_t next = 0, rr = 0, rr_a = 0, rr_b = 0;
  for (std::size_t k = 0; k < counts.paired; ++k, ++next)
    at(paired_group[rr++ % paired_group.size()]).paired.push_back(samples[order[next]]);
  for (std::size_t k = 0; k < counts.fragmented; ++k, ++next) {
    const auto& s = samples[order[next]];
    const auto [ca, cb] = frag_pairs[k % frag_pairs.size()];
    at(ca).fragmented_a.push_back(s.only(Modality::A));
    at(cb).fragmented_b.push_back(s.only(Modality::B));
  }
  for (std::size_t k = 0; k < counts.partial; ++k, ++next) {
    const auto& s = samples[order[next]];
    if (k % 2 == 0) {
      const int c = spec.layout == PartitionLayout::RoundRobin ? paired_group[rr++ % paired_group.size()]
                                                               : a_group[rr_a++ % a_group.size()];
      at(c).partial_a.push_back(s.only(Modality::A));
    } else {
      const int c = spec.layout == PartitionLayout::RoundRobin ? paired_group[rr++ % paired_group.size()]
                                                               : b_group[rr_b++ % b_group.size()];
      at(c).partial_b.push_back(s.only(Modality::B));
    }
  }
  for (const auto& c : clients)
    if (c.empty()) throw PartitionError("client " + std::to_string(c.client_id) + " received no data");
  return clients;
}

/// sample id -> (client holding modality A, client holding modality B)
struct AlignmentEntry {
  ClientId client_a = 0;
  ClientId client_b = 0;
  friend bool operator==(const AlignmentEntry&, const AlignmentEntry&) = default;
};
using AlignmentTable = std::map<SampleId, AlignmentEntry>;

/// Identifier intersection of fragmented records (stand-in for private set intersection).
inline AlignmentTable intersect_fragmented(const std::vector<ClientDataset>& clients) {
  std::map<SampleId, ClientId> holder_a, holder_b;
  auto collect = [](std::map<SampleId, ClientId>& into, const SampleSet& set, ClientId c) {
    for (const auto& s : set) {
      auto [it, inserted] = into.emplace(s.id, c);
      if (!inserted)
        throw IntegrityError("sample " + std::to_string(s.id) + " is fragmented at clients " +
                             std::to_string(it->second) + " and " + std::to_string(c));
    }
  };
  for (const auto& c : clients) {
    collect(holder_a, c.fragmented_a, c.client_id);
    collect(holder_b, c.fragmented_b, c.client_id);
  }
  AlignmentTable table;
  for (const auto& [id, ca] : holder_a) {
    auto it = holder_b.find(id);
    if (it == holder_b.end()) continue;
    if (it->second == ca)
      throw IntegrityError("sample " + std::to_string(id) + " has both fragments at client " + std::to_string(ca));
    table.emplace(id, AlignmentEntry{ca, it->second});
  }
  return table;
}

// ---------------------------------------------------------------------------
// Hold-out splits

struct HoldoutSplit {
  SampleSet train;
  SampleSet validation;
  SampleSet test;
};

namespace data_detail {

// Largest-remainder apportionment of `total` items across classes proportional to class sizes.
inline std::vector<std::size_t> apportion(const std::vector<std::size_t>& class_sizes, double fraction,
                                          std::size_t total) {
  std::vector<std::size_t> out(class_sizes.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < class_sizes.size(); ++c) {
    const double ideal = fraction * static_cast<double>(class_sizes[c]);
    out[c] = static_cast<std::size_t>(std::floor(ideal));
    assigned += out[c];
    remainders.emplace_back(ideal - std::floor(ideal), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total && i < remainders.size(); ++i, ++assigned) ++out[remainders[i].second];
  return out;
}

}  // namespace data_detail

/// Label-stratified train/validation/test split. Output sets keep the input order.
inline HoldoutSplit holdout_split(const SampleSet& samples, double val_fraction, double test_fraction,
                                  std::uint64_t seed) {
  if (!(val_fraction > 0) || !(test_fraction > 0) || !(val_fraction + test_fraction < 1))
    throw StratificationError("split fractions must be positive and sum to less than 1");
  for (const auto& s : samples)
    if (!s.paired()) throw DataError("hold-out input must carry both modalities (id " + std::to_string(s.id) + ")");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);
  std::vector<std::size_t> sizes;
  for (const auto& [label, idx] : by_class) {
    if (idx.size() < 3)
      throw StratificationError("class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                                " samples, fewer than the three splits");
    sizes.push_back(idx.size());
  }
  const double n = static_cast<double>(samples.size());
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * n));
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * n));
  const auto val_per_class = data_detail::apportion(sizes, val_fraction, n_val);
  const auto test_per_class = data_detail::apportion(sizes, test_fraction, n_test);

  Rng rng = make_rng(seed, "holdout");
  std::vector<int> assignment(samples.size(), 0);  // 0 train, 1 validation, 2 test
  std::size_t c = 0;
  for (auto& [label, idx] : by_class) {
    shuffle_in_place(idx, rng);
    if (val_per_class[c] + test_per_class[c] >= idx.size())
      throw StratificationError("class " + std::to_string(label) + " too small for the requested split");
    for (std::size_t k = 0; k < idx.size(); ++k)
      assignment[idx[k]] = k < val_per_class[c] ? 1 : k < val_per_class[c] + test_per_class[c] ? 2 : 0;
    ++c;
  }
  HoldoutSplit out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    (assignment[i] == 0 ? out.train : assignment[i] == 1 ? out.validation : out.test).push_back(samples[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Batching helpers

inline Matrix feature_matrix(const SampleSet& samples, Modality m) {
  if (samples.empty()) return {};
  if (!samples.front().has(m))
    throw DataError("sample " + std::to_string(samples.front().id) + " lacks modality " + to_string(m));
  const std::size_t dim = samples.front().features(m).size();
  Matrix out(samples.size(), dim);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    if (!samples[r].has(m))
      throw DataError("sample " + std::to_string(samples[r].id) + " lacks modality " + to_string(m));
    const auto& f = samples[r].features(m);
    if (f.size() != dim) throw ShapeError("inconsistent feature dimension in modality " + std::string(to_string(m)));
    std::copy(f.begin(), f.end(), out.row(r).begin());
  }
  return out;
}

inline std::vector<int> label_vector(const SampleSet& samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited text format (see README): one sample per line,
//   id <TAB> label <TAB> modality-A values <TAB> modality-B values
// where values are comma-separated decimals and a missing modality is written "∅".
// Lines starting with '#' are comments.

inline constexpr const char* kMissingModality = "\xE2\x88\x85";  // U+2205 EMPTY SET

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_samples(std::ostream& os, const SampleSet& samples) {
  os << "# id\tlabel\tA\tB\n";
  auto vec = [&os](const std::optional<std::vector<double>>& v) {
    if (!v) {
      os << kMissingModality;
      return;
    }
    for (std::size_t i = 0; i < v->size(); ++i) os << (i ? "," : "") << format_double((*v)[i]);
  };
  for (const auto& s : samples) {
    os << s.id << '\t' << s.label << '\t';
    vec(s.x_a);
    os << '\t';
    vec(s.x_b);
    os << '\n';
  }
}

namespace data_detail {

inline double parse_double(const std::string& tok, std::size_t line) {
  double v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(v))
    throw DataError("line " + std::to_string(line) + ": bad number '" + tok + "'");
  return v;
}

inline long long parse_integer(const std::string& tok, std::size_t line) {
  long long v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw DataError("line " + std::to_string(line) + ": bad integer '" + tok + "'");
  return v;
}

inline std::optional<std::vector<double>> parse_vector(const std::string& field, std::size_t line) {
  if (field == kMissingModality) return std::nullopt;
  std::vector<double> out;
  std::stringstream ss(field);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(parse_double(tok, line));
  if (out.empty()) throw DataError("line " + std::to_string(line) + ": empty feature vector");
  return out;
}

}  // namespace data_detail

inline SampleSet read_samples(std::istream& is) {
  SampleSet out;
  std::set<SampleId> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4) throw DataError("line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
    MultimodalSample s;
    s.id = static_cast<SampleId>(data_detail::parse_integer(fields[0], lineno));
    s.label = static_cast<int>(data_detail::parse_integer(fields[1], lineno));
    s.x_a = data_detail::parse_vector(fields[2], lineno);
    s.x_b = data_detail::parse_vector(fields[3], lineno);
    if (!s.x_a && !s.x_b) throw DataError("line " + std::to_string(lineno) + ": sample has no modality");
    if (!seen.insert(s.id).second) throw DataError("line " + std::to_string(lineno) + ": duplicate id");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace blendfl
