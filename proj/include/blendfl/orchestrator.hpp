#pragma once

#include <functional>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blendfl/bundle.hpp"
#include "blendfl/client.hpp"
#include "blendfl/data.hpp"
#include "blendfl/errors.hpp"
#include "blendfl/report.hpp"
#include "blendfl/rng.hpp"
#include "blendfl/server.hpp"
#include "blendfl/trace.hpp"

namespace blendfl {

enum class Protocol { BlendFL, FedAvg, SplitNN };

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::BlendFL: return "blendfl";
    case Protocol::FedAvg: return "fedavg";
    case Protocol::SplitNN: return "splitnn";
  }
  return "?";
}

/// What happens to the vertical server's g^v_M after each aggregation.
enum class VerticalHeadPolicy {
  Retain,         // keeps training its own parameters across rounds
  SyncToBlended,  // restarts each round from g^blended_M
  Reinitialize,   // fresh random parameters each round
};

inline const char* to_string(VerticalHeadPolicy p) {
  switch (p) {
    case VerticalHeadPolicy::Retain: return "retain";
    case VerticalHeadPolicy::SyncToBlended: return "sync";
    case VerticalHeadPolicy::Reinitialize: return "reinitialize";
  }
  return "?";
}

struct ProtocolConfig {
  Protocol protocol = Protocol::BlendFL;
  int epochs = 40;
  double lr = 0.05;
  std::size_t batch_size = 16;
  int local_epochs_per_round = 1;
  AggregationStrategy aggregation = AggregationStrategy::BlendAvg;
  ScoreMetric metric = ScoreMetric::Auroc;
  std::uint64_t seed = 0;
  bool fragmented_in_unimodal = true;
  bool paired_in_unimodal = false;
  VerticalHeadPolicy vertical_head = VerticalHeadPolicy::Retain;
  bool parallel = false;

  void validate() const {
    if (epochs < 1) throw RunError("epochs must be at least 1");
    if (local_epochs_per_round < 1) throw RunError("local_epochs_per_round must be at least 1");
    if (!(lr > 0) || !std::isfinite(lr)) throw RunError("lr must be positive");
    if (batch_size < 1) throw RunError("batch_size must be at least 1");
  }

  friend bool operator==(const ProtocolConfig&, const ProtocolConfig&) = default;
};

/// Everything a run needs: partitioned training data plus the server-side hold-outs.
struct Federation {
  std::vector<ClientDataset> clients;
  SampleSet validation;
  SampleSet test;
  ModelArch arch;
};

struct RunResult {
  std::vector<RoundReport> reports;
  ModelBundle final_global;
  ProtocolTrace trace;
};

/// Thrown when a phase fails; carries the reports of the rounds that completed.
class RunAborted : public RunError {
 public:
  RunAborted(const std::string& what, std::vector<RoundReport> partial)
      : RunError(what), partial_(std::move(partial)) {}
  const std::vector<RoundReport>& partial_reports() const noexcept { return partial_; }

 private:
  std::vector<RoundReport> partial_;
};

/// Called after every round; returning false stops the run early.
using RoundObserver = std::function<bool(const RoundReport&)>;

// ---------------------------------------------------------------------------
// Vertical batch scheduling

struct VerticalBatch {
  ClientId client_a = 0;
  ClientId client_b = 0;
  FeatureSource source = FeatureSource::Fragmented;
  std::vector<SampleId> ids;
};

/// Groups alignable ids by (holder of A, holder of B), shuffles within each group, cuts
/// into batches of at most batch_size and shuffles the batch order. Paired records of
/// one client form the self pair (c, c).
inline std::vector<VerticalBatch> schedule_vertical_batches(const AlignmentTable& alignment,
                                                            const std::map<ClientId, std::vector<SampleId>>& paired,
                                                            std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw RunError("batch size must be positive");
  std::map<std::pair<ClientId, ClientId>, std::vector<SampleId>> groups;
  for (const auto& [id, e] : alignment) groups[{e.client_a, e.client_b}].push_back(id);
  std::vector<VerticalBatch> out;
  auto cut = [&](ClientId a, ClientId b, FeatureSource src, std::vector<SampleId> ids) {
    shuffle_in_place(ids, rng);
    for (std::size_t i = 0; i < ids.size(); i += batch_size)
      out.push_back({a, b, src,
                     {ids.begin() + static_cast<std::ptrdiff_t>(i),
                      ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), i + batch_size))}});
  };
  for (auto& [pair, ids] : groups) cut(pair.first, pair.second, FeatureSource::Fragmented, std::move(ids));
  for (const auto& [c, ids] : paired)
    if (!ids.empty()) cut(c, c, FeatureSource::Paired, ids);
  shuffle_in_place(out, rng);
  return out;
}

namespace orchestrator_detail {

// Sample-weighted running mean of per-client epoch losses.
struct LossMeter {
  double sum = 0, n = 0;
  void add(double loss, double count) {
    sum += loss * count;
    n += count;
  }
  std::optional<double> mean() const { return n > 0 ? std::optional<double>(sum / n) : std::nullopt; }
};

inline Client& client_by_id(std::vector<Client>& clients, ClientId id) {
  for (auto& c : clients)
    if (c.id() == id) return c;
  throw ProtocolError("unknown client " + std::to_string(id));
}

// Runs fn(client) for every client, concurrently when asked. Results come back in client order.
template <class Fn>
auto for_each_client(std::vector<Client>& clients, bool parallel, Fn fn) {
  using R = decltype(fn(clients.front()));
  std::vector<R> out;
  out.reserve(clients.size());
  if (!parallel) {
    for (auto& c : clients) out.push_back(fn(c));
    return out;
  }
  std::vector<std::future<R>> futures;
  for (auto& c : clients) futures.push_back(std::async(std::launch::async, [&fn, &c] { return fn(c); }));
  for (auto& f : futures) out.push_back(f.get());
  return out;
}

// One vertical step: A and B holders encode, server trains g^v_M, gradients flow back.
inline VerticalStepResult vertical_step(std::vector<Client>& clients, VerticalServer& server, const VerticalBatch& batch,
                                        RoundTag tag, int local_epoch, double lr, ProtocolTrace& trace) {
  Client& ca = client_by_id(clients, batch.client_a);
  Client& cb = client_by_id(clients, batch.client_b);
  server.stage(ca.forward_for_server(Modality::A, batch.source, batch.ids, tag));
  trace.record({tag.round, local_epoch, tag.step, MessageKind::FeaturesToServer, ca.id(), Modality::A});
  server.stage(cb.forward_for_server(Modality::B, batch.source, batch.ids, tag));
  trace.record({tag.round, local_epoch, tag.step, MessageKind::FeaturesToServer, cb.id(), Modality::B});
  auto res = server.train_step(lr);
  for (const auto& g : res.gradients) {
    client_by_id(clients, g.client).apply_server_gradients(g, lr);
    trace.record({tag.round, local_epoch, tag.step, MessageKind::GradientsToClient, g.client, g.modality});
  }
  return res;
}

inline std::vector<Client> make_clients(const Federation& fed, const ModelBundle& global, const ProtocolConfig& cfg,
                                        UnimodalSources sources) {
  if (fed.clients.empty()) throw RunError("federation has no clients");
  std::vector<Client> clients;
  for (const auto& d : fed.clients)
    clients.emplace_back(d, global, derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(d.client_id)),
                         sources);
  return clients;
}

// Horizontal-plus-vertical round loop shared by BlendFL and the FedAvg baseline.
inline RunResult run_federated(const Federation& fed, const ProtocolConfig& cfg, bool vertical_path,
                               AggregationStrategy strategy, UnimodalSources sources, const RoundObserver& observer) {
  cfg.validate();
  RunResult result;
  Rng init_rng = make_rng(cfg.seed, "init");
  const ModelBundle initial = fed.arch.initialize(init_rng);
  std::vector<Client> clients = make_clients(fed, initial, cfg, sources);
  AggregationServer aggregator(initial, fed.validation, strategy, cfg.metric);

  const AlignmentTable alignment = vertical_path ? intersect_fragmented(fed.clients) : AlignmentTable{};
  VerticalServer vertical(*initial.g_m, alignment);
  Rng vertical_rng = make_rng(cfg.seed, "vertical");

  for (int round = 1; round <= cfg.epochs; ++round) {
    RoundReport report;
    report.protocol = to_string(cfg.protocol);
    report.seed = cfg.seed;
    report.round = round;
    try {
      LossMeter partial[2], vert, paired;
      for (int le = 0; le < cfg.local_epochs_per_round; ++le) {
        // partial (unimodal) phase
        auto partial_losses = for_each_client(clients, cfg.parallel, [&](Client& c) {
          std::array<std::optional<double>, 2> l;
          for (Modality m : {Modality::A, Modality::B}) l[static_cast<int>(m)] = c.train_local_partial(m, cfg.lr, cfg.batch_size);
          return l;
        });
        for (std::size_t i = 0; i < clients.size(); ++i) {
          for (Modality m : {Modality::A, Modality::B}) {
            const auto& l = partial_losses[i][static_cast<int>(m)];
            if (!l) continue;
            partial[static_cast<int>(m)].add(*l, static_cast<double>(clients[i].unimodal_sample_count(m)));
            result.trace.record({round, le, 0, MessageKind::LocalPartial, clients[i].id(), m});
          }
        }

        // vertical phase over fragmented records
        if (!alignment.empty()) {
          auto batches = schedule_vertical_batches(alignment, {}, cfg.batch_size, vertical_rng);
          int step = 0;
          for (const auto& b : batches) {
            auto res = vertical_step(clients, vertical, b, {round, le * static_cast<int>(batches.size()) + step}, le,
                                     cfg.lr, result.trace);
            ++step;
            if (!res.no_op) vert.add(res.loss, static_cast<double>(res.aligned));
          }
          report.vertical_aligned = alignment.size();
        }

        // paired (multimodal) phase
        auto paired_losses =
            for_each_client(clients, cfg.parallel, [&](Client& c) { return c.train_local_paired(cfg.lr, cfg.batch_size); });
        for (std::size_t i = 0; i < clients.size(); ++i) {
          if (!paired_losses[i]) continue;
          paired.add(*paired_losses[i], static_cast<double>(clients[i].counts().paired));
          result.trace.record({round, le, 0, MessageKind::LocalPaired, clients[i].id(), std::nullopt});
        }
      }
      report.train_loss = {partial[0].mean(), partial[1].mean(), vert.mean(), paired.mean()};

      // aggregation
      std::vector<ClientSubmission> subs;
      for (const auto& c : clients) {
        subs.push_back({c.id(), c.bundle(), c.counts()});
        result.trace.record({round, 0, 0, MessageKind::WeightsToServer, c.id(), std::nullopt});
      }
      std::optional<VerticalCandidate> vcand;
      if (!alignment.empty()) vcand = VerticalCandidate{vertical.head(), alignment.size()};
      auto agg = aggregator.aggregate(subs, vcand);
      report.aggregation = agg.heads;
      for (const auto& h : agg.heads) {
        report.validation[h.head] = h.validation_after;
        if (!h.updated) report.notes.push_back(std::string(to_string(h.head)) + ": no candidate kept, global retained");
      }
      if (!alignment.empty()) {
        switch (cfg.vertical_head) {
          case VerticalHeadPolicy::Retain: break;
          case VerticalHeadPolicy::SyncToBlended: vertical.set_head(*agg.global.g_m); break;
          case VerticalHeadPolicy::Reinitialize: {
            Rng r = make_rng(cfg.seed, "vertical_init", static_cast<std::uint64_t>(round));
            vertical.set_head(Network::initialized(fed.arch.multimodal_layers(), r));
            break;
          }
        }
      }
      for (auto& c : clients) {
        c.local_update(agg.global);
        result.trace.record({round, 0, 0, MessageKind::GlobalsToClient, c.id(), std::nullopt});
      }
      report.test = evaluate_bundle(agg.global, fed.test);
    } catch (const Error& e) {
      throw RunAborted("round " + std::to_string(round) + ": " + e.what(), std::move(result.reports));
    }
    result.reports.push_back(std::move(report));
    if (observer && !observer(result.reports.back())) break;
  }
  result.final_global = aggregator.global();
  return result;
}

}  // namespace orchestrator_detail

/// BlendFL: partial phase, vertical phase on fragmented records, paired phase, then
/// aggregation (BlendAvg by default) and redistribution, every round.
inline RunResult run_blendfl(const Federation& fed, ProtocolConfig cfg, const RoundObserver& observer = {}) {
  cfg.protocol = Protocol::BlendFL;
  return orchestrator_detail::run_federated(fed, cfg, true, cfg.aggregation,
                                           {cfg.fragmented_in_unimodal, cfg.paired_in_unimodal}, observer);
}

/// Horizontal baseline: no vertical path, fragmented records used as unimodal data,
/// sample-count weighted averaging per head.
inline RunResult run_fedavg(const Federation& fed, ProtocolConfig cfg, const RoundObserver& observer = {}) {
  cfg.protocol = Protocol::FedAvg;
  return orchestrator_detail::run_federated(fed, cfg, false, AggregationStrategy::FedAvg,
                                           {true, cfg.paired_in_unimodal}, observer);
}

/// Split-learning baseline: one encoder per modality, relayed to whichever client holds the
/// next batch, and one server classifier of the g_M architecture. Trains on paired
/// (self-aligned) and fragmented (table-aligned) records; partial records cannot be used.
inline RunResult run_splitnn(const Federation& fed, ProtocolConfig cfg, const RoundObserver& observer = {}) {
  using namespace orchestrator_detail;
  cfg.protocol = Protocol::SplitNN;
  cfg.validate();
  RunResult result;
  Rng init_rng = make_rng(cfg.seed, "init");
  const ModelBundle initial = fed.arch.initialize(init_rng);
  std::vector<Client> clients = make_clients(fed, initial, cfg, {false, false});

  const AlignmentTable alignment = intersect_fragmented(fed.clients);
  std::map<ClientId, std::vector<SampleId>> paired;
  std::size_t wasted = 0;
  for (const auto& c : clients) {
    auto ids = c.paired_ids();
    if (!ids.empty()) paired[c.id()] = std::move(ids);
    wasted += c.counts().partial_a + c.counts().partial_b;
  }
  if (alignment.empty() && paired.empty())
    throw RunError("split learning has no usable samples (no paired or fragmented records)");
  std::size_t orphaned = 0;
  for (const auto& d : fed.clients) orphaned += d.fragmented_a.size() + d.fragmented_b.size();
  wasted += orphaned - 2 * alignment.size();

  // One encoder per modality, relayed to whichever client trains the next batch.
  Network shared_a = *initial.f_a, shared_b = *initial.f_b;
  VerticalServer server(*initial.g_m, alignment);
  Rng vertical_rng = make_rng(cfg.seed, "vertical");
  auto predict = [&](const SampleSet& s) {
    return predict_fused(shared_a, shared_b, server.head(), feature_matrix(s, Modality::A), feature_matrix(s, Modality::B));
  };

  for (int round = 1; round <= cfg.epochs; ++round) {
    RoundReport report;
    report.protocol = to_string(cfg.protocol);
    report.seed = cfg.seed;
    report.round = round;
    report.wasted_samples = wasted;
    report.decentralized_inference = false;
    report.notes.push_back("inference requires the server classifier");
    try {
      LossMeter vert;
      int step = 0;
      for (int le = 0; le < cfg.local_epochs_per_round; ++le) {
        for (const auto& b : schedule_vertical_batches(alignment, paired, cfg.batch_size, vertical_rng)) {
          Client& ca = client_by_id(clients, b.client_a);
          Client& cb = client_by_id(clients, b.client_b);
          ca.receive_encoder(Modality::A, shared_a);
          cb.receive_encoder(Modality::B, shared_b);
          auto res = vertical_step(clients, server, b, {round, step++}, le, cfg.lr, result.trace);
          shared_a = ca.encoder(Modality::A);
          shared_b = cb.encoder(Modality::B);
          if (!res.no_op) vert.add(res.loss, static_cast<double>(res.aligned));
        }
      }
      report.train_loss.vertical = vert.mean();
      std::size_t aligned = alignment.size();
      for (const auto& [c, ids] : paired) aligned += ids.size();
      report.vertical_aligned = aligned;

      const auto yv = label_vector(fed.validation);
      const auto yt = label_vector(fed.test);
      report.validation[Head::Multimodal] = score_predictions(predict(fed.validation), yv, cfg.metric);
      report.validation[Head::UnimodalA] = kNaN;
      report.validation[Head::UnimodalB] = kNaN;
      const Matrix pt = predict(fed.test);
      report.test[Head::Multimodal] = {macro_ovr(BinaryMetric::Auroc, pt, yt), macro_ovr(BinaryMetric::Auprc, pt, yt)};
      report.test[Head::UnimodalA] = {};
      report.test[Head::UnimodalB] = {};
    } catch (const Error& e) {
      throw RunAborted("round " + std::to_string(round) + ": " + e.what(), std::move(result.reports));
    }
    result.reports.push_back(std::move(report));
    if (observer && !observer(result.reports.back())) break;
  }

  result.final_global.f_a = shared_a;
  result.final_global.f_b = shared_b;
  result.final_global.g_m = server.head();
  return result;
}

inline RunResult run_protocol(const Federation& fed, const ProtocolConfig& cfg, const RoundObserver& observer = {}) {
  switch (cfg.protocol) {
    case Protocol::BlendFL: return run_blendfl(fed, cfg, observer);
    case Protocol::FedAvg: return run_fedavg(fed, cfg, observer);
    case Protocol::SplitNN: return run_splitnn(fed, cfg, observer);
  }
  throw RunError("unknown protocol");
}

}  // namespace blendfl
