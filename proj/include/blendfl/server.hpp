#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "blendfl/bundle.hpp"
#include "blendfl/client.hpp"
#include "blendfl/data.hpp"
#include "blendfl/errors.hpp"
#include "blendfl/metrics.hpp"
#include "blendfl/nn.hpp"

namespace blendfl {

// ---------------------------------------------------------------------------
// Vertical coordinator

struct VerticalStepResult {
  std::vector<GradientBatch> gradients;  // one per staged batch, in staging order
  ParamVector head_grad;                 // empty when the step was a no-op
  double loss = 0;
  std::size_t aligned = 0;
  bool no_op = false;
};

/// Holds g^v_M and trains it on features aligned by sample id across clients.
class VerticalServer {
 public:
  VerticalServer() = default;
  VerticalServer(Network head, AlignmentTable alignment) : head_(std::move(head)), alignment_(std::move(alignment)) {}

  const Network& head() const noexcept { return head_; }
  void set_head(Network head) {
    if (!head_.empty() && !head.same_architecture(head_)) throw AggregationError("vertical head architecture changed");
    head_ = std::move(head);
  }
  const AlignmentTable& alignment() const noexcept { return alignment_; }
  std::size_t staged_count() const noexcept { return staged_.size(); }

  void stage(FeatureBatch batch) {
    if (batch.ids.size() != batch.features.rows()) throw ShapeError("feature batch ids and rows disagree");
    if (batch.modality == Modality::A && !batch.labels) throw AlignmentError("modality-A batch arrived without labels");
    staged_.push_back(std::move(batch));
  }

  /// Aligns staged A/B features by id, runs forward/loss/backward on the head, takes an
  /// SGD step and returns per-client gradient batches split at the A/B boundary.
  VerticalStepResult train_step(double lr) {
    VerticalStepResult res;
    std::vector<FeatureBatch> batches;
    batches.swap(staged_);

    // id -> (batch index, row) for the B side
    std::map<SampleId, std::pair<std::size_t, std::size_t>> b_rows;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      if (batches[bi].modality != Modality::B) continue;
      for (std::size_t r = 0; r < batches[bi].ids.size(); ++r)
        if (!b_rows.emplace(batches[bi].ids[r], std::make_pair(bi, r)).second)
          throw AlignmentError("sample " + std::to_string(batches[bi].ids[r]) + " staged twice for modality B");
    }

    struct Row {
      std::size_t a_batch, a_row, b_batch, b_row;
    };
    std::vector<Row> rows;
    std::vector<int> labels;
    std::set<SampleId> seen_a;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& a = batches[bi];
      if (a.modality != Modality::A) continue;
      for (std::size_t r = 0; r < a.ids.size(); ++r) {
        const SampleId sid = a.ids[r];
        if (!seen_a.insert(sid).second)
          throw AlignmentError("sample " + std::to_string(sid) + " staged twice for modality A");
        auto it = b_rows.find(sid);
        if (it == b_rows.end()) continue;
        const auto& b = batches[it->second.first];
        resolve(sid, a.client, b.client);
        rows.push_back({bi, r, it->second.first, it->second.second});
        labels.push_back((*a.labels)[r]);
      }
    }

    for (const auto& b : batches) res.gradients.push_back(
        GradientBatch{b.client, b.modality, b.tag, b.ids, Matrix(b.features.rows(), b.features.cols()), 1.0});
    res.aligned = rows.size();
    if (rows.empty()) {
      res.no_op = true;
      return res;
    }

    const std::size_t da = batches[rows[0].a_batch].features.cols();
    const std::size_t db = batches[rows[0].b_batch].features.cols();
    if (da + db != head_.input_dim())
      throw ShapeError("aligned features have width " + std::to_string(da + db) + ", head expects " +
                       std::to_string(head_.input_dim()));
    Matrix fused(rows.size(), da + db);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto ra = batches[rows[i].a_batch].features.row(rows[i].a_row);
      auto rb = batches[rows[i].b_batch].features.row(rows[i].b_row);
      std::copy(ra.begin(), ra.end(), fused.row(i).begin());
      std::copy(rb.begin(), rb.end(), fused.row(i).begin() + static_cast<std::ptrdiff_t>(da));
    }
    auto fwd = forward(head_, fused);
    auto loss = loss_and_grad(fwd.output, labels, LossKind::CategoricalCrossEntropy);
    auto back = backward(head_, fwd.trace, loss.output_grad);
    head_ = sgd_step(std::move(head_), back.param_grad, lr);

    const double n = static_cast<double>(rows.size());
    for (auto& g : res.gradients) g.normalizer = n;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto gin = back.input_grad.row(i);
      auto ga = res.gradients[rows[i].a_batch].grads.row(rows[i].a_row);
      auto gb = res.gradients[rows[i].b_batch].grads.row(rows[i].b_row);
      for (std::size_t j = 0; j < da; ++j) ga[j] = gin[j] * n;
      for (std::size_t j = 0; j < db; ++j) gb[j] = gin[da + j] * n;
    }
    res.loss = loss.loss;
    res.head_grad = std::move(back.param_grad);
    return res;
  }

 private:
  // Cross-client pairs must match the alignment table; a client pairing with itself
  // is vouching for its own paired record.
  void resolve(SampleId sid, ClientId ca, ClientId cb) const {
    if (ca == cb) return;
    auto it = alignment_.find(sid);
    if (it == alignment_.end()) throw AlignmentError("sample " + std::to_string(sid) + " is not in the alignment table");
    if (it->second.client_a != ca || it->second.client_b != cb)
      throw AlignmentError("sample " + std::to_string(sid) + " staged by clients (" + std::to_string(ca) + "," +
                           std::to_string(cb) + ") but aligned to (" + std::to_string(it->second.client_a) + "," +
                           std::to_string(it->second.client_b) + ")");
  }

  Network head_;
  AlignmentTable alignment_;
  std::vector<FeatureBatch> staged_;
};

// ---------------------------------------------------------------------------
// Validation scoring

enum class ScoreMetric { Auroc, Accuracy };

inline const char* to_string(ScoreMetric m) { return m == ScoreMetric::Auroc ? "auroc" : "accuracy"; }

/// Scalar performance A_i of predicted class probabilities.
inline double score_predictions(const Matrix& probs, std::span<const int> labels, ScoreMetric metric) {
  std::set<int> classes(labels.begin(), labels.end());
  if (classes.size() < 2) throw EvaluationError("validation labels contain a single class");
  if (metric == ScoreMetric::Accuracy) return accuracy(probs, labels);
  try {
    return macro_ovr(BinaryMetric::Auroc, probs, labels);
  } catch (const MetricError& e) {
    throw EvaluationError(e.what());
  }
}

inline double evaluate_unimodal(const Network& f, const Network& g, const SampleSet& validation, Modality m,
                                ScoreMetric metric) {
  if (validation.empty()) throw EvaluationError("empty validation set");
  return score_predictions(predict(g, predict(f, feature_matrix(validation, m))), label_vector(validation), metric);
}

inline double evaluate_fused(const Network& f_a, const Network& f_b, const Network& g_m, const SampleSet& validation,
                             ScoreMetric metric) {
  if (validation.empty()) throw EvaluationError("empty validation set");
  const Matrix probs = predict_fused(f_a, f_b, g_m, feature_matrix(validation, Modality::A),
                                     feature_matrix(validation, Modality::B));
  return score_predictions(probs, label_vector(validation), metric);
}

// ---------------------------------------------------------------------------
// Aggregation rules

struct Submission {
  std::string tag;
  ParamVector params;
  double score = 0;  // A_i for BlendAvg
};

struct AggregationWeights {
  std::map<std::string, double> kept;
  std::set<std::string> discarded;
};

struct BlendResult {
  ParamVector params;
  AggregationWeights weights;
  std::map<std::string, double> deltas;
};

namespace server_detail {

inline void check_layouts(std::size_t expected, const ParamVector& p, const std::string& tag) {
  if (p.size() != expected)
    throw AggregationError("submission '" + tag + "' has " + std::to_string(p.size()) + " parameters, expected " +
                           std::to_string(expected));
}

}  // namespace server_detail

/// Performance-weighted averaging: candidates that do not beat a_global are discarded,
/// the rest are weighted by their share of the total improvement. If nothing improves,
/// the previous global parameters are returned unchanged.
inline BlendResult blend_avg(std::span<const Submission> submissions, double a_global,
                             const ParamVector& previous_global) {
  if (submissions.empty()) throw AggregationError("blend_avg needs at least one submission");
  const std::size_t len = previous_global.size();
  BlendResult res;
  double total = 0;
  for (const auto& s : submissions) {
    server_detail::check_layouts(len, s.params, s.tag);
    const double delta = s.score - a_global;
    if (!res.deltas.emplace(s.tag, delta).second) throw AggregationError("duplicate submission tag '" + s.tag + "'");
    if (delta > 0) {
      total += delta;
    } else {
      res.weights.discarded.insert(s.tag);
    }
  }
  if (res.weights.discarded.size() == submissions.size()) {
    res.params = previous_global;
    return res;
  }
  res.params.assign(len, 0.0);
  for (const auto& s : submissions) {
    const double delta = res.deltas.at(s.tag);
    if (!(delta > 0)) continue;
    const double w = delta / total;
    res.weights.kept.emplace(s.tag, w);
    for (std::size_t i = 0; i < len; ++i) res.params[i] += w * s.params[i];
  }
  return res;
}

struct CountedSubmission {
  std::string tag;
  ParamVector params;
  double n = 0;  // local sample count
};

/// Sample-count weighted average.
inline ParamVector fed_avg(std::span<const CountedSubmission> submissions) {
  if (submissions.empty()) throw AggregationError("fed_avg needs at least one submission");
  const std::size_t len = submissions.front().params.size();
  double total = 0;
  for (const auto& s : submissions) {
    server_detail::check_layouts(len, s.params, s.tag);
    if (!(s.n >= 0)) throw AggregationError("negative sample count for '" + s.tag + "'");
    total += s.n;
  }
  if (!(total > 0)) throw AggregationError("fed_avg needs a positive total sample count");
  ParamVector out(len, 0.0);
  for (const auto& s : submissions) {
    const double w = s.n / total;
    for (std::size_t i = 0; i < len; ++i) out[i] += w * s.params[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation server

enum class AggregationStrategy { BlendAvg, FedAvg };

inline const char* to_string(AggregationStrategy s) { return s == AggregationStrategy::BlendAvg ? "blendavg" : "fedavg"; }

/// One client's model upload after a round of local training.
struct ClientSubmission {
  ClientId client = 0;
  ModelBundle models;
  LocalCounts counts;
};

/// Candidate from the vertical coordinator for the multimodal blend.
struct VerticalCandidate {
  Network head;
  std::size_t aligned_samples = 0;
};

struct CandidateRecord {
  std::string tag;
  double n = 0;
  double score = 0;
  double delta = 0;
  double weight = 0;
  bool kept = false;
};

struct HeadAggregation {
  Head head = Head::Multimodal;
  AggregationStrategy strategy = AggregationStrategy::BlendAvg;
  double a_global = 0;
  std::vector<CandidateRecord> candidates;
  std::vector<std::string> discarded;
  double validation_after = 0;
  bool updated = false;
};

struct RoundAggregation {
  ModelBundle global;
  std::vector<HeadAggregation> heads;
};

/// Keeps the blended global bundle and scores every candidate on the server's
/// private validation set.
class AggregationServer {
 public:
  AggregationServer(ModelBundle initial_global, SampleSet validation, AggregationStrategy strategy,
                    ScoreMetric metric = ScoreMetric::Auroc)
      : global_(std::move(initial_global)), validation_(std::move(validation)), strategy_(strategy), metric_(metric) {
    if (!global_.has_multimodal() || !global_.has_unimodal(Modality::A) || !global_.has_unimodal(Modality::B))
      throw AggregationError("aggregation server needs a complete global bundle");
    if (validation_.empty()) throw EvaluationError("empty validation set");
  }

  const ModelBundle& global() const noexcept { return global_; }
  const SampleSet& validation() const noexcept { return validation_; }
  ScoreMetric metric() const noexcept { return metric_; }

  double score(const ModelBundle& b, Head h) const {
    if (h == Head::Multimodal) return evaluate_fused(*b.f_a, *b.f_b, *b.g_m, validation_, metric_);
    const Modality m = h == Head::UnimodalA ? Modality::A : Modality::B;
    return evaluate_unimodal(*b.encoder(m), *b.classifier(m), validation_, m, metric_);
  }

  double global_score(Head h) const { return score(global_, h); }

  /// Blends unimodal stacks per modality, then the multimodal head over client g_M
  /// (scored with their own encoders) and the vertical head (scored with the freshly
  /// blended encoders). Installs and returns the new global bundle.
  RoundAggregation aggregate(const std::vector<ClientSubmission>& submissions,
                             const std::optional<VerticalCandidate>& vertical) {
    RoundAggregation out;
    const ModelBundle previous = global_;
    ModelBundle next = global_;

    for (Modality m : {Modality::A, Modality::B}) {
      HeadAggregation rec{unimodal_head(m), strategy_, score(previous, unimodal_head(m)), {}, {}, 0, false};
      std::vector<Submission> subs;
      std::vector<CountedSubmission> counted;
      for (const auto& s : submissions) {
        if (!s.models.has_unimodal(m)) continue;
        const std::string tag = "client" + std::to_string(s.client);
        const double a = evaluate_unimodal(*s.models.encoder(m), *s.models.classifier(m), validation_, m, metric_);
        subs.push_back({tag, unimodal_stack_params(s.models, m), a});
        counted.push_back({tag, subs.back().params, static_cast<double>(s.counts.modality(m))});
      }
      if (!subs.empty()) {
        const ParamVector blended = combine(subs, counted, rec, unimodal_stack_params(previous, m));
        set_unimodal_stack_params(next, m, blended);
      }
      out.heads.push_back(std::move(rec));
    }

    {
      HeadAggregation rec{Head::Multimodal, strategy_, score(previous, Head::Multimodal), {}, {}, 0, false};
      std::vector<Submission> subs;
      std::vector<CountedSubmission> counted;
      for (const auto& s : submissions) {
        if (s.counts.paired == 0 || !s.models.has_multimodal()) continue;
        const std::string tag = "client" + std::to_string(s.client);
        const double a = evaluate_fused(*s.models.f_a, *s.models.f_b, *s.models.g_m, validation_, metric_);
        subs.push_back({tag, s.models.g_m->params(), a});
        counted.push_back({tag, subs.back().params, static_cast<double>(s.counts.paired)});
      }
      if (vertical && vertical->aligned_samples > 0) {
        if (!vertical->head.same_architecture(*previous.g_m))
          throw AggregationError("vertical head architecture differs from g_M");
        const double a = evaluate_fused(*next.f_a, *next.f_b, vertical->head, validation_, metric_);
        subs.push_back({"vertical", vertical->head.params(), a});
        counted.push_back({"vertical", vertical->head.params(), static_cast<double>(vertical->aligned_samples)});
      }
      if (!subs.empty()) next.g_m->set_params(combine(subs, counted, rec, previous.g_m->params()));
      out.heads.push_back(std::move(rec));
    }

    global_ = std::move(next);
    for (auto& h : out.heads) h.validation_after = score(global_, h.head);
    out.global = global_;
    return out;
  }

 private:
  ParamVector combine(const std::vector<Submission>& subs, const std::vector<CountedSubmission>& counted,
                      HeadAggregation& rec, const ParamVector& previous) const {
    if (strategy_ == AggregationStrategy::BlendAvg) {
      auto res = blend_avg(subs, rec.a_global, previous);
      for (std::size_t i = 0; i < subs.size(); ++i) {
        CandidateRecord c{subs[i].tag, counted[i].n, subs[i].score, res.deltas.at(subs[i].tag), 0, false};
        if (auto it = res.weights.kept.find(c.tag); it != res.weights.kept.end()) {
          c.weight = it->second;
          c.kept = true;
        } else {
          rec.discarded.push_back(c.tag);
        }
        rec.candidates.push_back(c);
      }
      rec.updated = !res.weights.kept.empty();
      return res.params;
    }
    double total = 0;
    for (const auto& c : counted) total += c.n;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      CandidateRecord c{subs[i].tag, counted[i].n, subs[i].score, subs[i].score - rec.a_global, 0, false};
      if (total > 0 && counted[i].n > 0) {
        c.weight = counted[i].n / total;
        c.kept = true;
      } else {
        rec.discarded.push_back(c.tag);
      }
      rec.candidates.push_back(c);
    }
    if (!(total > 0)) return previous;
    rec.updated = true;
    return fed_avg(counted);
  }

  ModelBundle global_;
  SampleSet validation_;
  AggregationStrategy strategy_;
  ScoreMetric metric_;
};

}  // namespace blendfl
