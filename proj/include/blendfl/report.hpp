#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blendfl/bundle.hpp"
#include "blendfl/metrics.hpp"
#include "blendfl/server.hpp"

namespace blendfl {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

inline constexpr Head kAllHeads[] = {Head::Multimodal, Head::UnimodalA, Head::UnimodalB};

struct HeadMetrics {
  double auroc = kNaN;
  double auprc = kNaN;
  friend bool operator==(const HeadMetrics&, const HeadMetrics&) = default;
};

/// Macro one-vs-rest AUROC and AUPRC of a probability matrix.
inline HeadMetrics score_head(const Matrix& probs, std::span<const int> labels) {
  return {macro_ovr(BinaryMetric::Auroc, probs, labels), macro_ovr(BinaryMetric::Auprc, probs, labels)};
}

/// Test metrics for every head the bundle can run; absent heads stay NaN.
inline std::map<Head, HeadMetrics> evaluate_bundle(const ModelBundle& b, const SampleSet& samples) {
  std::map<Head, HeadMetrics> out;
  const auto y = label_vector(samples);
  const Matrix xa = feature_matrix(samples, Modality::A);
  const Matrix xb = feature_matrix(samples, Modality::B);
  out[Head::Multimodal] = b.has_multimodal() ? score_head(predict_multimodal(b, xa, xb), y) : HeadMetrics{};
  out[Head::UnimodalA] = b.has_unimodal(Modality::A) ? score_head(predict_unimodal(b, Modality::A, xa), y) : HeadMetrics{};
  out[Head::UnimodalB] = b.has_unimodal(Modality::B) ? score_head(predict_unimodal(b, Modality::B, xb), y) : HeadMetrics{};
  return out;
}

struct TrainLosses {
  std::optional<double> partial_a;
  std::optional<double> partial_b;
  std::optional<double> vertical;
  std::optional<double> paired;
};

/// One global round of any protocol.
struct RoundReport {
  std::string protocol;
  std::uint64_t seed = 0;
  int round = 0;
  TrainLosses train_loss;
  std::map<Head, double> validation;  // server validation score per head (metric of the run)
  std::map<Head, HeadMetrics> test;
  std::vector<HeadAggregation> aggregation;
  std::size_t vertical_aligned = 0;
  std::size_t wasted_samples = 0;
  bool decentralized_inference = true;
  std::vector<std::string> notes;

  double validation_score(Head h) const {
    auto it = validation.find(h);
    return it == validation.end() ? kNaN : it->second;
  }
  HeadMetrics test_metrics(Head h) const {
    auto it = test.find(h);
    return it == test.end() ? HeadMetrics{} : it->second;
  }
};

namespace report_detail {

using Json = nlohmann::ordered_json;

inline Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
inline Json number(const std::optional<double>& v) { return v ? number(*v) : Json(nullptr); }

}  // namespace report_detail

inline nlohmann::ordered_json to_json(const RoundReport& r) {
  using report_detail::Json;
  using report_detail::number;
  Json j;
  j["protocol"] = r.protocol;
  j["seed"] = r.seed;
  j["round"] = r.round;
  j["train_loss"] = {{"partial_A", number(r.train_loss.partial_a)},
                     {"partial_B", number(r.train_loss.partial_b)},
                     {"vertical", number(r.train_loss.vertical)},
                     {"paired", number(r.train_loss.paired)}};
  Json val = Json::object(), test = Json::object();
  for (Head h : kAllHeads) {
    val[to_string(h)] = number(r.validation_score(h));
    const auto m = r.test_metrics(h);
    test[to_string(h)] = {{"auroc", number(m.auroc)}, {"auprc", number(m.auprc)}};
  }
  j["validation"] = val;
  j["test"] = test;
  Json agg = Json::array();
  for (const auto& h : r.aggregation) {
    Json cands = Json::array();
    for (const auto& c : h.candidates)
      cands.push_back({{"tag", c.tag},
                       {"n", c.n},
                       {"A", number(c.score)},
                       {"delta", number(c.delta)},
                       {"weight", number(c.weight)},
                       {"kept", c.kept}});
    agg.push_back({{"head", to_string(h.head)},
                   {"strategy", to_string(h.strategy)},
                   {"A_global", number(h.a_global)},
                   {"candidates", cands},
                   {"discarded", h.discarded},
                   {"updated", h.updated},
                   {"validation_after", number(h.validation_after)}});
  }
  j["aggregation"] = agg;
  j["vertical_aligned"] = r.vertical_aligned;
  j["wasted_samples"] = r.wasted_samples;
  j["decentralized_inference"] = r.decentralized_inference;
  j["notes"] = r.notes;
  return j;
}

/// One compact JSON object, no trailing newline.
inline std::string to_json_line(const RoundReport& r) { return to_json(r).dump(); }

}  // namespace blendfl
