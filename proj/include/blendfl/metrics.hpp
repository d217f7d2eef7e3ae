#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "blendfl/errors.hpp"
#include "blendfl/matrix.hpp"

namespace blendfl {

/// Binary classification labels: 1 is positive, anything else negative.
/// AUROC as the normalised Mann-Whitney U statistic; ties earn half credit.
inline double auroc_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double n_pos = 0, n_neg = 0, rank_sum_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        n_pos += 1;
        rank_sum_pos += avg_rank;
      } else {
        n_neg += 1;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw MetricError("auroc needs both classes present");
  const double u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0;
  return u / (n_pos * n_neg);
}

/// Average precision: sum over distinct thresholds (descending) of
/// (recall step) x (precision at that threshold). Tied scores form one threshold.
inline double auprc_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("auprc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total_pos = 0;
  for (int y : labels) total_pos += (y == 1);
  if (total_pos == 0) throw MetricError("auprc needs at least one positive");

  double tp = 0, seen = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += (labels[order[j]] == 1);
      seen += 1;
      ++j;
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / seen);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

enum class BinaryMetric { Auroc, Auprc };

inline double binary_metric(BinaryMetric m, std::span<const double> scores, std::span<const int> labels) {
  return m == BinaryMetric::Auroc ? auroc_binary(scores, labels) : auprc_binary(scores, labels);
}

/// Unweighted mean of one-vs-rest binary metrics over the k score columns.
/// A single score column is treated as a binary problem with labels in {0,1}.
inline double macro_ovr(BinaryMetric metric, const Matrix& scores, std::span<const int> labels) {
  if (scores.rows() != labels.size()) throw MetricError("macro_ovr: scores and labels differ in length");
  if (scores.rows() < 2) throw MetricError("metric needs at least two samples");
  if (scores.cols() == 1) {
    return binary_metric(metric, std::span<const double>(scores.values()), labels);
  }
  const std::size_t k = scores.cols();
  std::vector<double> column(scores.rows());
  std::vector<int> one_vs_rest(scores.rows());
  double sum = 0;
  for (std::size_t c = 0; c < k; ++c) {
    bool present = false;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k)
        throw MetricError("label " + std::to_string(labels[r]) + " out of range");
      column[r] = scores(r, c);
      one_vs_rest[r] = labels[r] == static_cast<int>(c) ? 1 : 0;
      present |= one_vs_rest[r] == 1;
    }
    if (!present) throw MetricError("class " + std::to_string(c) + " missing from labels");
    sum += binary_metric(metric, column, one_vs_rest);
  }
  return sum / static_cast<double>(k);
}

inline double accuracy(const Matrix& scores, std::span<const int> labels) {
  if (scores.rows() != labels.size() || scores.rows() == 0) throw MetricError("accuracy: bad shapes");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    int pred;
    if (scores.cols() == 1) {
      pred = scores(r, 0) >= 0.5 ? 1 : 0;
    } else {
      auto row = scores.row(r);
      pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    hits += pred == labels[r];
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

}  // namespace blendfl
