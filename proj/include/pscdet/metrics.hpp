#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "pscdet/error.hpp"

namespace pscdet {

struct BinaryCounts {
  long long tp = 0, fp = 0, tn = 0, fn = 0;
};

struct PrfResult {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  BinaryCounts counts;
};

inline PrfResult precision_recall_f1(const std::vector<int>& predictions,
                                     const std::vector<int>& labels) {
  if (predictions.size() != labels.size())
    throw DataError("precision_recall_f1: size mismatch");
  PrfResult r;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] != 0;
    const bool y = labels[i] != 0;
    if (p && y) ++r.counts.tp;
    else if (p && !y) ++r.counts.fp;
    else if (!p && y) ++r.counts.fn;
    else ++r.counts.tn;
  }
  const double tp = static_cast<double>(r.counts.tp);
  r.precision = (r.counts.tp + r.counts.fp) > 0
                    ? tp / static_cast<double>(r.counts.tp + r.counts.fp)
                    : 0.0;
  r.recall = (r.counts.tp + r.counts.fn) > 0
                 ? tp / static_cast<double>(r.counts.tp + r.counts.fn)
                 : 0.0;
  r.f1 = (r.precision + r.recall) > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

// Probability that a random positive outranks a random negative, ties 1/2.
// Computed from the rank-sum with midranks for tie groups.
inline double roc_auc(const std::vector<double>& scores,
                      const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DataError("roc_auc: size mismatch");
  std::size_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y != 0 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("roc_auc requires both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) rank_sum_pos += mid_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

// Step-wise PR integration over descending-score thresholds, one sample at a
// time. Ties are walked in id order (ascending) to keep the result
// deterministic.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels,
                                const std::vector<std::string>& ids) {
  if (scores.size() != labels.size())
    throw DataError("average_precision: size mismatch");
  if (!ids.empty() && ids.size() != scores.size())
    throw DataError("average_precision: ids size mismatch");
  std::size_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y != 0 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("average_precision requires both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if (!ids.empty()) return ids[a] < ids[b];
    return a < b;
  });
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] != 0) {
      ++tp;
      const double precision =
          static_cast<double>(tp) / static_cast<double>(k + 1);
      ap += precision / static_cast<double>(n_pos);
    }
  }
  return ap;
}

inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  return average_precision(scores, labels, {});
}

}  // namespace pscdet
