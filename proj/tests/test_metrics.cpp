#include <gtest/gtest.h>

#include <cmath>

#include "pscdet/metrics.hpp"
#include "pscdet/rng.hpp"

using namespace pscdet;

namespace {

// O(n^2) pairwise oracle: P(score_pos > score_neg) with ties counted 1/2.
double auc_oracle(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Threshold-enumeration oracle for AP: walk prefixes of the sorted order and
// recount TP/FP from scratch at each cut.
double ap_oracle(const std::vector<double>& scores,
                 const std::vector<int>& labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::size_t n_pos = 0;
  for (int y : labels) n_pos += y ? 1 : 0;
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    std::size_t tp = 0;
    for (std::size_t i = 0; i < k; ++i) tp += labels[order[i]] ? 1 : 0;
    const double precision = static_cast<double>(tp) / static_cast<double>(k);
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace

TEST(RocAuc, PerfectSeparation) {
  EXPECT_DOUBLE_EQ(roc_auc({0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0}), 1.0);
}

TEST(RocAuc, HandComputedPairwiseCase) {
  // pos = {0.9, 0.3}, neg = {0.8, 0.1}: 3 of 4 pairs ordered correctly
  EXPECT_DOUBLE_EQ(roc_auc({0.9, 0.8, 0.3, 0.1}, {1, 0, 1, 0}), 0.75);
}

TEST(RocAuc, AllTiedIsHalf) {
  EXPECT_DOUBLE_EQ(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}), 0.5);
}

TEST(RocAuc, SingleClassIsError) {
  EXPECT_THROW(roc_auc({0.1, 0.2}, {1, 1}), DataError);
  EXPECT_THROW(roc_auc({0.1, 0.2}, {0, 0}), DataError);
}

TEST(RocAuc, InvariantUnderMonotoneTransform) {
  Rng rng(3);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    scores.push_back(rng.uniform());
    labels.push_back(rng.bernoulli(0.3) ? 1 : 0);
  }
  labels[0] = 1;
  labels[1] = 0;
  std::vector<double> warped = scores;
  for (double& s : warped) s = std::exp(3.0 * s) + 1.0;
  EXPECT_DOUBLE_EQ(roc_auc(scores, labels), roc_auc(warped, labels));
}

TEST(Prf, PerfectPredictions) {
  auto r = precision_recall_f1({1, 0, 1, 0}, {1, 0, 1, 0});
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
}

TEST(Prf, PredictAllPositive) {
  std::vector<int> labels(20, 0);
  for (int i = 0; i < 5; ++i) labels[i] = 1;
  std::vector<int> pred(20, 1);
  auto r = precision_recall_f1(pred, labels);
  EXPECT_DOUBLE_EQ(r.precision, 0.25);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.f1, 0.4);
  EXPECT_EQ(r.counts.tp, 5);
  EXPECT_EQ(r.counts.fp, 15);
}

TEST(Prf, PredictAllNegative) {
  auto r = precision_recall_f1({0, 0, 0}, {1, 0, 1});
  EXPECT_DOUBLE_EQ(r.precision, 0.0);
  EXPECT_DOUBLE_EQ(r.recall, 0.0);
  EXPECT_DOUBLE_EQ(r.f1, 0.0);
}

TEST(AveragePrecision, PerfectSeparation) {
  EXPECT_DOUBLE_EQ(average_precision({0.9, 0.8, 0.2}, {1, 1, 0}), 1.0);
}

TEST(AveragePrecision, HandComputedWalk) {
  // order: 0.9(neg), 0.8(pos), 0.3(neg) -> single positive found at rank 2
  EXPECT_DOUBLE_EQ(average_precision({0.9, 0.8, 0.3}, {0, 1, 0}), 0.5);
}

TEST(AveragePrecision, SingleClassIsError) {
  EXPECT_THROW(average_precision({0.1, 0.2}, {1, 1}), DataError);
}

TEST(AveragePrecision, RandomScoresApproachPrevalence) {
  Rng rng(9);
  const double prevalence = 0.2;
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 20000; ++i) {
    scores.push_back(rng.uniform());
    labels.push_back(rng.bernoulli(prevalence) ? 1 : 0);
  }
  labels[0] = 1;
  labels[1] = 0;
  EXPECT_NEAR(average_precision(scores, labels), prevalence, 0.05);
}

TEST(MetricsProperty, PermutationInvariance) {
  Rng rng(17);
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) {
    scores.push_back(rng.below(10) / 10.0);  // deliberate ties
    labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
    ids.push_back("id" + std::to_string(i));
  }
  labels[0] = 1;
  labels[1] = 0;
  const double auc0 = roc_auc(scores, labels);
  const double ap0 = average_precision(scores, labels, ids);

  std::vector<std::size_t> perm(scores.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng shuffler(18);
  shuffler.shuffle(perm);
  std::vector<double> s2;
  std::vector<int> l2;
  std::vector<std::string> id2;
  for (std::size_t i : perm) {
    s2.push_back(scores[i]);
    l2.push_back(labels[i]);
    id2.push_back(ids[i]);
  }
  EXPECT_DOUBLE_EQ(roc_auc(s2, l2), auc0);
  EXPECT_DOUBLE_EQ(average_precision(s2, l2, id2), ap0);
}

// Exhaustive comparison against brute-force oracles for every labeling of
// datasets up to size 12 (both-class labelings only), including tied scores.
TEST(MetricsProperty, MatchesBruteForceUpToTwelve) {
  for (std::size_t n = 2; n <= 12; ++n) {
    Rng rng(1000 + n);
    for (int scoreset = 0; scoreset < 3; ++scoreset) {
      std::vector<double> scores(n);
      for (auto& s : scores) {
        s = scoreset == 0 ? rng.uniform()
                          : static_cast<double>(rng.below(4)) / 4.0;  // ties
      }
      for (std::uint64_t bits = 1; bits + 1 < (1ull << n); ++bits) {
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = (bits >> i) & 1;
        ASSERT_NEAR(roc_auc(scores, labels), auc_oracle(scores, labels), 1e-12);
        ASSERT_NEAR(average_precision(scores, labels),
                    ap_oracle(scores, labels), 1e-12);
      }
    }
  }
}
