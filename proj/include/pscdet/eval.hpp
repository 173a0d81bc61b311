#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pscdet/csv.hpp"
#include "pscdet/dsrae.hpp"
#include "pscdet/error.hpp"
#include "pscdet/grouprank.hpp"
#include "pscdet/metrics.hpp"

namespace pscdet {

struct SplitMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f_score = 0.0;
  double auc = 0.0;
  double ap = 0.0;
  BinaryCounts counts;
  std::size_t n = 0;
};

struct EvalReport {
  std::map<std::string, SplitMetrics> splits;
  std::string threshold;
  std::string threshold_source = "explicit";
  std::string backend;
  std::uint64_t group_seed = 0;
  std::string checkpoint_digest;
  std::string config_digest;

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& [name, m] : splits) {
      j["splits"][name] = {
          {"precision", m.precision},
          {"recall", m.recall},
          {"f_score", m.f_score},
          {"auc", m.auc},
          {"ap", m.ap},
          {"counts",
           {{"tp", m.counts.tp},
            {"fp", m.counts.fp},
            {"tn", m.counts.tn},
            {"fn", m.counts.fn}}},
          {"n", m.n}};
    }
    j["threshold"] = threshold;
    j["threshold_source"] = threshold_source;
    j["backend"] = backend;
    j["group_seed"] = group_seed;
    if (!checkpoint_digest.empty()) j["checkpoint_digest"] = checkpoint_digest;
    if (!config_digest.empty()) j["config_digest"] = config_digest;
    return j;
  }
};

using GroupRanker = std::function<RankResult(const RankGroup&)>;

namespace detail {

struct ScoredSplit {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> scores;
};

// Partition into groups, run the backend, and put scores back in record
// order.
inline ScoredSplit rank_split(const ModelParams& params,
                              const std::vector<PscRecord>& records,
                              const GroupRanker& ranker, std::uint64_t seed) {
  ScoredSplit out;
  auto members = make_rank_members(params, records);
  auto groups = partition_inference(members, kGroupSize, seed);
  std::map<std::string, double> by_id;
  for (const auto& g : groups) {
    RankResult r = ranker(g);
    if (r.scores.size() != g.members.size()) {
      throw BackendError("backend returned " + std::to_string(r.scores.size()) +
                         " scores for a group of " +
                         std::to_string(g.members.size()));
    }
    for (std::size_t i = 0; i < g.members.size(); ++i) {
      by_id[g.members[i].id] = r.scores[i];
    }
  }
  for (const auto& r : records) {
    out.ids.push_back(r.id);
    out.labels.push_back(r.detained ? 1 : 0);
    out.scores.push_back(by_id.at(r.id));
  }
  return out;
}

}  // namespace detail

inline GroupRanker oracle_ranker() {
  return [](const RankGroup& g) { return rank_backend_oracle(g); };
}

// Scores each eval split through the grouped backend, thresholds, and
// reports rank metrics (AUC/AP on the scores) next to the thresholded
// confusion metrics. Splits must contain both classes.
inline EvalReport evaluate(const ModelParams& params,
                           const std::vector<PscRecord>& records,
                           const GroupRanker& ranker,
                           const std::string& backend_name,
                           const ThresholdMode& threshold,
                           std::uint64_t group_seed,
                           const std::string& scores_csv_path = "") {
  EvalReport report;
  report.threshold = threshold_to_string(threshold);
  report.backend = backend_name;
  report.group_seed = group_seed;

  const std::pair<Split, const char*> eval_splits[] = {
      {Split::val, "val"},
      {Split::test_global, "test_global"},
      {Split::test_regional, "test_regional"},
  };

  std::ofstream scores_out;
  if (!scores_csv_path.empty()) {
    scores_out.open(scores_csv_path, std::ios::binary);
    if (!scores_out)
      throw DataError("cannot open '" + scores_csv_path + "' for writing");
    scores_out << "id,label,score\n";
  }

  std::size_t split_idx = 0;
  for (const auto& [split, name] : eval_splits) {
    std::vector<PscRecord> subset;
    for (const auto& r : records) {
      if (r.split == split) subset.push_back(r);
    }
    ++split_idx;
    if (subset.empty()) continue;

    auto scored = detail::rank_split(params, subset, ranker,
                                     mix_seed(group_seed, split_idx));
    bool has_pos = false, has_neg = false;
    for (int y : scored.labels) (y ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) {
      throw DataError(std::string("split '") + name +
                      "' needs both classes for evaluation");
    }

    auto predictions = apply_threshold(scored.scores, scored.ids, threshold);
    auto prf = precision_recall_f1(predictions, scored.labels);
    SplitMetrics m;
    m.precision = prf.precision;
    m.recall = prf.recall;
    m.f_score = prf.f1;
    m.counts = prf.counts;
    m.auc = roc_auc(scored.scores, scored.labels);
    m.ap = average_precision(scored.scores, scored.labels, scored.ids);
    m.n = subset.size();
    report.splits[name] = m;

    if (scores_out.is_open()) {
      for (std::size_t i = 0; i < scored.ids.size(); ++i) {
        scores_out << scored.ids[i] << ',' << scored.labels[i] << ','
                   << format_double(scored.scores[i]) << '\n';
      }
    }
  }
  if (report.splits.empty()) {
    throw DataError("no evaluation splits (val/test_global/test_regional)");
  }
  return report;
}

// Detention prevalence of the validation split; the default rate threshold.
inline double validation_prevalence(const std::vector<PscRecord>& records) {
  std::size_t n = 0, det = 0;
  for (const auto& r : records) {
    if (r.split == Split::val) {
      ++n;
      if (r.detained) ++det;
    }
  }
  if (n == 0 || det == 0 || det == n) {
    throw DataError(
        "cannot derive a rate threshold from the validation split");
  }
  return static_cast<double>(det) / static_cast<double>(n);
}

inline std::string file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return "";
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

inline std::string string_digest(const std::string& s) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(s)));
  return buf;
}

}  // namespace pscdet
