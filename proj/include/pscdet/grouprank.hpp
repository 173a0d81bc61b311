#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pscdet/dsrae.hpp"
#include "pscdet/error.hpp"
#include "pscdet/rng.hpp"

namespace pscdet {

struct RankMember {
  std::string id;
  std::vector<double> features;          // concatenated subspace codes (2d)
  std::optional<double> model_score;     // reconstruction-ratio score
  std::optional<bool> detained;          // train-time only
};

struct RankGroup {
  std::vector<RankMember> members;
};

struct RankResult {
  std::vector<double> scores;  // one per member, in member order
  std::string backend;
  std::string raw_response;    // remote backend only
};

inline constexpr std::size_t kGroupSize = 20;
inline constexpr std::size_t kDetainedPerGroup = 2;

// Member features as the ranking backends see them: regular-branch code
// concatenated with the detention-branch code (zeros in rsr mode, keeping
// the prompt shape stable).
inline RankMember make_rank_member(const ModelParams& p, const PscRecord& r) {
  RankMember m;
  m.id = r.id;
  m.detained = r.detained;
  const FeatureGrid g = apply_normalizer(encode_record(r), p.norm);
  const Tensor d_all = encode(p, g);
  const Tensor z_reg = dsr_project(p.a_reg, d_all);
  m.features.assign(z_reg.data.begin(), z_reg.data.end());
  if (p.mode == ModelMode::dsr) {
    const Tensor z_det = dsr_project(p.a_det, d_all);
    m.features.insert(m.features.end(), z_det.data.begin(), z_det.data.end());
  } else {
    m.features.insert(m.features.end(), p.arch.dsr_dim, 0.0);
  }
  m.model_score = detention_score(p, g, r.id).score;
  return m;
}

inline std::vector<RankMember> make_rank_members(
    const ModelParams& p, const std::vector<PscRecord>& records) {
  std::vector<RankMember> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(make_rank_member(p, r));
  return out;
}

struct GroupingResult {
  std::vector<RankGroup> groups;
  std::vector<std::string> leftover_detained;  // odd detained count
};

// floor(n_det/2) training groups of 20 with exactly 2 detained each. Every
// detained sample is used at most once; regulars are drawn without
// replacement across groups.
inline GroupingResult make_training_groups(
    const std::vector<RankMember>& samples, std::uint64_t seed) {
  std::vector<std::size_t> det, reg;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].detained.has_value())
      throw DataError("training groups need labeled samples");
    (*samples[i].detained ? det : reg).push_back(i);
  }
  if (det.size() < 2)
    throw DataError("need at least 2 detained samples, have " +
                    std::to_string(det.size()));
  const std::size_t n_groups = det.size() / 2;
  const std::size_t need_reg = n_groups * (kGroupSize - kDetainedPerGroup);
  if (reg.size() < need_reg) {
    throw DataError("insufficient regular samples: need " +
                    std::to_string(need_reg) + ", have " +
                    std::to_string(reg.size()));
  }
  Rng det_rng(mix_seed(seed, 21));
  Rng reg_rng(mix_seed(seed, 22));
  det_rng.shuffle(det);
  reg_rng.shuffle(reg);

  GroupingResult result;
  result.groups.reserve(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    RankGroup group;
    group.members.push_back(samples[det[2 * g]]);
    group.members.push_back(samples[det[2 * g + 1]]);
    for (std::size_t k = 0; k < kGroupSize - kDetainedPerGroup; ++k) {
      group.members.push_back(
          samples[reg[g * (kGroupSize - kDetainedPerGroup) + k]]);
    }
    Rng member_rng(mix_seed(seed, 1000 + g));
    member_rng.shuffle(group.members);
    result.groups.push_back(std::move(group));
  }
  if (det.size() % 2 == 1) {
    result.leftover_detained.push_back(samples[det.back()].id);
  }
  return result;
}

// Contiguous partition after a seeded shuffle; the last group may be short.
inline std::vector<RankGroup> partition_inference(
    const std::vector<RankMember>& samples, std::size_t group_size = kGroupSize,
    std::uint64_t seed = 0) {
  if (group_size == 0) throw DataError("group_size must be positive");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 31));
  rng.shuffle(order);
  std::vector<RankGroup> groups;
  for (std::size_t start = 0; start < order.size(); start += group_size) {
    RankGroup g;
    const std::size_t end = std::min(order.size(), start + group_size);
    for (std::size_t k = start; k < end; ++k) {
      g.members.push_back(samples[order[k]]);
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

inline constexpr const char* kPromptInstruction =
    "You are ranking ships by detention risk. For each sample, output a "
    "detention probability in [0,1]. Respond with a JSON array of N numbers "
    "in sample order.";

// Fixed prompt template. Instruction line with the member count substituted,
// then one `S<k>: v1,v2,...` line per member with every value printed to 4
// decimal places (round half to even).
inline std::string serialize_prompt(const RankGroup& group) {
  if (group.members.empty()) throw DataError("cannot serialize empty group");
  const std::size_t flen = group.members.front().features.size();
  std::string out;
  {
    std::string instr = kPromptInstruction;
    const auto pos = instr.find(" N ");
    instr.replace(pos + 1, 1, std::to_string(group.members.size()));
    out += instr;
    out += '\n';
  }
  char buf[48];
  for (std::size_t k = 0; k < group.members.size(); ++k) {
    const auto& m = group.members[k];
    if (m.features.size() != flen) {
      throw DataError("feature length mismatch in group member '" + m.id + "'");
    }
    std::snprintf(buf, sizeof(buf), "S%02zu: ", k + 1);
    out += buf;
    for (std::size_t i = 0; i < m.features.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.4f", m.features[i]);
      if (i) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

struct ParsedScores {
  std::vector<double> scores;
  bool clamped = false;  // some score was nudged back into [0,1]
};

// Pulls the first JSON array out of free-form text and validates it as n
// scores. Values up to 0.05 outside [0,1] are clamped with a flag; anything
// further out is an error so the caller can retry.
inline ParsedScores parse_response(const std::string& text, std::size_t n) {
  const std::size_t start = text.find('[');
  if (start == std::string::npos) throw ParseError("no JSON array in response");
  std::size_t depth = 0;
  std::size_t end = std::string::npos;
  for (std::size_t i = start; i < text.size(); ++i) {
    if (text[i] == '[') ++depth;
    if (text[i] == ']' && --depth == 0) {
      end = i;
      break;
    }
  }
  if (end == std::string::npos) throw ParseError("unterminated JSON array");
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(text.substr(start, end - start + 1));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed JSON array: ") + e.what());
  }
  if (!arr.is_array() || arr.size() != n) {
    throw ParseError("expected " + std::to_string(n) + " scores, got " +
                     std::to_string(arr.size()));
  }
  ParsedScores out;
  out.scores.reserve(n);
  for (const auto& v : arr) {
    if (!v.is_number()) throw ParseError("non-numeric score in response");
    double x = v.get<double>();
    if (!std::isfinite(x)) throw ParseError("non-finite score in response");
    if (x < -0.05 || x > 1.05) {
      throw ParseError("score out of range: " + std::to_string(x));
    }
    if (x < 0.0) {
      x = 0.0;
      out.clamped = true;
    } else if (x > 1.0) {
      x = 1.0;
      out.clamped = true;
    }
    out.scores.push_back(x);
  }
  return out;
}

// Deterministic stand-in for the remote ranker: passes the members' own
// model scores through.
inline RankResult rank_backend_oracle(const RankGroup& group) {
  RankResult r;
  r.backend = "oracle";
  r.scores.reserve(group.members.size());
  for (const auto& m : group.members) {
    if (!m.model_score.has_value())
      throw DataError("oracle backend: member '" + m.id + "' has no score");
    r.scores.push_back(*m.model_score);
  }
  return r;
}

// Gold completions for fine-tuning export: the two detained members take
// 0.90/0.95 ordered by model score, regulars spread evenly over [0.05,0.80]
// in model-score order.
inline std::vector<double> gold_scores(const RankGroup& group) {
  std::vector<std::size_t> det, reg;
  for (std::size_t i = 0; i < group.members.size(); ++i) {
    const auto& m = group.members[i];
    if (!m.detained.has_value()) throw DataError("unlabeled group");
    if (!m.model_score.has_value())
      throw DataError("gold scores need member model scores");
    (*m.detained ? det : reg).push_back(i);
  }
  if (det.size() != kDetainedPerGroup) {
    throw DataError("training group must contain exactly 2 detained members");
  }
  auto by_score = [&group](std::size_t a, std::size_t b) {
    const double sa = *group.members[a].model_score;
    const double sb = *group.members[b].model_score;
    if (sa != sb) return sa < sb;
    return group.members[a].id < group.members[b].id;
  };
  std::sort(det.begin(), det.end(), by_score);
  std::sort(reg.begin(), reg.end(), by_score);

  std::vector<double> gold(group.members.size(), 0.0);
  gold[det[0]] = 0.90;
  gold[det[1]] = 0.95;
  const double lo = 0.05, hi = 0.80;
  const std::size_t nr = reg.size();
  for (std::size_t j = 0; j < nr; ++j) {
    gold[reg[j]] =
        nr > 1 ? lo + (hi - lo) * static_cast<double>(j) /
                          static_cast<double>(nr - 1)
               : hi;
  }
  return gold;
}

// One `{"prompt": ..., "completion": [...]}` object per line, UTF-8, LF.
inline void export_sft_jsonl(const std::vector<RankGroup>& groups,
                             const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& g : groups) {
    nlohmann::ordered_json line;
    line["prompt"] = serialize_prompt(g);
    line["completion"] = gold_scores(g);
    out << line.dump() << '\n';
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

struct ThresholdMode {
  enum class Kind { fixed, rate };
  Kind kind = Kind::rate;
  double value = 0.05;
};

// "fixed:0.5" or "rate:0.05".
inline ThresholdMode threshold_from_string(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos)
    throw DataError("threshold must look like fixed:0.5 or rate:0.05");
  const std::string kind = s.substr(0, colon);
  double value = 0.0;
  try {
    value = std::stod(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw DataError("bad threshold value in '" + s + "'");
  }
  ThresholdMode m;
  if (kind == "fixed") {
    if (!(value >= 0.0 && value <= 1.0))
      throw DataError("fixed threshold must be in [0,1]");
    m.kind = ThresholdMode::Kind::fixed;
  } else if (kind == "rate") {
    if (!(value > 0.0 && value < 1.0))
      throw DataError("rate threshold must be in (0,1)");
    m.kind = ThresholdMode::Kind::rate;
  } else {
    throw DataError("unknown threshold kind '" + kind + "'");
  }
  m.value = value;
  return m;
}

inline std::string threshold_to_string(const ThresholdMode& m) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s:%g",
                m.kind == ThresholdMode::Kind::fixed ? "fixed" : "rate",
                m.value);
  return buf;
}

// fixed: detain iff score >= theta. rate: detain the top ceil(k*n) scores,
// ties broken by ascending id.
inline std::vector<int> apply_threshold(const std::vector<double>& scores,
                                        const std::vector<std::string>& ids,
                                        const ThresholdMode& mode) {
  if (!ids.empty() && ids.size() != scores.size())
    throw DataError("apply_threshold: ids size mismatch");
  std::vector<int> pred(scores.size(), 0);
  if (mode.kind == ThresholdMode::Kind::fixed) {
    if (!(mode.value >= 0.0 && mode.value <= 1.0))
      throw DataError("fixed threshold must be in [0,1]");
    for (std::size_t i = 0; i < scores.size(); ++i) {
      pred[i] = scores[i] >= mode.value ? 1 : 0;
    }
    return pred;
  }
  if (!(mode.value > 0.0 && mode.value < 1.0))
    throw DataError("rate threshold must be in (0,1)");
  const std::size_t n = scores.size();
  if (n == 0) return pred;
  const std::size_t top = static_cast<std::size_t>(
      std::ceil(mode.value * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if (!ids.empty()) return ids[a] < ids[b];
    return a < b;
  });
  for (std::size_t k = 0; k < std::min(top, n); ++k) pred[order[k]] = 1;
  return pred;
}

}  // namespace pscdet
