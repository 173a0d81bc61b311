#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "pscdet/error.hpp"
#include "pscdet/rng.hpp"
#include "pscdet/schema.hpp"

namespace pscdet {

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test_global = 0.1;
  double test_regional = 0.1;
};

// Synthetic dataset recipe. `separability` is the detained-class mean shift,
// in pre-clip standard deviations, applied to the five history attributes
// that carry the class signal.
struct GenSpec {
  std::size_t n_total = 0;
  double detention_rate = 0.0;
  double separability = 0.0;
  std::uint64_t seed = 0;
  SplitFractions split_fractions;
};

// A slice of the regular class mimics ships with a poor history that were
// nonetheless not detained; they keep the two score distributions from being
// trivially separable.
inline constexpr double kHardRegularFraction = 0.04;
inline constexpr double kHardRegularShiftFactor = 0.6;

inline void validate_gen_spec(const GenSpec& s) {
  if (s.n_total == 0) throw DataError("invalid GenSpec field n_total: must be positive");
  if (!(s.detention_rate > 0.0 && s.detention_rate < 1.0))
    throw DataError("invalid GenSpec field detention_rate: must be in (0,1)");
  if (!(s.separability >= 0.0))
    throw DataError("invalid GenSpec field separability: must be non-negative");
  const double f[4] = {s.split_fractions.train, s.split_fractions.val,
                       s.split_fractions.test_global,
                       s.split_fractions.test_regional};
  double sum = 0.0;
  for (double v : f) {
    if (!(v >= 0.0))
      throw DataError("invalid GenSpec field split_fractions: negative fraction");
    sum += v;
  }
  if (std::fabs(sum - 1.0) > 1e-9)
    throw DataError("invalid GenSpec field split_fractions: must sum to 1");
}

inline GenSpec gen_spec_from_json(const nlohmann::json& j) {
  GenSpec s;
  try {
    s.n_total = j.at("n_total").get<std::size_t>();
    s.detention_rate = j.at("detention_rate").get<double>();
    s.separability = j.at("separability").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("split_fractions")) {
      const auto& sf = j.at("split_fractions");
      s.split_fractions.train = sf.at("train").get<double>();
      s.split_fractions.val = sf.at("val").get<double>();
      s.split_fractions.test_global = sf.at("test_global").get<double>();
      s.split_fractions.test_regional = sf.at("test_regional").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad GenSpec JSON: ") + e.what());
  }
  validate_gen_spec(s);
  return s;
}

namespace detail {

inline double clip(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

inline double round_to(double v, double unit) {
  return std::round(v / unit) * unit;
}

inline int categorical(Rng& g, std::initializer_list<double> probs) {
  double u = g.uniform();
  int k = 0;
  for (double p : probs) {
    if (u < p) return k;
    u -= p;
    ++k;
  }
  return k - 1;
}

// Largest-remainder apportionment of n items over the four splits.
inline std::array<std::size_t, 4> apportion(std::size_t n,
                                            const SplitFractions& f) {
  const double fr[4] = {f.train, f.val, f.test_global, f.test_regional};
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 4; ++i) {
    const double exact = fr[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 4; ++i) {
      if (rem[i] > rem[best]) best = i;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

inline std::vector<Split> split_tags(std::size_t n, const SplitFractions& f,
                                     Rng& rng) {
  const auto counts = apportion(n, f);
  std::vector<Split> tags;
  tags.reserve(n);
  const Split order[4] = {Split::train, Split::val, Split::test_global,
                          Split::test_regional};
  for (int i = 0; i < 4; ++i) {
    tags.insert(tags.end(), counts[i], order[i]);
  }
  rng.shuffle(tags);
  return tags;
}

}  // namespace detail

// Deterministic synthetic dataset. Each record draws from its own stream
// derived from (seed, index), so the result does not depend on evaluation
// order. Exactly round(n_total * rho) records are detained.
inline std::vector<PscRecord> generate_dataset(const GenSpec& spec) {
  validate_gen_spec(spec);
  const std::size_t n = spec.n_total;
  const std::size_t n_det = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * spec.detention_rate));

  std::vector<std::uint8_t> detained(n, 0);
  std::fill(detained.begin(), detained.begin() + std::min(n_det, n), 1);
  Rng label_rng(mix_seed(spec.seed, 1));
  label_rng.shuffle(detained);

  // Splits are stratified per class so small eval splits keep both classes.
  Rng tag_rng_det(mix_seed(spec.seed, 2));
  Rng tag_rng_reg(mix_seed(spec.seed, 3));
  auto det_tags = detail::split_tags(n_det, spec.split_fractions, tag_rng_det);
  auto reg_tags =
      detail::split_tags(n - n_det, spec.split_fractions, tag_rng_reg);

  std::vector<PscRecord> records;
  records.reserve(n);
  std::size_t det_seen = 0, reg_seen = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Rng g(mix_seed(spec.seed, 0x100000 + i));
    PscRecord r;
    char idbuf[24];
    std::snprintf(idbuf, sizeof(idbuf), "r%07zu", i);
    r.id = idbuf;
    r.detained = detained[i] != 0;
    r.split = r.detained ? det_tags[det_seen++] : reg_tags[reg_seen++];

    double shift = 0.0;
    if (r.detained) {
      shift = spec.separability;
    } else if (g.bernoulli(kHardRegularFraction)) {
      shift = spec.separability * kHardRegularShiftFactor;
    }

    r.ship_tonnage = detail::round_to(
        detail::clip(std::exp(g.normal(9.0, 1.0)), 100.0, 300000.0), 0.1);
    r.flag_performance = detail::categorical(g, {0.45, 0.30, 0.17, 0.08});
    r.recognized_organization = detail::categorical(g, {0.50, 0.30, 0.15, 0.05});
    r.company_performance = detail::categorical(g, {0.40, 0.30, 0.20, 0.10});
    r.classification_society_number = static_cast<int>(g.below(25));
    r.ship_type = static_cast<int>(g.below(10));
    r.ship_age =
        detail::round_to(detail::clip(g.normal(15.0, 8.0), 0.0, 60.0), 0.1);
    r.last_deficiency_number = static_cast<int>(
        std::llround(detail::clip(g.normal(2.0 + shift * 2.0, 2.0), 0.0, 40.0)));
    r.interval_days = static_cast<int>(
        std::llround(detail::clip(g.normal(180.0, 90.0), 0.0, 1460.0)));
    r.last_inspection_state = g.bernoulli(0.3) ? 1 : 0;
    r.avg_def_36m = detail::round_to(
        detail::clip(g.normal(1.5 + shift * 1.2, 1.2), 0.0, 30.0), 1e-4);
    r.max_def_36m = static_cast<int>(
        std::llround(detail::clip(g.normal(3.0 + shift * 2.0, 2.0), 0.0, 60.0)));
    const int extra = static_cast<int>(std::llround(
        detail::clip(g.normal(4.0 + shift * 3.0, 3.0), 0.0, 200.0)));
    r.total_def_36m = r.max_def_36m + extra;
    r.prob_def_36m = detail::round_to(
        detail::clip(g.normal(0.35 + shift * 0.15, 0.15), 0.0, 1.0), 1e-4);

    records.push_back(std::move(r));
  }
  return records;
}

// Keeps every detained record and a uniform without-replacement sample of
// regulars sized round(n_det * (1 - rho) / rho), half away from zero.
// Relative record order is preserved.
inline std::vector<PscRecord> downsample_regular(
    const std::vector<PscRecord>& records, double target_rho,
    std::uint64_t seed) {
  if (!(target_rho > 0.0 && target_rho <= 1.0))
    throw DataError("target_rho must be in (0,1]");
  std::vector<std::size_t> reg_idx;
  std::size_t n_det = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].detained) {
      ++n_det;
    } else {
      reg_idx.push_back(i);
    }
  }
  if (n_det == 0) throw DataError("downsample needs at least one detained record");
  const std::size_t want_reg = static_cast<std::size_t>(std::llround(
      static_cast<double>(n_det) * (1.0 - target_rho) / target_rho));
  if (want_reg > reg_idx.size()) {
    throw DataError("insufficient regular samples: need " +
                    std::to_string(want_reg) + ", have " +
                    std::to_string(reg_idx.size()));
  }
  Rng rng(seed);
  rng.shuffle(reg_idx);
  std::vector<std::uint8_t> keep(records.size(), 0);
  for (std::size_t k = 0; k < want_reg; ++k) keep[reg_idx[k]] = 1;
  std::vector<PscRecord> out;
  out.reserve(n_det + want_reg);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].detained || keep[i]) out.push_back(records[i]);
  }
  return out;
}

}  // namespace pscdet
