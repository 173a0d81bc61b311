#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pscdet/error.hpp"

namespace pscdet {

inline constexpr std::size_t kGridRows = 2;
inline constexpr std::size_t kGridCols = 7;
inline constexpr std::size_t kNumAttributes = kGridRows * kGridCols;

// Column order of the model input grid. Row 0 holds vessel particulars,
// row 1 the inspection-history attributes.
inline constexpr std::array<const char*, kNumAttributes> kAttributeNames = {
    "ship_tonnage",
    "flag_performance",
    "recognized_organization",
    "company_performance",
    "classification_society_number",
    "ship_type",
    "ship_age",
    "last_deficiency_number",
    "interval_days",
    "last_inspection_state",
    "avg_def_36m",
    "max_def_36m",
    "prob_def_36m",
    "total_def_36m",
};

enum class Split { train, val, test_global, test_regional };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test_global: return "test_global";
    case Split::test_regional: return "test_regional";
  }
  return "?";
}

inline std::optional<Split> split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test_global") return Split::test_global;
  if (s == "test_regional") return Split::test_regional;
  return std::nullopt;
}

// One inspection record. Ordinal performance bands are 0..3 with 0 the best.
struct PscRecord {
  std::string id;
  double ship_tonnage = 0.0;
  int flag_performance = 0;
  int recognized_organization = 0;
  int company_performance = 0;
  int classification_society_number = 0;
  int ship_type = 0;
  double ship_age = 0.0;
  int last_deficiency_number = 0;
  int interval_days = 0;
  int last_inspection_state = 0;
  double avg_def_36m = 0.0;
  int max_def_36m = 0;
  double prob_def_36m = 0.0;
  int total_def_36m = 0;
  bool detained = false;
  Split split = Split::train;

  bool operator==(const PscRecord&) const = default;
};

struct FieldViolation {
  std::string field;
  std::string message;
};
using ValidationReport = std::vector<FieldViolation>;

inline ValidationReport validate_record(const PscRecord& r) {
  ValidationReport rep;
  auto bad = [&rep](const char* field, const std::string& msg) {
    rep.push_back({field, msg});
  };
  if (r.id.empty()) bad("id", "must be non-empty");
  if (!std::isfinite(r.ship_tonnage) || r.ship_tonnage < 0.0)
    bad("ship_tonnage", "must be a finite non-negative real");
  if (r.flag_performance < 0 || r.flag_performance > 3)
    bad("flag_performance", "ordinal out of range 0..3");
  if (r.recognized_organization < 0 || r.recognized_organization > 3)
    bad("recognized_organization", "ordinal out of range 0..3");
  if (r.company_performance < 0 || r.company_performance > 3)
    bad("company_performance", "ordinal out of range 0..3");
  if (r.classification_society_number < 0)
    bad("classification_society_number", "must be non-negative");
  if (r.ship_type < 0) bad("ship_type", "must be non-negative");
  if (!std::isfinite(r.ship_age) || r.ship_age < 0.0)
    bad("ship_age", "must be a finite non-negative real");
  if (r.last_deficiency_number < 0)
    bad("last_deficiency_number", "must be non-negative");
  if (r.interval_days < 0) bad("interval_days", "must be non-negative");
  if (r.last_inspection_state != 0 && r.last_inspection_state != 1)
    bad("last_inspection_state", "must be 0 or 1");
  if (!std::isfinite(r.avg_def_36m) || r.avg_def_36m < 0.0)
    bad("avg_def_36m", "must be a finite non-negative real");
  if (r.max_def_36m < 0) bad("max_def_36m", "must be non-negative");
  if (!std::isfinite(r.prob_def_36m) || r.prob_def_36m < 0.0 ||
      r.prob_def_36m > 1.0)
    bad("prob_def_36m", "must be in [0,1]");
  if (r.total_def_36m < 0) bad("total_def_36m", "must be non-negative");
  if (r.total_def_36m < r.max_def_36m)
    bad("total_def_36m", "must be >= max_def_36m");
  return rep;
}

inline std::string report_to_string(const ValidationReport& rep) {
  std::string s;
  for (const auto& v : rep) {
    if (!s.empty()) s += "; ";
    s += v.field + ": " + v.message;
  }
  return s;
}

// The encoded 2x7 model input, row-major.
struct FeatureGrid {
  std::array<double, kNumAttributes> values{};

  double& at(std::size_t row, std::size_t col) {
    return values[row * kGridCols + col];
  }
  double at(std::size_t row, std::size_t col) const {
    return values[row * kGridCols + col];
  }

  bool operator==(const FeatureGrid&) const = default;
};

// Deterministic attribute -> grid mapping, no scaling.
inline FeatureGrid encode_record(const PscRecord& r) {
  ValidationReport rep = validate_record(r);
  if (!rep.empty()) {
    throw DataError("invalid record '" + r.id + "': " + report_to_string(rep));
  }
  FeatureGrid g;
  g.at(0, 0) = r.ship_tonnage;
  g.at(0, 1) = r.flag_performance;
  g.at(0, 2) = r.recognized_organization;
  g.at(0, 3) = r.company_performance;
  g.at(0, 4) = r.classification_society_number;
  g.at(0, 5) = r.ship_type;
  g.at(0, 6) = r.ship_age;
  g.at(1, 0) = r.last_deficiency_number;
  g.at(1, 1) = r.interval_days;
  g.at(1, 2) = r.last_inspection_state;
  g.at(1, 3) = r.avg_def_36m;
  g.at(1, 4) = r.max_def_36m;
  g.at(1, 5) = r.prob_def_36m;
  g.at(1, 6) = r.total_def_36m;
  return g;
}

// Per-cell z-score statistics, fitted on the training split only.
struct NormStats {
  std::array<double, kNumAttributes> mean{};
  std::array<double, kNumAttributes> stddev{};

  NormStats() {
    mean.fill(0.0);
    stddev.fill(1.0);
  }

  bool operator==(const NormStats&) const = default;
};

// Population mean/std per cell. Constant cells keep stddev 0 and are only
// centered on apply.
inline NormStats fit_normalizer(const std::vector<FeatureGrid>& grids) {
  if (grids.empty()) throw DataError("empty fit set");
  if (grids.size() < 2) throw DataError("fit set needs at least 2 grids");
  NormStats st;
  const double n = static_cast<double>(grids.size());
  for (std::size_t c = 0; c < kNumAttributes; ++c) {
    double sum = 0.0;
    for (const auto& g : grids) sum += g.values[c];
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& g : grids) {
      const double d = g.values[c] - mean;
      ss += d * d;
    }
    st.mean[c] = mean;
    st.stddev[c] = std::sqrt(ss / n);
  }
  return st;
}

inline FeatureGrid apply_normalizer(const FeatureGrid& g,
                                    const NormStats& st) {
  FeatureGrid out;
  for (std::size_t c = 0; c < kNumAttributes; ++c) {
    const double centered = g.values[c] - st.mean[c];
    out.values[c] = st.stddev[c] > 0.0 ? centered / st.stddev[c] : centered;
  }
  return out;
}

inline FeatureGrid invert_normalizer(const FeatureGrid& g,
                                     const NormStats& st) {
  FeatureGrid out;
  for (std::size_t c = 0; c < kNumAttributes; ++c) {
    const double scaled = st.stddev[c] > 0.0 ? g.values[c] * st.stddev[c]
                                             : g.values[c];
    out.values[c] = scaled + st.mean[c];
  }
  return out;
}

}  // namespace pscdet
