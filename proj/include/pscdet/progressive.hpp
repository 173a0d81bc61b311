#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pscdet/checkpoint.hpp"
#include "pscdet/csv.hpp"
#include "pscdet/datagen.hpp"
#include "pscdet/dsrae.hpp"
#include "pscdet/error.hpp"
#include "pscdet/metrics.hpp"

namespace pscdet {

struct Phase {
  int index = 0;  // 1-based
  double detention_proportion = 0.0;
  int epochs = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
};

struct PhaseSchedule {
  std::vector<Phase> phases;

  void validate() const {
    if (phases.empty()) throw DataError("schedule: no phases");
    int total_epochs = 0;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      const Phase& ph = phases[i];
      if (ph.index != static_cast<int>(i) + 1)
        throw DataError("schedule: phase indices must be 1..n in order");
      if (!(ph.detention_proportion > 0.0 && ph.detention_proportion < 1.0))
        throw DataError("schedule: detention_proportion out of range");
      if (ph.epochs <= 0) throw DataError("schedule: epochs must be positive");
      if (!(ph.lr > 0.0)) throw DataError("schedule: lr must be positive");
      if (i > 0) {
        if (!(ph.detention_proportion >
              phases[i - 1].detention_proportion))
          throw DataError(
              "schedule: detention proportions must be strictly increasing");
        if (ph.lr > phases[i - 1].lr)
          throw DataError("schedule: learning rates must be non-increasing");
      }
      total_epochs += ph.epochs;
    }
    if (total_epochs != 30)
      throw DataError("schedule: epochs must sum to 30, got " +
                      std::to_string(total_epochs));
  }
};

inline constexpr double kDefaultProportions[6] = {0.0179, 0.0558, 0.1237,
                                                  0.2437, 0.3675, 0.50};
inline constexpr double kDefaultLearningRates[6] = {1e-4, 1e-4, 1e-4,
                                                    1e-5, 1e-5, 1e-6};

inline PhaseSchedule default_schedule(std::uint64_t base_seed = 0) {
  PhaseSchedule s;
  for (int i = 0; i < 6; ++i) {
    s.phases.push_back({i + 1, kDefaultProportions[i], 5,
                        kDefaultLearningRates[i],
                        mix_seed(base_seed, 7000 + i)});
  }
  return s;
}

// Defaults merged with optional JSON overrides keyed by phase index:
//   {"phases": [{"index": 4, "lr": 2e-5, "epochs": 6}, ...]}
inline PhaseSchedule build_schedule(const nlohmann::json& overrides,
                                    std::uint64_t base_seed = 0) {
  PhaseSchedule s = default_schedule(base_seed);
  if (!overrides.is_null() && !overrides.empty()) {
    try {
      if (overrides.contains("phases")) {
        for (const auto& po : overrides.at("phases")) {
          const int idx = po.at("index").get<int>();
          if (idx < 1 || idx > static_cast<int>(s.phases.size()))
            throw DataError("schedule override: bad phase index " +
                            std::to_string(idx));
          Phase& ph = s.phases[idx - 1];
          if (po.contains("detention_proportion"))
            ph.detention_proportion = po.at("detention_proportion").get<double>();
          if (po.contains("epochs")) ph.epochs = po.at("epochs").get<int>();
          if (po.contains("lr")) ph.lr = po.at("lr").get<double>();
          if (po.contains("seed"))
            ph.seed = po.at("seed").get<std::uint64_t>();
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("bad schedule JSON: ") + e.what());
    }
  }
  s.validate();
  return s;
}

inline PhaseSchedule build_schedule(std::uint64_t base_seed = 0) {
  return build_schedule(nlohmann::json(), base_seed);
}

struct EpochPoint {
  int epoch = 0;  // 1-based within phase
  double loss = 0.0;
  double val_ap = std::numeric_limits<double>::quiet_NaN();
  double val_auc = std::numeric_limits<double>::quiet_NaN();
};

struct PhaseResult {
  int phase_index = 0;
  std::string checkpoint_path;
  std::vector<EpochPoint> curve;
  double val_ap = std::numeric_limits<double>::quiet_NaN();
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_detained = 0;
  std::size_t n_regular = 0;
  // Target proportion below the achievable fraction: all regulars were kept.
  bool downsample_clamped = false;
};

namespace detail {

inline std::pair<double, double> val_metrics(const ModelParams& params,
                                             const Batch& val) {
  if (val.size() == 0) {
    return {std::numeric_limits<double>::quiet_NaN(),
            std::numeric_limits<double>::quiet_NaN()};
  }
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(val.size());
  labels.reserve(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) {
    scores.push_back(detention_score(params, val.grids[i]).score);
    labels.push_back(val.detained[i]);
  }
  bool has_pos = false, has_neg = false;
  for (int y : labels) (y ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg) {
    return {std::numeric_limits<double>::quiet_NaN(),
            std::numeric_limits<double>::quiet_NaN()};
  }
  return {average_precision(scores, labels, val.ids),
          roc_auc(scores, labels)};
}

}  // namespace detail

// One phase: downsample regulars toward the target proportion, train for the
// phase's epochs at its learning rate, checkpoint. If the target proportion
// is not reachable (fewer regulars than required), the full training set is
// used and the result is flagged.
inline PhaseResult run_phase(ModelParams& params,
                             const std::vector<PscRecord>& full_train,
                             const Batch& val_batch, const Phase& phase,
                             std::size_t batch_size,
                             const std::string& out_dir) {
  std::size_t n_det = 0, n_reg = 0;
  for (const auto& r : full_train) (r.detained ? n_det : n_reg)++;
  if (n_det == 0) throw DataError("run_phase: no detained samples");
  const double rho = phase.detention_proportion;
  const std::size_t want_reg = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_det) * (1.0 - rho) / rho));

  PhaseResult result;
  result.phase_index = phase.index;
  std::vector<PscRecord> phase_records;
  if (want_reg > n_reg) {
    result.downsample_clamped = true;
    phase_records = full_train;
    result.n_regular = n_reg;
  } else {
    phase_records = downsample_regular(full_train, rho, phase.seed);
    result.n_regular = want_reg;
  }
  result.n_detained = n_det;

  Batch data = make_batch(phase_records, params.norm);
  for (int e = 0; e < phase.epochs; ++e) {
    EpochStats stats = train_epoch(params, data, phase.lr, batch_size,
                                   mix_seed(phase.seed, 10000 + e));
    auto [ap, auc] = detail::val_metrics(params, val_batch);
    result.curve.push_back({e + 1, stats.mean_loss, ap, auc});
  }
  if (!result.curve.empty()) {
    result.val_ap = result.curve.back().val_ap;
    result.val_auc = result.curve.back().val_auc;
  }

  std::filesystem::create_directories(out_dir);
  result.checkpoint_path =
      (std::filesystem::path(out_dir) /
       ("phase_" + std::to_string(phase.index) + ".ckpt"))
          .string();
  save_checkpoint(params, result.checkpoint_path);
  return result;
}

struct RunAllResult {
  ModelParams final_params;
  std::vector<PhaseResult> phases;
  std::string final_checkpoint;
};

struct TrainConfig {
  Architecture arch;
  Hyper hyper;
  ModelMode mode = ModelMode::dsr;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

// The six-phase pipeline: normalization is fitted once on the full training
// split, each phase warm-starts from the previous checkpoint, the validation
// set never feeds a parameter update.
inline RunAllResult run_all(const std::vector<PscRecord>& train_records,
                            const std::vector<PscRecord>& val_records,
                            const PhaseSchedule& schedule,
                            const TrainConfig& cfg,
                            const std::string& out_dir) {
  schedule.validate();
  if (train_records.empty()) throw DataError("run_all: empty training set");

  std::vector<FeatureGrid> train_grids;
  train_grids.reserve(train_records.size());
  for (const auto& r : train_records) train_grids.push_back(encode_record(r));
  const NormStats norm = fit_normalizer(train_grids);

  RunAllResult out;
  out.final_params =
      init_params(cfg.arch, mix_seed(cfg.seed, 1), cfg.mode, cfg.hyper);
  out.final_params.norm = norm;

  Batch val_batch = make_batch(val_records, norm);
  for (const Phase& phase : schedule.phases) {
    out.phases.push_back(run_phase(out.final_params, train_records, val_batch,
                                   phase, cfg.batch_size, out_dir));
  }
  out.final_checkpoint =
      (std::filesystem::path(out_dir) / "final.ckpt").string();
  save_checkpoint(out.final_params, out.final_checkpoint);
  return out;
}

// Per-epoch metrics across phases: `phase,epoch,loss,val_ap,val_auc`.
inline void write_phase_metrics_csv(const std::vector<PhaseResult>& phases,
                                    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "phase,epoch,loss,val_ap,val_auc\n";
  for (const auto& ph : phases) {
    for (const auto& pt : ph.curve) {
      out << ph.phase_index << ',' << pt.epoch << ','
          << format_double(pt.loss) << ',' << format_double(pt.val_ap) << ','
          << format_double(pt.val_auc) << '\n';
    }
  }
}

}  // namespace pscdet
