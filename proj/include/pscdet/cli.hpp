#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pscdet/checkpoint.hpp"
#include "pscdet/csv.hpp"
#include "pscdet/datagen.hpp"
#include "pscdet/dsrae.hpp"
#include "pscdet/error.hpp"
#include "pscdet/eval.hpp"
#include "pscdet/grouprank.hpp"
#include "pscdet/progressive.hpp"
#include "pscdet/remote.hpp"

namespace pscdet::cli {

namespace detail {

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad JSON in '" + path + "': " + e.what());
  }
}

inline Architecture arch_from_config(const nlohmann::json& j) {
  Architecture a;
  try {
    a.conv_channels =
        j.value("conv_channels", std::vector<std::size_t>{8, 16});
    a.latent_dim = j.value("latent_dim", std::size_t{32});
    a.dsr_dim = j.value("dsr_dim", std::size_t{8});
    a.decoder_hidden = j.value("decoder_hidden", std::size_t{0});
    a.dropout_rate = j.value("dropout_rate", 0.1);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad architecture config: ") + e.what());
  }
  a.validate();
  return a;
}

inline Hyper hyper_from_config(const nlohmann::json& j) {
  Hyper h;
  try {
    h.p = j.value("p", 1.0);
    h.q = j.value("q", 1.0);
    h.lambda1 = j.value("lambda1", 0.1);
    h.lambda2 = j.value("lambda2", 0.1);
    h.lambda3 = j.value("lambda3", 0.5);
    h.tau = j.value("tau", 0.05);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad hyperparameter config: ") + e.what());
  }
  h.validate();
  return h;
}

inline void write_scores_csv(const std::string& path,
                             const std::vector<std::string>& ids,
                             const std::vector<int>& labels,
                             const std::vector<double>& scores) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "id,label,score\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << ',' << labels[i] << ',' << format_double(scores[i])
        << '\n';
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Ship detention risk scoring from PSC inspection records"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_spec_path, gen_out;
  gen->add_option("--spec", gen_spec_path, "GenSpec JSON file")->required();
  gen->add_option("--out", gen_out, "output CSV path")->required();
  gen->callback([&] {
    const GenSpec spec = gen_spec_from_json(detail::load_json_file(gen_spec_path));
    auto records = generate_dataset(spec);
    write_csv(records, gen_out);
    std::size_t det = 0;
    for (const auto& r : records) det += r.detained ? 1 : 0;
    std::cout << "wrote " << records.size() << " records (" << det
              << " detained) to " << gen_out << "\n";
  });

  // train
  auto* train = app.add_subcommand("train", "Run the six-phase training pipeline");
  std::string train_data, train_config, train_out_dir, train_mode = "dsr";
  std::uint64_t train_seed = 7;
  std::size_t train_batch = 64;
  train->add_option("--data", train_data, "dataset CSV")->required();
  train->add_option("--config", train_config, "config JSON");
  train->add_option("--out-dir", train_out_dir, "checkpoint directory")->required();
  train->add_option("--mode", train_mode, "dsr or rsr")
      ->check(CLI::IsMember({"dsr", "rsr"}));
  auto* train_seed_opt = train->add_option("--seed", train_seed, "train seed");
  auto* train_batch_opt =
      train->add_option("--batch-size", train_batch, "batch size");
  train->callback([&] {
    nlohmann::json cfg = nlohmann::json::object();
    if (!train_config.empty()) cfg = detail::load_json_file(train_config);
    TrainConfig tc;
    tc.arch = detail::arch_from_config(cfg.value("architecture", nlohmann::json::object()));
    tc.hyper = detail::hyper_from_config(cfg.value("hyperparameters", nlohmann::json::object()));
    tc.mode = mode_from_name(train_mode);
    tc.seed = train_seed_opt->count() ? train_seed
                                      : cfg.value("seed", std::uint64_t{7});
    tc.batch_size = train_batch_opt->count()
                        ? train_batch
                        : cfg.value("batch_size", std::size_t{64});
    const PhaseSchedule schedule = build_schedule(
        cfg.value("schedule", nlohmann::json()), tc.seed);

    auto records = load_csv(train_data);
    std::vector<PscRecord> train_set, val_set;
    for (auto& r : records) {
      if (r.split == Split::train) train_set.push_back(r);
      else if (r.split == Split::val) val_set.push_back(r);
    }
    if (train_set.empty()) throw DataError("no records with split=train");

    auto result = run_all(train_set, val_set, schedule, tc, train_out_dir);
    write_phase_metrics_csv(
        result.phases,
        (std::filesystem::path(train_out_dir) / "metrics.csv").string());
    for (const auto& ph : result.phases) {
      std::cout << "phase " << ph.phase_index << ": " << ph.n_detained
                << " detained / " << ph.n_regular << " regular"
                << (ph.downsample_clamped ? " (target proportion clamped)" : "")
                << ", val_auc=" << ph.val_auc << ", val_ap=" << ph.val_ap
                << "\n";
    }
    std::cout << "final checkpoint: " << result.final_checkpoint << "\n";
  });

  // score
  auto* score = app.add_subcommand("score", "Per-sample detention scores");
  std::string score_ckpt, score_data, score_out;
  score->add_option("--checkpoint", score_ckpt, "checkpoint file")->required();
  score->add_option("--data", score_data, "dataset CSV")->required();
  score->add_option("--out", score_out, "output scores CSV")->required();
  score->callback([&] {
    const ModelParams params = load_checkpoint(score_ckpt);
    const auto records = load_csv(score_data);
    auto scores = score_records(params, records);
    std::vector<std::string> ids;
    std::vector<int> labels;
    std::vector<double> values;
    for (std::size_t i = 0; i < records.size(); ++i) {
      ids.push_back(records[i].id);
      labels.push_back(records[i].detained ? 1 : 0);
      values.push_back(scores[i].score);
    }
    detail::write_scores_csv(score_out, ids, labels, values);
    std::cout << "scored " << records.size() << " records to " << score_out
              << "\n";
  });

  // rank
  auto* rank = app.add_subcommand("rank", "Grouped ranking through a backend");
  std::string rank_ckpt, rank_data, rank_backend = "oracle", rank_remote_cfg,
              rank_out;
  std::uint64_t rank_seed = 0;
  rank->add_option("--checkpoint", rank_ckpt, "checkpoint file")->required();
  rank->add_option("--data", rank_data, "dataset CSV")->required();
  rank->add_option("--backend", rank_backend, "oracle or remote")
      ->check(CLI::IsMember({"oracle", "remote"}));
  rank->add_option("--remote-config", rank_remote_cfg, "remote backend JSON");
  rank->add_option("--out", rank_out, "output scores CSV")->required();
  rank->add_option("--seed", rank_seed, "group partition seed");
  rank->callback([&] {
    const ModelParams params = load_checkpoint(rank_ckpt);
    const auto records = load_csv(rank_data);
    auto members = make_rank_members(params, records);
    auto groups = partition_inference(members, kGroupSize, rank_seed);
    std::vector<RankResult> results;
    if (rank_backend == "remote") {
      if (rank_remote_cfg.empty())
        throw DataError("--remote-config is required for the remote backend");
      const auto cfg =
          remote_config_from_json(detail::load_json_file(rank_remote_cfg));
      results = rank_groups_remote(cfg, groups);
    } else {
      results.reserve(groups.size());
      for (const auto& g : groups) results.push_back(rank_backend_oracle(g));
    }
    std::map<std::string, double> by_id;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (std::size_t i = 0; i < groups[g].members.size(); ++i) {
        by_id[groups[g].members[i].id] = results[g].scores[i];
      }
    }
    std::vector<std::string> ids;
    std::vector<int> labels;
    std::vector<double> values;
    for (const auto& r : records) {
      ids.push_back(r.id);
      labels.push_back(r.detained ? 1 : 0);
      values.push_back(by_id.at(r.id));
    }
    detail::write_scores_csv(rank_out, ids, labels, values);
    std::cout << "ranked " << records.size() << " records in " << groups.size()
              << " groups to " << rank_out << "\n";
  });

  // export-sft
  auto* sft = app.add_subcommand("export-sft", "Export fine-tuning JSONL");
  std::string sft_ckpt, sft_data, sft_out;
  std::uint64_t sft_seed = 0;
  sft->add_option("--checkpoint", sft_ckpt, "checkpoint file")->required();
  sft->add_option("--data", sft_data, "dataset CSV")->required();
  sft->add_option("--out", sft_out, "output JSONL path")->required();
  sft->add_option("--seed", sft_seed, "grouping seed");
  sft->callback([&] {
    const ModelParams params = load_checkpoint(sft_ckpt);
    const auto records = load_csv(sft_data);
    std::vector<PscRecord> train_set;
    for (const auto& r : records) {
      if (r.split == Split::train) train_set.push_back(r);
    }
    if (train_set.empty()) throw DataError("no records with split=train");
    auto members = make_rank_members(params, train_set);
    auto grouping = make_training_groups(members, sft_seed);
    export_sft_jsonl(grouping.groups, sft_out);
    std::cout << "exported " << grouping.groups.size() << " groups to "
              << sft_out;
    if (!grouping.leftover_detained.empty()) {
      std::cout << " (" << grouping.leftover_detained.size()
                << " detained sample left over)";
    }
    std::cout << "\n";
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_backend = "oracle", ev_remote_cfg,
              ev_threshold, ev_report, ev_scores_out;
  std::uint64_t ev_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset CSV")->required();
  ev->add_option("--backend", ev_backend, "oracle or remote")
      ->check(CLI::IsMember({"oracle", "remote"}));
  ev->add_option("--remote-config", ev_remote_cfg, "remote backend JSON");
  ev->add_option("--threshold", ev_threshold,
                 "fixed:<theta> or rate:<k>; default rate at validation prevalence");
  ev->add_option("--report", ev_report, "output report JSON")->required();
  ev->add_option("--scores-out", ev_scores_out, "raw scores CSV path");
  ev->add_option("--seed", ev_seed, "group partition seed");
  ev->callback([&] {
    const ModelParams params = load_checkpoint(ev_ckpt);
    const auto records = load_csv(ev_data);

    ThresholdMode threshold;
    std::string threshold_source = "explicit";
    if (ev_threshold.empty()) {
      threshold.kind = ThresholdMode::Kind::rate;
      threshold.value = validation_prevalence(records);
      threshold_source = "validation_prevalence";
    } else {
      threshold = threshold_from_string(ev_threshold);
    }

    GroupRanker ranker;
    if (ev_backend == "remote") {
      if (ev_remote_cfg.empty())
        throw DataError("--remote-config is required for the remote backend");
      const auto cfg =
          remote_config_from_json(detail::load_json_file(ev_remote_cfg));
      ranker = [cfg](const RankGroup& g) { return rank_backend_remote(cfg, g); };
    } else {
      ranker = oracle_ranker();
    }

    std::string scores_path = ev_scores_out;
    if (scores_path.empty()) {
      scores_path = ev_report + ".scores.csv";
    }
    EvalReport report = evaluate(params, records, ranker, ev_backend,
                                 threshold, ev_seed, scores_path);
    report.threshold_source = threshold_source;
    report.checkpoint_digest = file_digest(ev_ckpt);
    nlohmann::json settings = {{"backend", ev_backend},
                               {"threshold", report.threshold},
                               {"group_seed", ev_seed},
                               {"data", ev_data}};
    report.config_digest = string_digest(settings.dump());

    std::ofstream out(ev_report, std::ios::binary);
    if (!out) throw DataError("cannot open '" + ev_report + "' for writing");
    out << report.to_json().dump(2) << "\n";
    for (const auto& [name, m] : report.splits) {
      std::cout << name << ": precision=" << m.precision
                << " recall=" << m.recall << " f_score=" << m.f_score
                << " auc=" << m.auc << " ap=" << m.ap << "\n";
    }
    std::cout << "report written to " << ev_report << "\n";
  });

  try {
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 2;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace pscdet::cli
