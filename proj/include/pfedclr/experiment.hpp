#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfedclr/client.hpp"
#include "pfedclr/data.hpp"
#include "pfedclr/privacy.hpp"

namespace pfedclr {

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t sampling = 3;
  std::uint64_t noise = 4;
};

struct ExperimentConfig {
  // Dataset: either a raw ratings file or a prepared snapshot directory.
  std::string dataset_path;
  std::string dataset_format = "tab_separated";  // tab_separated|double_colon|csv|snapshot
  std::uint32_t min_interactions = 10;

  Variant variant = Variant::kCLR;
  std::uint32_t dim = 16;
  std::uint32_t rank = 2;
  double init_std = 0.01;

  std::uint32_t rounds = 100;
  std::uint32_t epochs_step1 = 10;
  std::uint32_t epochs_step2 = 10;
  std::uint32_t batch_size = 256;
  double lr_embedding = 0.01;
  double lr_buffer = 0.01;
  double client_fraction = 0.6;
  std::uint32_t n_train_neg = 4;
  std::string optimizer = "adam";
  bool persist_moments = false;

  std::uint32_t n_eval_neg = 99;
  std::uint32_t top_k = 10;
  std::uint32_t eval_interval = 5;
  bool eval_full_catalog = false;
  bool eval_premerge = false;

  LdpConfig ldp;
  bool ldp_clip_auto = false;  // pick C as the p95 dry-run update norm

  Seeds seeds;

  std::vector<std::uint32_t> diagnostic_clients;  // explicit list wins
  std::uint32_t diagnostic_client_count = 8;      // lowest ids when list empty
  std::uint32_t diagnostic_item_count = 64;

  std::string output_dir = "run";
  std::uint32_t snapshot_interval = 5;  // 0: final snapshot only
  std::uint32_t stop_after_round = 0;   // 0: run to completion
  std::uint32_t threads = 0;            // 0: hardware concurrency
  bool serial = false;

  void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Hash over every result-affecting field (output_dir, threads, serial and
/// stop_after_round excluded); resume refuses to continue when it changes.
std::uint64_t config_result_hash(const ExperimentConfig& config);

struct MetricsRow {
  std::uint32_t round = 0;
  double hr = 0.0;
  double ndcg = 0.0;
};

struct RunManifest {
  nlohmann::json document;

  std::filesystem::path path;
  std::vector<MetricsRow> metrics() const;
  double final_hr() const;
  double final_ndcg() const;
  std::uint32_t completed_rounds() const;
  std::string model_hash() const;
  /// Deterministic portion (config + results); timing stripped.
  nlohmann::json deterministic_view() const;
};

/// Executes the round loop from scratch: sample clients, local training,
/// upload, aggregation in parallel with personalization, periodic evaluation,
/// diagnostics and snapshots. Artifacts land in config.output_dir.
RunManifest run_experiment(const ExperimentConfig& config);

/// Continues a stopped run from the rolling snapshot in config.output_dir.
/// The config must hash-match the one stored with the snapshot. Completed
/// runs return the existing manifest untouched.
RunManifest resume_experiment(const ExperimentConfig& config);
RunManifest resume_experiment(const std::filesystem::path& run_dir);

/// Mean-of-seeds helper: runs `repeats` copies with shifted init/sampling/
/// noise seeds into output_dir/rep_<i>, then writes a summary.json with
/// per-repeat and mean metrics.
nlohmann::json run_repeats(const ExperimentConfig& config, std::uint32_t repeats);

/// Evaluates a saved snapshot against a dataset; no training. A non-empty
/// per_user_csv path gets one rank row per user.
nlohmann::json evaluate_snapshot(const std::filesystem::path& snapshot_dir,
                                 const std::filesystem::path& dataset_dir,
                                 std::uint32_t k, bool merged, bool full_catalog,
                                 const std::filesystem::path& per_user_csv = {});

/// Skew reports (one JSON object per tracked client) from a saved snapshot.
nlohmann::json diagnose_snapshot(const std::filesystem::path& snapshot_dir,
                                 const std::filesystem::path& dataset_dir,
                                 const std::vector<std::uint32_t>& clients,
                                 std::uint32_t item_count);

}  // namespace pfedclr
