#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pfedclr/data.hpp"
#include "pfedclr/diagnostics.hpp"
#include "pfedclr/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Environment overrides shared by the training subcommands.
void apply_env_overrides(pfedclr::ExperimentConfig& config) {
  if (const char* dir = std::getenv("PFEDCLR_OUTPUT_DIR")) config.output_dir = dir;
  if (const char* threads = std::getenv("PFEDCLR_THREADS")) {
    config.threads = static_cast<std::uint32_t>(std::stoul(threads));
  }
}

void print_metrics(const pfedclr::RunManifest& manifest) {
  const json& results = manifest.document.at("results");
  std::cout << "completed rounds: " << manifest.completed_rounds() << "\n";
  if (!results.at("final").is_null()) {
    std::cout << "final:  HR@k=" << results.at("final").at("hr")
              << "  NDCG@k=" << results.at("final").at("ndcg") << "\n";
    std::cout << "best:   HR@k=" << results.at("best").at("hr")
              << "  NDCG@k=" << results.at("best").at("ndcg") << " (round "
              << results.at("best").at("round") << ")\n";
  }
  std::cout << "manifest: " << manifest.path.string() << "\n";
}

int cmd_prepare_data(const std::string& input, const std::string& format,
                     const std::string& output, std::uint32_t min_interactions,
                     std::uint64_t seed) {
  auto dataset = pfedclr::build_dataset(input, pfedclr::ratings_format_from_string(format),
                                        min_interactions);
  pfedclr::save_dataset(dataset, output, seed);
  std::cout << "users: " << dataset.n_users << "\nitems: " << dataset.n_items
            << "\ntrain interactions: " << dataset.total_train_interactions()
            << "\nwritten to: " << output << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated matrix-factorization simulator with calibrated low-rank "
               "personalization"};
  app.require_subcommand(1);

  // prepare-data
  std::string in_path, in_format = "tab_separated", out_dir;
  std::uint32_t min_interactions = 10;
  std::uint64_t data_seed = 1;
  auto* prepare = app.add_subcommand("prepare-data",
                                     "Parse a ratings log, binarize, filter, split and "
                                     "persist a dataset snapshot");
  prepare->add_option("--input", in_path, "ratings file")->required();
  prepare->add_option("--format", in_format, "tab_separated|double_colon|csv");
  prepare->add_option("--output", out_dir, "snapshot directory")->required();
  prepare->add_option("--min-interactions", min_interactions, "user filter threshold");
  prepare->add_option("--seed", data_seed, "recorded data seed");

  // train
  std::string config_path, train_output;
  std::uint32_t stop_after = 0, repeats = 0, threads_flag = 0;
  bool serial = false, resume_flag = false;
  auto* train = app.add_subcommand("train", "Run an experiment from a JSON config");
  train->add_option("--config", config_path, "experiment config JSON")->required();
  train->add_option("--output", train_output, "override output directory");
  train->add_option("--stop-after", stop_after, "stop after this round (resumable)");
  train->add_option("--repeats", repeats, "repeat with shifted seeds, report the mean");
  train->add_option("--threads", threads_flag, "worker threads (0 = hardware)");
  train->add_flag("--serial", serial, "single-threaded, result-identical execution");
  train->add_flag("--resume", resume_flag, "continue from the run's latest snapshot");

  // evaluate
  std::string eval_snapshot, eval_data, eval_per_user;
  std::uint32_t eval_k = 10;
  bool eval_premerge = false, eval_full = false;
  auto* evaluate = app.add_subcommand("evaluate", "Metrics from a saved snapshot");
  evaluate->add_option("--snapshot", eval_snapshot, "snapshot directory")->required();
  evaluate->add_option("--data", eval_data, "dataset snapshot directory")->required();
  evaluate->add_option("--k", eval_k, "cutoff");
  evaluate->add_flag("--premerge", eval_premerge, "score without the buffer");
  evaluate->add_flag("--full-catalog", eval_full, "rank against every non-train item");
  evaluate->add_option("--per-user", eval_per_user, "write per-user ranks to this CSV");

  // diagnose
  std::string diag_snapshot, diag_data;
  std::vector<std::uint32_t> diag_clients;
  std::uint32_t diag_items = 64;
  auto* diagnose = app.add_subcommand("diagnose", "Skew reports from a saved snapshot");
  diagnose->add_option("--snapshot", diag_snapshot, "snapshot directory")->required();
  diagnose->add_option("--data", diag_data, "dataset snapshot directory")->required();
  diagnose->add_option("--clients", diag_clients, "client ids (default: tracked set)");
  diagnose->add_option("--items", diag_items, "diagnostic item count");

  // export-trajectories
  std::string traj_run, traj_out;
  auto* traj = app.add_subcommand("export-trajectories",
                                  "Copy a run's user-embedding trajectories to CSV");
  traj->add_option("--run", traj_run, "run directory")->required();
  traj->add_option("--output", traj_out, "destination CSV (default: stdout)");

  // sweep
  std::string sweep_config, sweep_param, sweep_values, sweep_output;
  auto* sweep = app.add_subcommand("sweep", "Grid over rank or buffer learning rate");
  sweep->add_option("--config", sweep_config, "base config JSON")->required();
  sweep->add_option("--param", sweep_param, "rank|lr_buffer")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->required();
  sweep->add_option("--output", sweep_output, "parent output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) {
      return cmd_prepare_data(in_path, in_format, out_dir, min_interactions, data_seed);
    }

    if (*train) {
      pfedclr::ExperimentConfig config = pfedclr::load_config(config_path);
      apply_env_overrides(config);
      if (!train_output.empty()) config.output_dir = train_output;
      if (stop_after > 0) config.stop_after_round = stop_after;
      if (threads_flag > 0) config.threads = threads_flag;
      if (serial) config.serial = true;
      if (repeats > 0) {
        json summary = pfedclr::run_repeats(config, repeats);
        std::cout << summary.dump(2) << "\n";
        return 0;
      }
      pfedclr::RunManifest manifest = resume_flag ? pfedclr::resume_experiment(config)
                                                  : pfedclr::run_experiment(config);
      print_metrics(manifest);
      return 0;
    }

    if (*evaluate) {
      json result = pfedclr::evaluate_snapshot(eval_snapshot, eval_data, eval_k,
                                               !eval_premerge, eval_full, eval_per_user);
      std::cout << result.dump(2) << "\n";
      return 0;
    }

    if (*diagnose) {
      json result =
          pfedclr::diagnose_snapshot(diag_snapshot, diag_data, diag_clients, diag_items);
      std::cout << result.dump(2) << "\n";
      return 0;
    }

    if (*traj) {
      fs::path src = fs::path(traj_run) / "trajectories.csv";
      if (!fs::exists(src)) {
        std::cerr << "no trajectories.csv under " << traj_run << "\n";
        return 1;
      }
      // Parse and re-emit so malformed files fail loudly here, not downstream.
      auto log = pfedclr::TrajectoryLog::read_csv(src);
      if (traj_out.empty()) {
        std::ifstream in(src);
        std::cout << in.rdbuf();
      } else {
        log.write_csv(traj_out);
        std::cout << "written to: " << traj_out << "\n";
      }
      return 0;
    }

    if (*sweep) {
      pfedclr::ExperimentConfig base = pfedclr::load_config(sweep_config);
      apply_env_overrides(base);
      if (!sweep_output.empty()) base.output_dir = sweep_output;
      if (sweep_param != "rank" && sweep_param != "lr_buffer") {
        std::cerr << "unknown sweep parameter: " << sweep_param
                  << " (expected rank|lr_buffer)\n";
        return 1;
      }
      std::vector<std::string> values;
      for (std::size_t pos = 0; pos < sweep_values.size();) {
        std::size_t comma = sweep_values.find(',', pos);
        if (comma == std::string::npos) comma = sweep_values.size();
        values.push_back(sweep_values.substr(pos, comma - pos));
        pos = comma + 1;
      }
      json summary = json::array();
      for (const std::string& value : values) {
        pfedclr::ExperimentConfig config = base;
        if (sweep_param == "rank") {
          config.rank = static_cast<std::uint32_t>(std::stoul(value));
        } else {
          config.lr_buffer = std::stod(value);
        }
        config.output_dir =
            (fs::path(base.output_dir) / (sweep_param + "_" + value)).string();
        pfedclr::RunManifest manifest = pfedclr::run_experiment(config);
        summary.push_back({{"value", value},
                           {"output_dir", config.output_dir},
                           {"final", manifest.document.at("results").at("final")},
                           {"best", manifest.document.at("results").at("best")}});
        std::cout << sweep_param << "=" << value
                  << "  HR@k=" << manifest.final_hr()
                  << "  NDCG@k=" << manifest.final_ndcg() << "\n";
      }
      fs::create_directories(base.output_dir);
      std::ofstream out(fs::path(base.output_dir) / "sweep_summary.json");
      out << summary.dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
