#include "pfedclr/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>

#include "pfedclr/diagnostics.hpp"
#include "pfedclr/evaluation.hpp"
#include "pfedclr/parallel.hpp"
#include "pfedclr/server.hpp"
#include "pfedclr/snapshot.hpp"

namespace pfedclr {

namespace {

using json = nlohmann::json;

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    rows.push_back(json(std::vector<double>(m.row(i).begin(), m.row(i).end())));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  const json& rows = j.at("data");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = rows.at(i).get<std::vector<double>>();
    std::copy(row.begin(), row.end(), m.row(i).begin());
  }
  return m;
}

// Running analytical state for one tracked client.
struct DiagClient {
  bool initialized = false;
  Matrix delta0;  // k x d at first observation
  Matrix q0;
  Vec p0;
  Vec cumulative;  // accumulated first-order skew, d
  double c1_max = -1.0;
  double c2_max = 0.0;
  std::vector<std::vector<double>> norm_history;  // per item

  json to_json() const {
    return json{{"initialized", initialized},
                {"delta0", matrix_to_json(delta0)},
                {"q0", matrix_to_json(q0)},
                {"p0", p0},
                {"cumulative", cumulative},
                {"c1_max", c1_max},
                {"c2_max", c2_max},
                {"norm_history", norm_history}};
  }

  static DiagClient from_json(const json& j) {
    DiagClient d;
    d.initialized = j.at("initialized").get<bool>();
    if (d.initialized) {
      d.delta0 = matrix_from_json(j.at("delta0"));
      d.q0 = matrix_from_json(j.at("q0"));
    }
    d.p0 = j.at("p0").get<Vec>();
    d.cumulative = j.at("cumulative").get<Vec>();
    d.c1_max = j.at("c1_max").get<double>();
    d.c2_max = j.at("c2_max").get<double>();
    d.norm_history = j.at("norm_history").get<std::vector<std::vector<double>>>();
    return d;
  }
};

struct DiagTracker {
  std::vector<std::uint32_t> items;
  std::map<std::uint32_t, DiagClient> per_client;
  std::vector<std::string> report_lines;

  json to_json() const {
    json clients = json::object();
    for (const auto& [u, d] : per_client) clients[std::to_string(u)] = d.to_json();
    return json{{"items", items}, {"clients", std::move(clients)},
                {"report_lines", report_lines}};
  }

  static DiagTracker from_json(const json& j) {
    DiagTracker t;
    t.items = j.at("items").get<std::vector<std::uint32_t>>();
    for (const auto& [key, value] : j.at("clients").items()) {
      t.per_client[static_cast<std::uint32_t>(std::stoul(key))] =
          DiagClient::from_json(value);
    }
    t.report_lines = j.at("report_lines").get<std::vector<std::string>>();
    return t;
  }
};

std::string format_metric(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::uint64_t dataset_fingerprint(const ImplicitDataset& ds) {
  std::uint64_t h = fnv1a(&ds.n_users, sizeof(ds.n_users));
  h = fnv1a(&ds.n_items, sizeof(ds.n_items), h);
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    h = fnv1a(ds.train_positives[u].data(),
              ds.train_positives[u].size() * sizeof(std::uint32_t), h);
    h = fnv1a(&ds.test_item[u], sizeof(std::uint32_t), h);
  }
  return h;
}

ImplicitDataset resolve_dataset(const ExperimentConfig& config) {
  if (config.dataset_path.empty()) {
    throw std::invalid_argument("config: dataset path is empty");
  }
  if (!std::filesystem::exists(config.dataset_path)) {
    throw std::runtime_error("dataset not found: " + config.dataset_path);
  }
  if (config.dataset_format == "snapshot") {
    return load_dataset(config.dataset_path);
  }
  return build_dataset(config.dataset_path,
                       ratings_format_from_string(config.dataset_format),
                       config.min_interactions);
}

ClientConfig make_client_config(const ExperimentConfig& config, double clip_threshold) {
  ClientConfig cc;
  cc.epochs_step1 = config.epochs_step1;
  cc.epochs_step2 = config.epochs_step2;
  cc.batch_size = config.batch_size;
  cc.lr_embedding = config.lr_embedding;
  cc.lr_buffer = config.lr_buffer;
  if (config.optimizer == "adam") {
    cc.optimizer = Optimizer::kAdam;
  } else if (config.optimizer == "sgd") {
    cc.optimizer = Optimizer::kSgd;
  } else {
    throw std::invalid_argument("config: unknown optimizer " + config.optimizer);
  }
  cc.persist_moments = config.persist_moments;
  if (config.ldp.enabled && config.ldp.clip_per_batch) {
    cc.batch_clip_threshold = clip_threshold;
  }
  return cc;
}

LdpConfig make_wire_ldp(const ExperimentConfig& config, double clip_threshold) {
  LdpConfig wire = config.ldp;
  // Per-batch clipping replaces the round-delta clip.
  wire.clip_threshold = config.ldp.clip_per_batch
                            ? std::numeric_limits<double>::infinity()
                            : clip_threshold;
  return wire;
}

std::vector<std::uint32_t> tracked_clients(const ExperimentConfig& config,
                                           std::uint32_t n_users) {
  if (!config.diagnostic_clients.empty()) {
    for (std::uint32_t u : config.diagnostic_clients) {
      if (u >= n_users) {
        throw std::invalid_argument("diagnostic client " + std::to_string(u) +
                                    " out of range");
      }
    }
    return config.diagnostic_clients;
  }
  std::vector<std::uint32_t> tracked;
  for (std::uint32_t u = 0; u < std::min(config.diagnostic_client_count, n_users); ++u) {
    tracked.push_back(u);
  }
  return tracked;
}

std::vector<std::uint32_t> diagnostic_items(std::uint32_t n_items, std::uint32_t count) {
  const std::uint32_t k = std::min(n_items, count);
  std::vector<std::uint32_t> items(k);
  for (std::uint32_t i = 0; i < k; ++i) {
    items[i] = static_cast<std::uint32_t>(
        (static_cast<std::uint64_t>(i) * n_items) / k);
  }
  return items;
}

void write_json_atomic(const std::filesystem::path& path, const json& doc) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << doc.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

// Everything run_experiment keeps between rounds.
struct Runner {
  ExperimentConfig config;
  ImplicitDataset dataset;
  std::unique_ptr<NegativeSampler> sampler;
  std::vector<ClientState> clients;
  Matrix global_q;
  std::uint32_t completed = 0;
  std::vector<MetricsRow> metrics;
  TrajectoryLog trajectories;
  DiagTracker diag;
  std::vector<std::uint32_t> tracked;
  double clip_threshold_used = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t dataset_hash = 0;
  std::vector<double> round_seconds;
  unsigned threads = 1;

  std::filesystem::path out_dir() const { return config.output_dir; }
};

void init_models(Runner& r) {
  Rng global_rng(derive_seed(r.config.seeds.init, Stream::kGlobalInit));
  r.global_q = gaussian_matrix(r.dataset.n_items, r.config.dim, 0.0, r.config.init_std,
                               global_rng);
  r.clients.clear();
  r.clients.reserve(r.dataset.n_users);
  for (std::uint32_t u = 0; u < r.dataset.n_users; ++u) {
    ClientState state = init_client(u, r.config.variant, r.global_q, r.config.rank,
                                    r.config.init_std, r.config.seeds.init);
    state.weight = r.dataset.user_weights[u];
    r.clients.push_back(std::move(state));
  }
}

// 95th-percentile (nearest rank) of round-1 update norms, measured on client
// copies so the real run is untouched.
double calibrate_clip_threshold(Runner& r, const ClientConfig& client_config) {
  RoundPlan plan = sample_clients(r.dataset.user_weights, r.config.client_fraction, 1,
                                  r.config.seeds.sampling);
  std::vector<double> norms(plan.clients.size());
  LdpConfig off;
  parallel_for(plan.clients.size(), r.threads, [&](std::size_t i) {
    ClientState copy = r.clients[plan.clients[i]];
    Matrix upload = client_train_and_upload(copy, r.global_q, r.dataset, *r.sampler,
                                            client_config, off, r.config.seeds.sampling,
                                            r.config.seeds.noise, 1);
    Matrix delta = compute_delta(upload, r.global_q);
    norms[i] = frobenius_norm(delta);
  });
  std::sort(norms.begin(), norms.end());
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.95 * static_cast<double>(norms.size())));
  rank = std::min(std::max<std::size_t>(rank, 1), norms.size());
  return norms[rank - 1];
}

MetricsRow evaluate_round(Runner& r, std::uint32_t round) {
  EvalOptions options;
  options.k = r.config.top_k;
  options.merged = !r.config.eval_premerge;
  options.full_catalog = r.config.eval_full_catalog;
  std::vector<std::uint32_t> ranks(r.clients.size());
  parallel_for(r.clients.size(), r.threads, [&](std::size_t u) {
    ranks[u] = evaluate_user(r.clients[u], r.dataset, *r.sampler, options);
  });
  EvalResult result = metrics_at_k(ranks, options.k);
  return MetricsRow{round, result.hr, result.ndcg};
}

void run_diagnostics(Runner& r, const RoundPlan& plan, std::uint32_t round) {
  if (r.tracked.empty() || r.diag.items.empty()) return;
  const std::size_t k = r.diag.items.size();
  const std::size_t d = r.config.dim;
  for (std::uint32_t u : r.tracked) {
    if (!std::binary_search(plan.clients.begin(), plan.clients.end(), u)) continue;
    const ClientState& client = r.clients[u];
    DiagClient& dc = r.diag.per_client[u];

    Matrix q_local(k, d), delta(k, d);
    std::vector<int> labels(k, 0);
    std::vector<char> positive(r.dataset.n_items, 0);
    for (std::uint32_t item : r.dataset.train_positives[u]) positive[item] = 1;
    for (std::size_t i = 0; i < k; ++i) {
      const std::uint32_t item = r.diag.items[i];
      auto local = client.q.row(item);
      std::copy(local.begin(), local.end(), q_local.row(i).begin());
      for (std::size_t j = 0; j < d; ++j) {
        delta(i, j) = r.global_q(item, j) - local[j];
      }
      labels[i] = positive[item];
    }

    SkewTerms skew = skew_terms(client.p, q_local, delta, labels);
    SkewTerms calib =
        calibration_terms(client.p, q_local, labels, r.config.lr_embedding);

    double c1 = dc.c1_max, c2 = dc.c2_max;
    for (std::size_t i = 0; i < k; ++i) {
      double s = sigmoid(dot(client.p, q_local.row(i)));
      c1 = std::max(c1, s - labels[i]);
      c2 = std::max(c2, s * (1.0 - s));
    }
    dc.c1_max = c1;
    dc.c2_max = c2;

    if (dc.cumulative.empty()) dc.cumulative.assign(d, 0.0);
    Vec total = skew.total();
    axpy(-r.config.lr_embedding, total, dc.cumulative);

    if (dc.norm_history.empty()) dc.norm_history.resize(k);
    std::vector<double> delta_norms(k);
    for (std::size_t i = 0; i < k; ++i) {
      delta_norms[i] = norm2(delta.row(i));
      dc.norm_history[i].push_back(delta_norms[i]);
    }
    if (!dc.initialized) {
      dc.initialized = true;
      dc.delta0 = delta;
      dc.q0 = q_local;
      dc.p0 = client.p;
    }

    double gamma = 0.0;
    bool gamma_flag = false;
    bool have_gamma = dc.norm_history.front().size() >= 2;
    if (have_gamma) {
      for (std::size_t i = 0; i < k; ++i) {
        GammaEstimate est = estimate_gamma(dc.norm_history[i]);
        gamma = std::max(gamma, est.gamma);
        gamma_flag = gamma_flag || est.out_of_assumption;
      }
    }
    bool bound_valid = have_gamma && gamma > 0.0 && gamma < 1.0 && dc.c1_max > 0.0;
    json line = {
        {"round", round},
        {"client", u},
        {"delta_norms", delta_norms},
        {"scaling", skew.scaling},
        {"shift", skew.shift},
        {"total_skew", total},
        {"calib_scaling", calib.scaling},
        {"calib_shift", calib.shift},
        {"c1_max", dc.c1_max},
        {"c2_max", dc.c2_max},
        {"gamma", have_gamma ? json(gamma) : json(nullptr)},
        {"gamma_out_of_assumption", gamma_flag},
        {"cumulative_skew_norm", norm2(dc.cumulative)},
        {"bound", bound_valid
                      ? json(accumulated_skew_bound(dc.delta0, dc.p0, dc.q0,
                                                    r.config.lr_embedding, gamma,
                                                    dc.c1_max, dc.c2_max))
                      : json(nullptr)},
        {"bound_valid", bound_valid},
    };
    r.diag.report_lines.push_back(line.dump());
  }
}

void write_metrics_csv(const Runner& r) {
  std::ofstream out(r.out_dir() / "metrics.csv");
  out << "round,hr,ndcg,variant,seed\n";
  for (const MetricsRow& row : r.metrics) {
    out << row.round << "," << format_metric(row.hr) << "," << format_metric(row.ndcg)
        << "," << to_string(r.config.variant) << "," << r.config.seeds.init << "\n";
  }
}

void write_round_plans(const Runner& r) {
  std::ofstream out(r.out_dir() / "round_plans.jsonl");
  for (std::uint32_t t = 1; t <= r.completed; ++t) {
    RoundPlan plan = sample_clients(r.dataset.user_weights, r.config.client_fraction, t,
                                    r.config.seeds.sampling);
    json line = {{"round", t}, {"clients", plan.clients}, {"weights", plan.weights}};
    out << line.dump() << "\n";
  }
}

void write_skew_reports(const Runner& r) {
  std::ofstream out(r.out_dir() / "skew.jsonl");
  for (const std::string& line : r.diag.report_lines) out << line << "\n";
}

json snapshot_meta(const Runner& r) {
  json metrics = json::array();
  for (const MetricsRow& row : r.metrics) {
    metrics.push_back({row.round, row.hr, row.ndcg});
  }
  return json{
      {"config", config_to_json(r.config)},
      {"config_hash", hash_hex(config_result_hash(r.config))},
      {"dataset_hash", hash_hex(r.dataset_hash)},
      {"variant", to_string(r.config.variant)},
      {"seed", r.config.seeds.init},
      {"shapes",
       {{"n_users", r.dataset.n_users},
        {"n_items", r.dataset.n_items},
        {"dim", r.config.dim},
        {"rank", r.config.rank}}},
      {"metrics", std::move(metrics)},
      {"diag", r.diag.to_json()},
      {"clip_threshold_used",
       std::isnan(r.clip_threshold_used) ? json(nullptr) : json(r.clip_threshold_used)},
  };
}

void save_run_snapshot(const Runner& r, const std::filesystem::path& dir) {
  RunSnapshot snapshot;
  snapshot.round = r.completed;
  snapshot.global_q = r.global_q;
  snapshot.clients = r.clients;
  snapshot.meta = snapshot_meta(r);
  save_snapshot(dir, snapshot);
  r.trajectories.write_csv(dir / "trajectories.csv");
}

RunManifest write_manifest(Runner& r, double total_seconds) {
  const bool complete = r.completed >= r.config.rounds;
  json metrics = json::array();
  for (const MetricsRow& row : r.metrics) {
    metrics.push_back(
        {{"round", row.round}, {"hr", row.hr}, {"ndcg", row.ndcg}});
  }
  const MetricsRow* best = nullptr;
  for (const MetricsRow& row : r.metrics) {
    if (!best || row.hr > best->hr ||
        (row.hr == best->hr && row.ndcg > best->ndcg)) {
      best = &row;
    }
  }
  json results = {
      {"metrics", std::move(metrics)},
      {"final", r.metrics.empty()
                    ? json(nullptr)
                    : json{{"round", r.metrics.back().round},
                           {"hr", r.metrics.back().hr},
                           {"ndcg", r.metrics.back().ndcg}}},
      {"best", best == nullptr ? json(nullptr)
                               : json{{"round", best->round},
                                      {"hr", best->hr},
                                      {"ndcg", best->ndcg}}},
      {"model_hash", hash_hex(model_hash(r.global_q, r.clients))},
      {"extra_parameters_per_client",
       buffer_parameter_count(r.config.variant, r.dataset.n_items, r.config.dim,
                              r.config.rank)},
      {"n_users", r.dataset.n_users},
      {"n_items", r.dataset.n_items},
      {"clip_threshold_used",
       std::isnan(r.clip_threshold_used) ? json(nullptr) : json(r.clip_threshold_used)},
  };
  if (r.config.ldp.enabled && r.config.ldp.noise_scale > 0 &&
      !std::isnan(r.clip_threshold_used)) {
    // Per-round budget from the sensitivity bound, full-population weights.
    double total = 0.0;
    for (std::uint32_t w : r.dataset.user_weights) total += w;
    double max_eps = 0.0, sum_eps = 0.0;
    for (std::uint32_t w : r.dataset.user_weights) {
      double s = sensitivity_bound(w / total, r.config.lr_embedding,
                                   r.clip_threshold_used);
      double eps = privacy_budget(s, r.config.ldp.noise_scale);
      max_eps = std::max(max_eps, eps);
      sum_eps += eps;
    }
    results["ldp"] = {{"noise_scale", r.config.ldp.noise_scale},
                      {"per_round_epsilon_max", max_eps},
                      {"per_round_epsilon_mean", sum_eps / r.dataset.n_users}};
  }

  json doc = {
      {"schema_version", 1},
      {"config", config_to_json(r.config)},
      {"config_hash", hash_hex(config_result_hash(r.config))},
      {"dataset_hash", hash_hex(r.dataset_hash)},
      {"results", std::move(results)},
      {"state",
       {{"completed_rounds", r.completed},
        {"complete", complete},
        {"resume_snapshot", complete ? "snapshot_final" : "snapshot_latest"}}},
      {"artifacts",
       {{"metrics_csv", "metrics.csv"},
        {"trajectories_csv", "trajectories.csv"},
        {"skew_jsonl", "skew.jsonl"},
        {"round_plans_jsonl", "round_plans.jsonl"},
        {"final_snapshot", complete ? json("snapshot_final") : json(nullptr)}}},
      {"timing",
       {{"total_seconds", total_seconds}, {"per_round_seconds", r.round_seconds}}},
  };
  write_json_atomic(r.out_dir() / "manifest.json", doc);

  RunManifest manifest;
  manifest.document = std::move(doc);
  manifest.path = r.out_dir() / "manifest.json";
  return manifest;
}

// The round loop. `r` must be fully initialized (fresh or restored).
RunManifest run_rounds(Runner& r) {
  const auto t_start = std::chrono::steady_clock::now();
  ClientConfig client_config = make_client_config(r.config, r.clip_threshold_used);
  LdpConfig wire_ldp = make_wire_ldp(r.config, r.clip_threshold_used);

  if (r.config.rounds == 0 && r.metrics.empty()) {
    r.metrics.push_back(evaluate_round(r, 0));
  }

  const std::uint32_t stop_round =
      r.config.stop_after_round == 0
          ? r.config.rounds
          : std::min(r.config.rounds, r.config.stop_after_round);

  for (std::uint32_t t = r.completed + 1; t <= stop_round; ++t) {
    const auto t_round = std::chrono::steady_clock::now();
    RoundPlan plan = sample_clients(r.dataset.user_weights, r.config.client_fraction, t,
                                    r.config.seeds.sampling);

    std::vector<Matrix> uploads(plan.clients.size());
    auto train_one = [&](std::size_t i) {
      const std::uint32_t u = plan.clients[i];
      try {
        uploads[i] = client_train_and_upload(r.clients[u], r.global_q, r.dataset,
                                             *r.sampler, client_config, wire_ldp,
                                             r.config.seeds.sampling,
                                             r.config.seeds.noise, t);
      } catch (const std::exception& e) {
        throw std::runtime_error("round " + std::to_string(t) + ", client " +
                                 std::to_string(u) + ": " + e.what());
      }
    };
    auto personalize_one = [&](std::size_t i) {
      const std::uint32_t u = plan.clients[i];
      try {
        client_personalize(r.clients[u], r.dataset, *r.sampler, client_config,
                           r.config.seeds.sampling, t);
      } catch (const std::exception& e) {
        throw std::runtime_error("round " + std::to_string(t) + ", client " +
                                 std::to_string(u) + ": " + e.what());
      }
    };
    auto aggregate = [&]() {
      std::vector<const Matrix*> ptrs(uploads.size());
      for (std::size_t i = 0; i < uploads.size(); ++i) ptrs[i] = &uploads[i];
      return fedavg(std::span<const Matrix* const>(ptrs),
                    std::span<const double>(plan.weights));
    };

    parallel_for(plan.clients.size(), r.threads, train_one);

    Matrix next_global;
    if (r.config.serial) {
      next_global = aggregate();
      for (std::size_t i = 0; i < plan.clients.size(); ++i) personalize_one(i);
    } else {
      // Step 2 on the clients runs concurrently with the aggregation; both
      // read only the immutable upload snapshots and per-client state.
      std::exception_ptr agg_error;
      std::thread agg_thread([&] {
        try {
          next_global = aggregate();
        } catch (...) {
          agg_error = std::current_exception();
        }
      });
      try {
        parallel_for(plan.clients.size(), r.threads, personalize_one);
      } catch (...) {
        agg_thread.join();
        throw;
      }
      agg_thread.join();
      if (agg_error) std::rethrow_exception(agg_error);
    }
    r.global_q = std::move(next_global);
    r.completed = t;

    for (std::uint32_t u : r.tracked) {
      r.trajectories.record(u, t, r.clients[u].p);
    }
    run_diagnostics(r, plan, t);

    if ((r.config.eval_interval > 0 && t % r.config.eval_interval == 0) ||
        t == r.config.rounds) {
      r.metrics.push_back(evaluate_round(r, t));
      write_metrics_csv(r);
    }
    r.round_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_round)
            .count());

    const bool last_of_run = t == stop_round;
    if (t < r.config.rounds &&
        ((r.config.snapshot_interval > 0 && t % r.config.snapshot_interval == 0) ||
         last_of_run)) {
      save_run_snapshot(r, r.out_dir() / "snapshot_latest");
    }
  }

  if (r.completed >= r.config.rounds) {
    save_run_snapshot(r, r.out_dir() / "snapshot_final");
  }
  write_metrics_csv(r);
  r.trajectories.write_csv(r.out_dir() / "trajectories.csv");
  write_skew_reports(r);
  write_round_plans(r);

  const double total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return write_manifest(r, total_seconds);
}

Runner make_runner(const ExperimentConfig& config) {
  config.validate();
  Runner r;
  r.config = config;
  r.dataset = resolve_dataset(config);
  r.dataset_hash = dataset_fingerprint(r.dataset);
  r.sampler = std::make_unique<NegativeSampler>(r.dataset, config.seeds.data,
                                                config.n_train_neg, config.n_eval_neg);
  r.threads = config.serial ? 1 : resolve_thread_count(config.threads);
  r.tracked = tracked_clients(config, r.dataset.n_users);
  r.diag.items = diagnostic_items(r.dataset.n_items, config.diagnostic_item_count);
  if (config.rank > std::min<std::uint32_t>(r.dataset.n_items, config.dim) &&
      config.variant == Variant::kCLR) {
    throw std::invalid_argument("config: rank exceeds min(n_items, dim)");
  }
  std::filesystem::create_directories(r.out_dir());
  return r;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (lr_embedding <= 0 || lr_buffer < 0) {
    throw std::invalid_argument("config: learning rates must be positive");
  }
  if (!(client_fraction > 0.0) || client_fraction > 1.0) {
    throw std::invalid_argument("config: client_fraction must be in (0, 1]");
  }
  if (dim == 0 || batch_size == 0) {
    throw std::invalid_argument("config: dim and batch_size must be positive");
  }
  if (variant == Variant::kCLR && rank == 0) {
    throw std::invalid_argument("config: rank must be >= 1");
  }
  if (ldp.noise_scale < 0) {
    throw std::invalid_argument("config: noise scale must be >= 0");
  }
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("schema_version") && j.at("schema_version").get<int>() != 1) {
    throw std::invalid_argument("config: unsupported schema_version");
  }
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    c.dataset_path = d.value("path", c.dataset_path);
    c.dataset_format = d.value("format", c.dataset_format);
    c.min_interactions = d.value("min_interactions", c.min_interactions);
  }
  c.variant = variant_from_string(j.value("variant", to_string(c.variant)));
  if (j.contains("model")) {
    const json& m = j.at("model");
    c.dim = m.value("dim", c.dim);
    c.rank = m.value("rank", c.rank);
    c.init_std = m.value("init_std", c.init_std);
  }
  if (j.contains("training")) {
    const json& t = j.at("training");
    c.rounds = t.value("rounds", c.rounds);
    c.epochs_step1 = t.value("epochs_step1", c.epochs_step1);
    c.epochs_step2 = t.value("epochs_step2", c.epochs_step2);
    c.batch_size = t.value("batch_size", c.batch_size);
    c.lr_embedding = t.value("lr_embedding", c.lr_embedding);
    c.lr_buffer = t.value("lr_buffer", c.lr_buffer);
    c.client_fraction = t.value("client_fraction", c.client_fraction);
    c.n_train_neg = t.value("n_train_neg", c.n_train_neg);
    c.optimizer = t.value("optimizer", c.optimizer);
    c.persist_moments = t.value("persist_moments", c.persist_moments);
  }
  if (j.contains("evaluation")) {
    const json& e = j.at("evaluation");
    c.n_eval_neg = e.value("n_eval_neg", c.n_eval_neg);
    c.top_k = e.value("top_k", c.top_k);
    c.eval_interval = e.value("interval", c.eval_interval);
    c.eval_full_catalog = e.value("full_catalog", c.eval_full_catalog);
    c.eval_premerge = e.value("premerge", c.eval_premerge);
  }
  if (j.contains("ldp")) {
    const json& l = j.at("ldp");
    c.ldp.enabled = l.value("enabled", c.ldp.enabled);
    c.ldp.noise_scale = l.value("noise_scale", c.ldp.noise_scale);
    if (l.contains("clip_threshold") && !l.at("clip_threshold").is_null()) {
      c.ldp.clip_threshold = l.at("clip_threshold").get<double>();
    }
    c.ldp.clip_per_batch = l.value("clip_per_batch", c.ldp.clip_per_batch);
  }
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    c.seeds.data = s.value("data", c.seeds.data);
    c.seeds.init = s.value("init", c.seeds.init);
    c.seeds.sampling = s.value("sampling", c.seeds.sampling);
    c.seeds.noise = s.value("noise", c.seeds.noise);
  }
  if (j.contains("diagnostics")) {
    const json& d = j.at("diagnostics");
    c.diagnostic_clients =
        d.value("clients", std::vector<std::uint32_t>(c.diagnostic_clients));
    c.diagnostic_client_count = d.value("n_clients", c.diagnostic_client_count);
    c.diagnostic_item_count = d.value("item_count", c.diagnostic_item_count);
  }
  c.output_dir = j.value("output_dir", c.output_dir);
  c.snapshot_interval = j.value("snapshot_interval", c.snapshot_interval);
  c.stop_after_round = j.value("stop_after_round", c.stop_after_round);
  c.threads = j.value("threads", c.threads);
  c.serial = j.value("serial", c.serial);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json ldp = {{"enabled", c.ldp.enabled},
              {"noise_scale", c.ldp.noise_scale},
              {"clip_per_batch", c.ldp.clip_per_batch}};
  ldp["clip_threshold"] = std::isfinite(c.ldp.clip_threshold)
                              ? json(c.ldp.clip_threshold)
                              : json(nullptr);
  return json{
      {"schema_version", 1},
      {"dataset",
       {{"path", c.dataset_path},
        {"format", c.dataset_format},
        {"min_interactions", c.min_interactions}}},
      {"variant", to_string(c.variant)},
      {"model", {{"dim", c.dim}, {"rank", c.rank}, {"init_std", c.init_std}}},
      {"training",
       {{"rounds", c.rounds},
        {"epochs_step1", c.epochs_step1},
        {"epochs_step2", c.epochs_step2},
        {"batch_size", c.batch_size},
        {"lr_embedding", c.lr_embedding},
        {"lr_buffer", c.lr_buffer},
        {"client_fraction", c.client_fraction},
        {"n_train_neg", c.n_train_neg},
        {"optimizer", c.optimizer},
        {"persist_moments", c.persist_moments}}},
      {"evaluation",
       {{"n_eval_neg", c.n_eval_neg},
        {"top_k", c.top_k},
        {"interval", c.eval_interval},
        {"full_catalog", c.eval_full_catalog},
        {"premerge", c.eval_premerge}}},
      {"ldp", std::move(ldp)},
      {"seeds",
       {{"data", c.seeds.data},
        {"init", c.seeds.init},
        {"sampling", c.seeds.sampling},
        {"noise", c.seeds.noise}}},
      {"diagnostics",
       {{"clients", c.diagnostic_clients},
        {"n_clients", c.diagnostic_client_count},
        {"item_count", c.diagnostic_item_count}}},
      {"output_dir", c.output_dir},
      {"snapshot_interval", c.snapshot_interval},
      {"stop_after_round", c.stop_after_round},
      {"threads", c.threads},
      {"serial", c.serial},
  };
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  return config_from_json(json::parse(in));
}

std::uint64_t config_result_hash(const ExperimentConfig& config) {
  json j = config_to_json(config);
  j.erase("output_dir");
  j.erase("threads");
  j.erase("serial");
  j.erase("stop_after_round");
  const std::string s = j.dump();
  return fnv1a(s.data(), s.size());
}

std::vector<MetricsRow> RunManifest::metrics() const {
  std::vector<MetricsRow> rows;
  for (const json& row : document.at("results").at("metrics")) {
    rows.push_back({row.at("round").get<std::uint32_t>(), row.at("hr").get<double>(),
                    row.at("ndcg").get<double>()});
  }
  return rows;
}

double RunManifest::final_hr() const {
  return document.at("results").at("final").at("hr").get<double>();
}

double RunManifest::final_ndcg() const {
  return document.at("results").at("final").at("ndcg").get<double>();
}

std::uint32_t RunManifest::completed_rounds() const {
  return document.at("state").at("completed_rounds").get<std::uint32_t>();
}

std::string RunManifest::model_hash() const {
  return document.at("results").at("model_hash").get<std::string>();
}

json RunManifest::deterministic_view() const {
  json view = document;
  view.erase("timing");
  return view;
}

RunManifest run_experiment(const ExperimentConfig& config) {
  Runner r = make_runner(config);
  write_json_atomic(r.out_dir() / "config.json", config_to_json(config));

  r.clip_threshold_used = config.ldp.clip_threshold;
  if (config.ldp.enabled && !std::isfinite(config.ldp.clip_threshold)) {
    // The threshold must exist before any client trains, so probe round 1 on
    // throwaway copies.
    init_models(r);
    ClientConfig probe = make_client_config(config, 1.0);
    probe.batch_clip_threshold = std::numeric_limits<double>::infinity();
    r.clip_threshold_used = calibrate_clip_threshold(r, probe);
  } else if (!config.ldp.enabled) {
    r.clip_threshold_used = std::numeric_limits<double>::quiet_NaN();
  }

  init_models(r);
  return run_rounds(r);
}

RunManifest resume_experiment(const ExperimentConfig& config) {
  Runner r = make_runner(config);

  // Completed runs are a no-op.
  const std::filesystem::path manifest_path = r.out_dir() / "manifest.json";
  if (std::filesystem::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    json doc = json::parse(in);
    if (doc.at("state").at("complete").get<bool>() &&
        doc.at("state").at("completed_rounds").get<std::uint32_t>() >= config.rounds) {
      RunManifest manifest;
      manifest.document = std::move(doc);
      manifest.path = manifest_path;
      return manifest;
    }
  }

  std::filesystem::path snap_dir = r.out_dir() / "snapshot_latest";
  if (!std::filesystem::exists(snap_dir)) snap_dir = r.out_dir() / "snapshot_final";
  if (!std::filesystem::exists(snap_dir)) {
    throw std::runtime_error("resume: no snapshot found under " +
                             r.out_dir().string());
  }
  RunSnapshot snapshot = load_snapshot(snap_dir);

  const std::string stored_hash = snapshot.meta.at("config_hash").get<std::string>();
  if (stored_hash != hash_hex(config_result_hash(config))) {
    json stored = snapshot.meta.at("config");
    json wanted = config_to_json(config);
    for (const char* key : {"output_dir", "threads", "serial", "stop_after_round"}) {
      stored.erase(key);
      wanted.erase(key);
    }
    std::string diff;
    json fs = stored.flatten(), fw = wanted.flatten();
    for (const auto& [key, value] : fw.items()) {
      if (!fs.contains(key) || fs.at(key) != value) {
        diff += "\n  " + key + ": snapshot=" +
                (fs.contains(key) ? fs.at(key).dump() : "<missing>") +
                " requested=" + value.dump();
      }
    }
    for (const auto& [key, value] : fs.items()) {
      if (!fw.contains(key)) diff += "\n  " + key + ": snapshot=" + value.dump() +
                                     " requested=<missing>";
    }
    throw std::runtime_error("resume: config differs from the snapshot's:" + diff);
  }
  if (snapshot.meta.at("dataset_hash").get<std::string>() != hash_hex(r.dataset_hash)) {
    throw std::runtime_error("resume: dataset content changed since the snapshot");
  }

  r.completed = snapshot.round;
  r.global_q = std::move(snapshot.global_q);
  r.clients = std::move(snapshot.clients);
  for (const json& row : snapshot.meta.at("metrics")) {
    r.metrics.push_back({row.at(0).get<std::uint32_t>(), row.at(1).get<double>(),
                         row.at(2).get<double>()});
  }
  r.diag = DiagTracker::from_json(snapshot.meta.at("diag"));
  if (std::filesystem::exists(snap_dir / "trajectories.csv")) {
    r.trajectories = TrajectoryLog::read_csv(snap_dir / "trajectories.csv");
  }
  const json& clip = snapshot.meta.at("clip_threshold_used");
  r.clip_threshold_used =
      clip.is_null() ? std::numeric_limits<double>::quiet_NaN() : clip.get<double>();
  return run_rounds(r);
}

RunManifest resume_experiment(const std::filesystem::path& run_dir) {
  std::filesystem::path config_path = run_dir / "config.json";
  ExperimentConfig config = load_config(config_path);
  config.output_dir = run_dir.string();
  config.stop_after_round = 0;
  return resume_experiment(config);
}

json run_repeats(const ExperimentConfig& config, std::uint32_t repeats) {
  if (repeats == 0) throw std::invalid_argument("run_repeats: repeats must be >= 1");
  json reps = json::array();
  double sum_final_hr = 0, sum_final_ndcg = 0, sum_best_hr = 0, sum_best_ndcg = 0;
  for (std::uint32_t i = 0; i < repeats; ++i) {
    ExperimentConfig rep = config;
    rep.seeds.init += i;
    rep.seeds.sampling += i;
    rep.seeds.noise += i;
    rep.output_dir =
        (std::filesystem::path(config.output_dir) / ("rep_" + std::to_string(i)))
            .string();
    RunManifest manifest = run_experiment(rep);
    const json& results = manifest.document.at("results");
    reps.push_back({{"output_dir", rep.output_dir},
                    {"final", results.at("final")},
                    {"best", results.at("best")},
                    {"seeds", config_to_json(rep).at("seeds")}});
    sum_final_hr += results.at("final").at("hr").get<double>();
    sum_final_ndcg += results.at("final").at("ndcg").get<double>();
    sum_best_hr += results.at("best").at("hr").get<double>();
    sum_best_ndcg += results.at("best").at("ndcg").get<double>();
  }
  json summary = {
      {"repeats", std::move(reps)},
      {"mean_final_hr", sum_final_hr / repeats},
      {"mean_final_ndcg", sum_final_ndcg / repeats},
      {"mean_best_hr", sum_best_hr / repeats},
      {"mean_best_ndcg", sum_best_ndcg / repeats},
  };
  std::filesystem::create_directories(config.output_dir);
  write_json_atomic(std::filesystem::path(config.output_dir) / "summary.json", summary);
  return summary;
}

json evaluate_snapshot(const std::filesystem::path& snapshot_dir,
                       const std::filesystem::path& dataset_dir, std::uint32_t k,
                       bool merged, bool full_catalog,
                       const std::filesystem::path& per_user_csv) {
  RunSnapshot snapshot = load_snapshot(snapshot_dir);
  ImplicitDataset dataset = load_dataset(dataset_dir);
  if (snapshot.clients.size() != dataset.n_users) {
    throw std::runtime_error("evaluate_snapshot: snapshot has " +
                             std::to_string(snapshot.clients.size()) +
                             " clients, dataset has " +
                             std::to_string(dataset.n_users) + " users");
  }
  ExperimentConfig config = config_from_json(snapshot.meta.at("config"));
  NegativeSampler sampler(dataset, config.seeds.data, config.n_train_neg,
                          config.n_eval_neg);
  EvalOptions options;
  options.k = k;
  options.merged = merged;
  options.full_catalog = full_catalog;
  EvalResult result = evaluate_all(snapshot.clients, dataset, sampler, options);
  if (!per_user_csv.empty()) write_per_user_csv(result, per_user_csv);
  return json{{"round", snapshot.round},
              {"k", k},
              {"hr", result.hr},
              {"ndcg", result.ndcg},
              {"n_users", dataset.n_users}};
}

json diagnose_snapshot(const std::filesystem::path& snapshot_dir,
                       const std::filesystem::path& dataset_dir,
                       const std::vector<std::uint32_t>& clients,
                       std::uint32_t item_count) {
  RunSnapshot snapshot = load_snapshot(snapshot_dir);
  ImplicitDataset dataset = load_dataset(dataset_dir);
  ExperimentConfig config = config_from_json(snapshot.meta.at("config"));
  std::vector<std::uint32_t> targets = clients;
  if (targets.empty()) {
    for (std::uint32_t u = 0;
         u < std::min<std::uint32_t>(config.diagnostic_client_count, dataset.n_users);
         ++u) {
      targets.push_back(u);
    }
  }
  auto items = diagnostic_items(dataset.n_items, item_count);
  const std::size_t k = items.size();
  const std::size_t d = snapshot.global_q.cols();

  json out = json::array();
  for (std::uint32_t u : targets) {
    if (u >= snapshot.clients.size()) {
      throw std::invalid_argument("diagnose_snapshot: client " + std::to_string(u) +
                                  " out of range");
    }
    const ClientState& client = snapshot.clients[u];
    Matrix q_local(k, d), delta(k, d);
    std::vector<int> labels(k, 0);
    std::vector<char> positive(dataset.n_items, 0);
    for (std::uint32_t item : dataset.train_positives[u]) positive[item] = 1;
    for (std::size_t i = 0; i < k; ++i) {
      auto local = client.q.row(items[i]);
      std::copy(local.begin(), local.end(), q_local.row(i).begin());
      for (std::size_t j = 0; j < d; ++j) {
        delta(i, j) = snapshot.global_q(items[i], j) - local[j];
      }
      labels[i] = positive[items[i]];
    }
    SkewTerms skew = skew_terms(client.p, q_local, delta, labels);
    SkewTerms calib = calibration_terms(client.p, q_local, labels, config.lr_embedding);
    std::vector<double> delta_norms(k);
    for (std::size_t i = 0; i < k; ++i) delta_norms[i] = norm2(delta.row(i));
    out.push_back({{"client", u},
                   {"round", snapshot.round},
                   {"delta_norms", delta_norms},
                   {"scaling", skew.scaling},
                   {"shift", skew.shift},
                   {"total_skew", skew.total()},
                   {"calib_scaling", calib.scaling},
                   {"calib_shift", calib.shift}});
  }
  return out;
}

}  // namespace pfedclr
