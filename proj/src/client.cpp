#include "pfedclr/client.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pfedclr {

Variant variant_from_string(const std::string& name) {
  if (name == "fedmf") return Variant::kFedMF;
  if (name == "af") return Variant::kAF;
  if (name == "cf") return Variant::kCF;
  if (name == "clr") return Variant::kCLR;
  throw std::invalid_argument("unknown variant: " + name +
                              " (expected fedmf|af|cf|clr)");
}

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::kFedMF: return "fedmf";
    case Variant::kAF: return "af";
    case Variant::kCF: return "cf";
    case Variant::kCLR: return "clr";
  }
  return "?";
}

ClientState init_client(std::uint32_t user, Variant variant, const Matrix& q_global0,
                        std::uint32_t rank, double init_std, std::uint64_t init_seed) {
  ClientState state;
  state.user_id = user;
  state.variant = variant;
  {
    Rng rng(derive_seed(init_seed, Stream::kUserInit, user));
    state.p = gaussian_vector(q_global0.cols(), 0.0, init_std, rng);
  }
  state.q = q_global0;
  if (variant == Variant::kAF || variant == Variant::kCF) {
    state.w = Matrix(q_global0.rows(), q_global0.cols(), 0.0);
  } else if (variant == Variant::kCLR) {
    Rng rng(derive_seed(init_seed, Stream::kBufferInit, user));
    state.lora = LowRankBuffer::init(q_global0.rows(), q_global0.cols(), rank, rng);
  }
  return state;
}

std::vector<std::pair<std::uint32_t, int>> build_examples(
    std::span<const std::uint32_t> positives, std::span<const std::uint32_t> negatives) {
  std::vector<std::pair<std::uint32_t, int>> examples;
  examples.reserve(positives.size() + negatives.size());
  for (std::uint32_t item : positives) examples.emplace_back(item, 1);
  for (std::uint32_t item : negatives) examples.emplace_back(item, 0);
  return examples;
}

void effective_item(const ClientState& state, std::uint32_t item, std::span<double> out,
                    bool merged) {
  auto q_row = state.q.row(item);
  std::copy(q_row.begin(), q_row.end(), out.begin());
  if (!merged) return;
  if (!state.w.empty()) {
    axpy(1.0, state.w.row(item), out);
  } else if (!state.lora.empty()) {
    auto a_row = state.lora.a.row(item);
    for (std::size_t k = 0; k < state.lora.a.cols(); ++k) {
      axpy(a_row[k], state.lora.b.row(k), out);
    }
  }
}

namespace {

using Example = std::pair<std::uint32_t, int>;

void shuffle_examples(std::vector<Example>& examples, Rng& rng) {
  for (std::size_t i = examples.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(examples[i - 1], examples[j]);
  }
}

// Per-batch scratch: unique sorted touched rows plus an accumulator matrix
// with one row per touched item.
struct RowBatch {
  std::vector<std::uint32_t> rows;
  Matrix grad;

  void reset(std::span<const Example> batch, std::size_t width) {
    rows.clear();
    for (const auto& [item, label] : batch) rows.push_back(item);
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    grad = Matrix(rows.size(), width, 0.0);
  }

  std::size_t slot(std::uint32_t item) const {
    return static_cast<std::size_t>(
        std::lower_bound(rows.begin(), rows.end(), item) - rows.begin());
  }
};

void apply_row_steps(Matrix& param, RowBatch& batch, AdamState* adam, double lr,
                     Optimizer optimizer, double clip_threshold) {
  if (std::isfinite(clip_threshold)) clip_inplace(batch.grad, clip_threshold);
  if (optimizer == Optimizer::kAdam) {
    adam->begin_step();
    for (std::size_t k = 0; k < batch.rows.size(); ++k) {
      const std::size_t row = batch.rows[k];
      adam->update_span(row * param.cols(), batch.grad.row(k), param.row(row), lr);
    }
  } else {
    for (std::size_t k = 0; k < batch.rows.size(); ++k) {
      axpy(-lr, batch.grad.row(k), param.row(batch.rows[k]));
    }
  }
}

void apply_dense_step(std::span<double> param, std::span<const double> grad,
                      AdamState* adam, double lr, Optimizer optimizer) {
  if (optimizer == Optimizer::kAdam) {
    adam->begin_step();
    adam->update_span(0, grad, param, lr);
  } else {
    axpy(-lr, grad, param);
  }
}

AdamState* fresh_or_persisted(std::optional<AdamState>& slot, bool persist,
                              AdamState& scratch, std::size_t size, AdamConfig config) {
  if (!persist) {
    scratch = AdamState(size, config);
    return &scratch;
  }
  if (!slot.has_value() || slot->size() != size) slot.emplace(size, config);
  return &*slot;
}

// Joint (p, Q) training used by kFedMF and the first phase of kAF. Gradients
// for both families are taken at the batch's starting parameters.
void joint_local_training(ClientState& state, const Matrix& q_global_prev,
                          const ImplicitDataset& dataset, const NegativeSampler& sampler,
                          const ClientConfig& config, std::uint64_t run_seed,
                          std::uint32_t round) {
  state.q = q_global_prev;
  const std::size_t d = state.q.cols();
  const auto& positives = dataset.train_positives[state.user_id];
  if (positives.empty()) {
    throw std::runtime_error("client " + std::to_string(state.user_id) +
                             ": empty training set");
  }
  auto examples = build_examples(
      positives, sampler.train_negatives(state.user_id, round, Stream::kTrainNegStep1));
  Rng shuffle_rng(derive_seed(run_seed, Stream::kShuffleStep1, state.user_id, round));

  AdamState q_scratch(state.q.size(), config.adam);
  AdamState p_scratch;
  AdamState* p_adam = fresh_or_persisted(state.p_moments, config.persist_moments,
                                         p_scratch, d, config.adam);
  RowBatch rows;
  Vec gp(d);
  for (std::uint32_t epoch = 0; epoch < config.epochs_step1; ++epoch) {
    shuffle_examples(examples, shuffle_rng);
    for (std::size_t start = 0; start < examples.size(); start += config.batch_size) {
      auto batch = std::span<const Example>(examples).subspan(
          start, std::min<std::size_t>(config.batch_size, examples.size() - start));
      rows.reset(batch, d);
      std::fill(gp.begin(), gp.end(), 0.0);
      for (const auto& [item, label] : batch) {
        auto q_row = state.q.row(item);
        double residual = predict(state.p, q_row) - label;
        axpy(residual, std::span<const double>(state.p), rows.grad.row(rows.slot(item)));
        axpy(residual, q_row, gp);
      }
      apply_row_steps(state.q, rows, &q_scratch, config.lr_embedding, config.optimizer,
                      config.batch_clip_threshold);
      apply_dense_step(state.p, gp, p_adam, config.lr_embedding, config.optimizer);
    }
  }
  state.last_step1_round = round;
}

// Personalization loop shared by the buffer variants. update_user toggles the
// second pass that moves p against the freshly stepped buffer.
void buffer_training(ClientState& state, const ImplicitDataset& dataset,
                     const NegativeSampler& sampler, const ClientConfig& config,
                     std::uint64_t run_seed, std::uint32_t round, bool update_user) {
  const std::size_t d = state.q.cols();
  const bool lowrank = !state.lora.empty();
  const std::size_t r = lowrank ? state.lora.b.rows() : 0;

  auto examples = build_examples(
      dataset.train_positives[state.user_id],
      sampler.train_negatives(state.user_id, round, Stream::kTrainNegStep2));
  Rng shuffle_rng(derive_seed(run_seed, Stream::kShuffleStep2, state.user_id, round));

  AdamState p_scratch, w_scratch, a_scratch, b_scratch;
  AdamState* p_adam =
      update_user ? fresh_or_persisted(state.p_moments, config.persist_moments, p_scratch,
                                       d, config.adam)
                  : nullptr;
  AdamState* w_adam = nullptr;
  AdamState* a_adam = nullptr;
  AdamState* b_adam = nullptr;
  if (lowrank) {
    a_adam = fresh_or_persisted(state.a_moments, config.persist_moments, a_scratch,
                                state.lora.a.size(), config.adam);
    b_adam = fresh_or_persisted(state.b_moments, config.persist_moments, b_scratch,
                                state.lora.b.size(), config.adam);
  } else {
    w_adam = fresh_or_persisted(state.w_moments, config.persist_moments, w_scratch,
                                state.w.size(), config.adam);
  }

  RowBatch rows;
  Vec gp(d), q_eff(d), dw(d);
  Matrix gb;
  for (std::uint32_t epoch = 0; epoch < config.epochs_step2; ++epoch) {
    shuffle_examples(examples, shuffle_rng);
    for (std::size_t start = 0; start < examples.size(); start += config.batch_size) {
      auto batch = std::span<const Example>(examples).subspan(
          start, std::min<std::size_t>(config.batch_size, examples.size() - start));

      // Buffer pass: gradients at the batch's starting parameters.
      rows.reset(batch, lowrank ? r : d);
      if (lowrank) gb = Matrix(r, d, 0.0);
      for (const auto& [item, label] : batch) {
        effective_item(state, item, q_eff);
        double residual = predict(state.p, q_eff) - label;
        for (std::size_t j = 0; j < d; ++j) dw[j] = residual * state.p[j];
        if (lowrank) {
          auto ga = rows.grad.row(rows.slot(item));
          for (std::size_t k = 0; k < r; ++k) ga[k] += dot(dw, state.lora.b.row(k));
          auto a_row = state.lora.a.row(item);
          for (std::size_t k = 0; k < r; ++k) axpy(a_row[k], dw, gb.row(k));
        } else {
          axpy(1.0, dw, rows.grad.row(rows.slot(item)));
        }
      }
      if (lowrank) {
        apply_row_steps(state.lora.a, rows, a_adam, config.lr_buffer, config.optimizer,
                        config.batch_clip_threshold);
        if (!config.pin_buffer_b) {
          if (config.optimizer == Optimizer::kAdam) {
            b_adam->begin_step();
            b_adam->update_span(0, {gb.data(), gb.size()},
                                {state.lora.b.data(), state.lora.b.size()},
                                config.lr_buffer);
          } else {
            axpy(-config.lr_buffer, {gb.data(), gb.size()},
                 {state.lora.b.data(), state.lora.b.size()});
          }
        }
      } else {
        apply_row_steps(state.w, rows, w_adam, config.lr_buffer, config.optimizer,
                        config.batch_clip_threshold);
      }

      // User pass: the calibrated item vectors include the buffer step above.
      if (update_user) {
        std::fill(gp.begin(), gp.end(), 0.0);
        for (const auto& [item, label] : batch) {
          effective_item(state, item, q_eff);
          double residual = predict(state.p, q_eff) - label;
          axpy(residual, q_eff, gp);
        }
        apply_dense_step(state.p, gp, p_adam, config.lr_embedding, config.optimizer);
      }
    }
  }
  state.last_personalized_round = round;
}

}  // namespace

void step1_local_training(ClientState& state, const Matrix& q_global_prev,
                          const ImplicitDataset& dataset, const NegativeSampler& sampler,
                          const ClientConfig& config, std::uint64_t run_seed,
                          std::uint32_t round) {
  const auto& positives = dataset.train_positives[state.user_id];
  if (positives.empty()) {
    throw std::runtime_error("client " + std::to_string(state.user_id) +
                             ": empty training set");
  }
  state.q = q_global_prev;
  const std::size_t d = state.q.cols();

  auto examples = build_examples(
      positives, sampler.train_negatives(state.user_id, round, Stream::kTrainNegStep1));
  Rng shuffle_rng(derive_seed(run_seed, Stream::kShuffleStep1, state.user_id, round));

  AdamState q_adam(state.q.size(), config.adam);
  RowBatch rows;
  for (std::uint32_t epoch = 0; epoch < config.epochs_step1; ++epoch) {
    shuffle_examples(examples, shuffle_rng);
    for (std::size_t start = 0; start < examples.size(); start += config.batch_size) {
      auto batch = std::span<const Example>(examples).subspan(
          start, std::min<std::size_t>(config.batch_size, examples.size() - start));
      rows.reset(batch, d);
      for (const auto& [item, label] : batch) {
        double residual = predict(state.p, state.q.row(item)) - label;
        axpy(residual, std::span<const double>(state.p), rows.grad.row(rows.slot(item)));
      }
      apply_row_steps(state.q, rows, &q_adam, config.lr_embedding, config.optimizer,
                      config.batch_clip_threshold);
    }
  }
  state.last_step1_round = round;
}

void step2_dual_function(ClientState& state, const ImplicitDataset& dataset,
                         const NegativeSampler& sampler, const ClientConfig& config,
                         std::uint64_t run_seed, std::uint32_t round) {
  if (state.variant == Variant::kFedMF) return;
  if (state.last_step1_round != round) {
    throw std::logic_error("step2_dual_function: step 1 of round " +
                           std::to_string(round) + " has not run for client " +
                           std::to_string(state.user_id));
  }
  const bool update_user = state.variant != Variant::kAF;
  buffer_training(state, dataset, sampler, config, run_seed, round, update_user);
}

Matrix client_train_and_upload(ClientState& state, const Matrix& q_global_prev,
                               const ImplicitDataset& dataset,
                               const NegativeSampler& sampler, const ClientConfig& config,
                               const LdpConfig& ldp, std::uint64_t run_seed,
                               std::uint64_t noise_seed, std::uint32_t round) {
  if (state.variant == Variant::kFedMF || state.variant == Variant::kAF) {
    joint_local_training(state, q_global_prev, dataset, sampler, config, run_seed, round);
  } else {
    step1_local_training(state, q_global_prev, dataset, sampler, config, run_seed, round);
  }
  return apply_ldp(state.q, q_global_prev, ldp,
                   derive_seed(noise_seed, Stream::kUploadNoise, state.user_id, round));
}

void client_personalize(ClientState& state, const ImplicitDataset& dataset,
                        const NegativeSampler& sampler, const ClientConfig& config,
                        std::uint64_t run_seed, std::uint32_t round) {
  step2_dual_function(state, dataset, sampler, config, run_seed, round);
}

Matrix run_variant_round(ClientState& state, const Matrix& q_global_prev,
                         const ImplicitDataset& dataset, const NegativeSampler& sampler,
                         const ClientConfig& config, const LdpConfig& ldp,
                         std::uint64_t run_seed, std::uint64_t noise_seed,
                         std::uint32_t round) {
  Matrix upload = client_train_and_upload(state, q_global_prev, dataset, sampler, config,
                                          ldp, run_seed, noise_seed, round);
  client_personalize(state, dataset, sampler, config, run_seed, round);
  return upload;
}

std::vector<double> inference_scores(const ClientState& state,
                                     std::span<const std::uint32_t> candidates,
                                     bool merged) {
  std::vector<double> scores(candidates.size());
  Vec q_eff(state.q.cols());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i] >= state.q.rows()) {
      throw std::out_of_range("inference_scores: item " + std::to_string(candidates[i]) +
                              " outside catalog");
    }
    effective_item(state, candidates[i], q_eff, merged);
    scores[i] = predict(state.p, q_eff);
  }
  return scores;
}

std::uint64_t buffer_parameter_count(Variant variant, std::uint64_t n_items,
                                     std::uint32_t dim, std::uint32_t rank) {
  switch (variant) {
    case Variant::kFedMF: return 0;
    case Variant::kAF:
    case Variant::kCF: return n_items * dim;
    case Variant::kCLR: return static_cast<std::uint64_t>(rank) * (n_items + dim);
  }
  return 0;
}

double client_loss(const ClientState& state,
                   std::span<const std::pair<std::uint32_t, int>> examples, bool merged) {
  Vec q_eff(state.q.cols());
  std::vector<std::pair<double, int>> pairs;
  pairs.reserve(examples.size());
  for (const auto& [item, label] : examples) {
    effective_item(state, item, q_eff, merged);
    pairs.emplace_back(predict(state.p, q_eff), label);
  }
  return bce_loss(pairs);
}

}  // namespace pfedclr
