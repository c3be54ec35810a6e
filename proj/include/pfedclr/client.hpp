#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pfedclr/data.hpp"
#include "pfedclr/matrix.hpp"
#include "pfedclr/model.hpp"
#include "pfedclr/privacy.hpp"

namespace pfedclr {

// Training variants:
//   kFedMF - joint (p, Q) local training, no buffer; the backbone.
//   kAF    - joint local training, then a full buffer fine-tunes item rows.
//   kCF    - decoupled: frozen-p item training, then joint (p, W) on the
//            frozen local model.
//   kCLR   - decoupled with the buffer factored as A (zero-init) times B
//            (Gaussian); the full method.
enum class Variant { kFedMF, kAF, kCF, kCLR };

Variant variant_from_string(const std::string& name);
std::string to_string(Variant variant);

enum class Optimizer { kAdam, kSgd };

struct ClientConfig {
  std::uint32_t epochs_step1 = 10;
  std::uint32_t epochs_step2 = 10;
  std::uint32_t batch_size = 256;
  double lr_embedding = 0.01;  // eta: user and item embeddings
  double lr_buffer = 0.01;     // beta: buffer parameters
  AdamConfig adam;
  Optimizer optimizer = Optimizer::kAdam;
  bool persist_moments = false;  // keep p/buffer Adam moments across rounds
  bool pin_buffer_b = false;     // freeze the shared factor B (ablation hook)
  // Finite value enables per-batch gradient clipping at that threshold.
  double batch_clip_threshold = std::numeric_limits<double>::infinity();
};

struct ClientState {
  std::uint32_t user_id = 0;
  Variant variant = Variant::kCLR;
  Vec p;               // d
  Matrix q;            // m x d local item matrix
  Matrix w;            // full buffer, kAF/kCF only
  LowRankBuffer lora;  // kCLR only
  std::uint32_t weight = 0;  // |D_u|
  std::uint32_t last_step1_round = 0;
  std::uint32_t last_personalized_round = 0;

  // Present only when persist_moments is set; item-matrix moments are always
  // fresh because Q is replaced by the download each round.
  std::optional<AdamState> p_moments;
  std::optional<AdamState> w_moments;
  std::optional<AdamState> a_moments;
  std::optional<AdamState> b_moments;
};

/// Fresh client state: p ~ N(0, init_std^2), Q copied from the initial global
/// model, buffer per variant (W zero; A zero, B ~ N(0, 1/r)).
ClientState init_client(std::uint32_t user, Variant variant, const Matrix& q_global0,
                        std::uint32_t rank, double init_std, std::uint64_t init_seed);

/// positives labeled 1 followed by negatives labeled 0.
std::vector<std::pair<std::uint32_t, int>> build_examples(
    std::span<const std::uint32_t> positives, std::span<const std::uint32_t> negatives);

/// Step 1: replaces the local item matrix with the downloaded global model and
/// trains it on this round's examples with the user embedding frozen. Buffers
/// and p are untouched. Only rows hit by a batch move.
void step1_local_training(ClientState& state, const Matrix& q_global_prev,
                          const ImplicitDataset& dataset, const NegativeSampler& sampler,
                          const ClientConfig& config, std::uint64_t run_seed,
                          std::uint32_t round);

/// Step 2: with the local item matrix frozen, jointly trains the user
/// embedding (lr_embedding) and the buffer (lr_buffer) against effective item
/// vectors q_i + buffer_i. Buffer parameters step first within each batch, so
/// the user embedding always sees the freshly calibrated item vectors.
/// Requires step 1 of the same round to have run. No-op under kFedMF.
void step2_dual_function(ClientState& state, const ImplicitDataset& dataset,
                         const NegativeSampler& sampler, const ClientConfig& config,
                         std::uint64_t run_seed, std::uint32_t round);

/// The round's training phase plus the wire copy of the upload (LDP clip and
/// noise applied when enabled). For kFedMF/kAF this is joint training; for
/// kCF/kCLR it is step 1. The upload never reflects this round's
/// personalization.
Matrix client_train_and_upload(ClientState& state, const Matrix& q_global_prev,
                               const ImplicitDataset& dataset,
                               const NegativeSampler& sampler, const ClientConfig& config,
                               const LdpConfig& ldp, std::uint64_t run_seed,
                               std::uint64_t noise_seed, std::uint32_t round);

/// The round's personalization phase: step 2 for kCF/kCLR, buffer-only
/// fine-tuning for kAF, nothing for kFedMF.
void client_personalize(ClientState& state, const ImplicitDataset& dataset,
                        const NegativeSampler& sampler, const ClientConfig& config,
                        std::uint64_t run_seed, std::uint32_t round);

/// Full client round: train, snapshot the upload, personalize.
Matrix run_variant_round(ClientState& state, const Matrix& q_global_prev,
                         const ImplicitDataset& dataset, const NegativeSampler& sampler,
                         const ClientConfig& config, const LdpConfig& ldp,
                         std::uint64_t run_seed, std::uint64_t noise_seed,
                         std::uint32_t round);

/// sigma(p . (q_i + buffer_i)) per candidate. merged=false scores the raw
/// local item matrix instead.
std::vector<double> inference_scores(const ClientState& state,
                                     std::span<const std::uint32_t> candidates,
                                     bool merged = true);

/// BCE of the client's current parameters over the given examples.
double client_loss(const ClientState& state,
                   std::span<const std::pair<std::uint32_t, int>> examples,
                   bool merged = true);

/// q_row + buffer contribution for one item, written to `out` (size d).
void effective_item(const ClientState& state, std::uint32_t item, std::span<double> out,
                    bool merged = true);

/// Client-side parameters the variant's buffer adds over the backbone:
/// 0 for kFedMF, m*d for the full-buffer variants, r*(m+d) for kCLR.
std::uint64_t buffer_parameter_count(Variant variant, std::uint64_t n_items,
                                     std::uint32_t dim, std::uint32_t rank);

}  // namespace pfedclr
