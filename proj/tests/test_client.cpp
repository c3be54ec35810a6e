#include <doctest.h>

#include <cmath>

#include "pfedclr/client.hpp"
#include "support/synthetic.hpp"

using namespace pfedclr;

namespace {

struct Fixture {
  ImplicitDataset dataset;
  NegativeSampler sampler;
  Matrix global_q;
  ClientConfig config;
  LdpConfig ldp_off;
  std::uint64_t run_seed = 51;
  std::uint64_t noise_seed = 52;

  explicit Fixture(Variant variant, std::uint32_t n_users = 4, std::uint32_t n_items = 24,
                   std::uint32_t n_positives = 6, std::uint32_t rank = 2)
      : dataset(synthetic::make_dataset(n_users, n_items, n_positives, 31)),
        sampler(dataset, 17, 4, 10) {
    Rng rng(derive_seed(7, Stream::kGlobalInit));
    global_q = gaussian_matrix(n_items, 8, 0.0, 0.1, rng);
    config.epochs_step1 = 2;
    config.epochs_step2 = 2;
    config.batch_size = 16;
    (void)variant;
    (void)rank;
  }

  ClientState client(std::uint32_t u, Variant variant, std::uint32_t rank = 2) const {
    ClientState state = init_client(u, variant, global_q, rank, 0.1, 7);
    state.weight = dataset.user_weights[u];
    return state;
  }
};

}  // namespace

TEST_CASE("step 1 with zero epochs copies the download") {
  Fixture fx(Variant::kCLR);
  ClientState state = fx.client(0, Variant::kCLR);
  ClientConfig config = fx.config;
  config.epochs_step1 = 0;
  step1_local_training(state, fx.global_q, fx.dataset, fx.sampler, config, fx.run_seed, 1);
  CHECK(state.q == fx.global_q);
}

TEST_CASE("step 1 touches only rows seen in a batch") {
  // One positive; the only moved rows are that item plus this round's
  // sampled negatives.
  ImplicitDataset ds;
  ds.n_users = 1;
  ds.n_items = 12;
  ds.train_positives = {{3}};
  ds.test_item = {7};
  ds.user_weights = {1};
  NegativeSampler sampler(ds, 5, 4, 3);

  Rng rng(derive_seed(9, Stream::kGlobalInit));
  Matrix global_q = gaussian_matrix(12, 4, 0.0, 0.1, rng);
  ClientState state = init_client(0, Variant::kCLR, global_q, 2, 0.1, 9);
  ClientConfig config;
  config.epochs_step1 = 1;
  config.batch_size = 64;
  config.lr_embedding = 1e-3;

  step1_local_training(state, global_q, ds, sampler, config, 13, 1);

  std::set<std::uint32_t> touched{3};
  for (std::uint32_t item : sampler.train_negatives(0, 1, Stream::kTrainNegStep1)) {
    touched.insert(item);
  }
  for (std::uint32_t i = 0; i < 12; ++i) {
    bool same = true;
    for (std::uint32_t j = 0; j < 4; ++j) same = same && state.q(i, j) == global_q(i, j);
    if (touched.count(i)) {
      CHECK_FALSE(same);
    } else {
      CHECK(same);
    }
  }
  // p and the buffer never move in step 1.
  ClientState fresh = init_client(0, Variant::kCLR, global_q, 2, 0.1, 9);
  CHECK(state.p == fresh.p);
  CHECK(state.lora.a == fresh.lora.a);
  CHECK(state.lora.b == fresh.lora.b);
}

TEST_CASE("step 1 training loss is non-increasing in the epoch budget") {
  Fixture fx(Variant::kCLR);
  auto examples = build_examples(fx.dataset.train_positives[1],
                                 fx.sampler.train_negatives(1, 1, Stream::kTrainNegStep1));
  ClientConfig config = fx.config;
  config.batch_size = 1024;  // one batch per epoch
  config.lr_embedding = 1e-3;

  double prev = std::numeric_limits<double>::infinity();
  for (std::uint32_t epochs = 0; epochs <= 6; ++epochs) {
    ClientState state = fx.client(1, Variant::kCLR);
    config.epochs_step1 = epochs;
    step1_local_training(state, fx.global_q, fx.dataset, fx.sampler, config, fx.run_seed, 1);
    double loss = client_loss(state, examples, false);
    CHECK(loss <= prev + 1e-9);
    prev = loss;
  }
}

TEST_CASE("step 2 ordering guard") {
  Fixture fx(Variant::kCLR);
  ClientState state = fx.client(0, Variant::kCLR);
  CHECK_THROWS_AS(
      step2_dual_function(state, fx.dataset, fx.sampler, fx.config, fx.run_seed, 1),
      std::logic_error);
  step1_local_training(state, fx.global_q, fx.dataset, fx.sampler, fx.config, fx.run_seed, 1);
  CHECK_NOTHROW(
      step2_dual_function(state, fx.dataset, fx.sampler, fx.config, fx.run_seed, 1));
  // Next round requires a fresh step 1.
  CHECK_THROWS_AS(
      step2_dual_function(state, fx.dataset, fx.sampler, fx.config, fx.run_seed, 2),
      std::logic_error);
}

TEST_CASE("step 2 with zero buffer rate moves only the user embedding") {
  Fixture fx(Variant::kCLR);
  ClientState state = fx.client(2, Variant::kCLR);
  step1_local_training(state, fx.global_q, fx.dataset, fx.sampler, fx.config, fx.run_seed, 1);
  Matrix a_before = state.lora.a;
  Matrix b_before = state.lora.b;
  Vec p_before = state.p;
  ClientConfig config = fx.config;
  config.lr_buffer = 0.0;
  step2_dual_function(state, fx.dataset, fx.sampler, config, fx.run_seed, 1);
  CHECK(state.lora.a == a_before);
  CHECK(state.lora.b == b_before);
  CHECK(state.p != p_before);
}

TEST_CASE("decoupling: step 2 freezes Q, step 1 freezes p and the buffer") {
  for (Variant variant : {Variant::kCF, Variant::kCLR}) {
    CAPTURE(to_string(variant));
    Fixture fx(variant);
    ClientState state = fx.client(1, variant);

    Vec p0 = state.p;
    Matrix w0 = state.w;
    LowRankBuffer lora0 = state.lora;
    step1_local_training(state, fx.global_q, fx.dataset, fx.sampler, fx.config,
                         fx.run_seed, 1);
    CHECK(state.p == p0);
    CHECK(state.w == w0);
    CHECK(state.lora.a == lora0.a);
    CHECK(state.lora.b == lora0.b);

    Matrix q_after_step1 = state.q;
    step2_dual_function(state, fx.dataset, fx.sampler, fx.config, fx.run_seed, 1);
    CHECK(state.q == q_after_step1);
    CHECK(state.p != p0);
  }
}

TEST_CASE("before any buffer update, merged scores equal the raw ones") {
  Fixture fx(Variant::kCLR);
  ClientState state = fx.client(0, Variant::kCLR);
  std::vector<std::uint32_t> candidates{0, 1, 5, 9};
  CHECK(inference_scores(state, candidates, true) ==
        inference_scores(state, candidates, false));
}

TEST_CASE("zero-initialized embeddings score one half everywhere") {
  Fixture fx(Variant::kFedMF);
  Matrix zero_q(fx.global_q.rows(), fx.global_q.cols(), 0.0);
  ClientState state = init_client(0, Variant::kFedMF, zero_q, 2, 0.0, 7);
  std::vector<std::uint32_t> candidates{0, 3, 11};
  for (double s : inference_scores(state, candidates)) CHECK(s == 0.5);
}

TEST_CASE("uploads never contain this round's personalization") {
  Fixture fx(Variant::kCLR);
  ClientState state = fx.client(3, Variant::kCLR);

  Matrix upload = run_variant_round(state, fx.global_q, fx.dataset, fx.sampler, fx.config,
                                    fx.ldp_off, fx.run_seed, fx.noise_seed, 1);
  CHECK(upload == state.q);  // bitwise: no A.B contribution
  // The merged state does differ once the buffer trained.
  bool merged_differs = false;
  Vec q_eff(state.q.cols());
  for (std::uint32_t item = 0; item < state.q.rows() && !merged_differs; ++item) {
    effective_item(state, item, q_eff);
    for (std::size_t j = 0; j < q_eff.size(); ++j) {
      if (q_eff[j] != state.q(item, j)) merged_differs = true;
    }
  }
  CHECK(merged_differs);
}

TEST_CASE("uploads are independent of the buffer state (privacy order)") {
  Fixture fx(Variant::kCLR);
  ClientState a = fx.client(2, Variant::kCLR);
  ClientState b = fx.client(2, Variant::kCLR);
  // Wreck b's buffer and user embedding moments before the round.
  for (std::size_t i = 0; i < b.lora.a.size(); ++i) b.lora.a.data()[i] = 3.7 + i;
  for (std::size_t i = 0; i < b.lora.b.size(); ++i) b.lora.b.data()[i] = -1.3 * i;

  Matrix up_a = client_train_and_upload(a, fx.global_q, fx.dataset, fx.sampler, fx.config,
                                        fx.ldp_off, fx.run_seed, fx.noise_seed, 4);
  Matrix up_b = client_train_and_upload(b, fx.global_q, fx.dataset, fx.sampler, fx.config,
                                        fx.ldp_off, fx.run_seed, fx.noise_seed, 4);
  CHECK(up_a == up_b);
}

TEST_CASE("CF and CLR coincide when B is pinned to the identity at full rank") {
  const std::uint32_t d = 8;
  Fixture fx(Variant::kCLR);
  ClientConfig config = fx.config;
  config.pin_buffer_b = true;

  ClientState clr = fx.client(1, Variant::kCLR, d);
  for (std::size_t i = 0; i < clr.lora.b.size(); ++i) clr.lora.b.data()[i] = 0.0;
  for (std::uint32_t j = 0; j < d; ++j) clr.lora.b(j, j) = 1.0;

  ClientState cf = fx.client(1, Variant::kCF);

  for (std::uint32_t round = 1; round <= 2; ++round) {
    Matrix up_clr = run_variant_round(clr, fx.global_q, fx.dataset, fx.sampler, config,
                                      fx.ldp_off, fx.run_seed, fx.noise_seed, round);
    Matrix up_cf = run_variant_round(cf, fx.global_q, fx.dataset, fx.sampler, config,
                                     fx.ldp_off, fx.run_seed, fx.noise_seed, round);
    CHECK(up_clr == up_cf);
    CHECK(clr.p == cf.p);
    CHECK(clr.lora.a == cf.w);
  }
}

TEST_CASE("AF with a frozen buffer degenerates to the FedMF backbone") {
  Fixture fx(Variant::kAF);
  ClientConfig config = fx.config;
  config.lr_buffer = 0.0;

  ClientState af = fx.client(0, Variant::kAF);
  ClientState fedmf = fx.client(0, Variant::kFedMF);
  for (std::uint32_t round = 1; round <= 2; ++round) {
    Matrix up_af = run_variant_round(af, fx.global_q, fx.dataset, fx.sampler, config,
                                     fx.ldp_off, fx.run_seed, fx.noise_seed, round);
    Matrix up_mf = run_variant_round(fedmf, fx.global_q, fx.dataset, fx.sampler, config,
                                     fx.ldp_off, fx.run_seed, fx.noise_seed, round);
    CHECK(up_af == up_mf);
    CHECK(af.p == fedmf.p);
  }
  std::vector<std::uint32_t> candidates{0, 2, 4, 6};
  CHECK(inference_scores(af, candidates) == inference_scores(fedmf, candidates));
}

TEST_CASE("AF personalizes items without moving the user embedding") {
  Fixture fx(Variant::kAF);
  ClientState state = fx.client(2, Variant::kAF);
  client_train_and_upload(state, fx.global_q, fx.dataset, fx.sampler, fx.config,
                          fx.ldp_off, fx.run_seed, fx.noise_seed, 1);
  Vec p_after_joint = state.p;
  Matrix w_before = state.w;
  client_personalize(state, fx.dataset, fx.sampler, fx.config, fx.run_seed, 1);
  CHECK(state.p == p_after_joint);
  CHECK(state.w != w_before);
}

TEST_CASE("FedMF ignores personalization entirely") {
  Fixture fx(Variant::kFedMF);
  ClientState state = fx.client(1, Variant::kFedMF);
  Matrix upload = client_train_and_upload(state, fx.global_q, fx.dataset, fx.sampler,
                                          fx.config, fx.ldp_off, fx.run_seed,
                                          fx.noise_seed, 1);
  ClientState before = state;
  client_personalize(state, fx.dataset, fx.sampler, fx.config, fx.run_seed, 1);
  CHECK(state.p == before.p);
  CHECK(state.q == before.q);
  CHECK(upload == state.q);
}

TEST_CASE("step 2 sequential update: p sees the freshly stepped buffer") {
  // Single example, single epoch, plain gradient steps. The buffer moves
  // first, so the user update must equal -eta times the gradient at the
  // merged post-step item vector.
  ImplicitDataset ds;
  ds.n_users = 1;
  ds.n_items = 2;
  ds.train_positives = {{0}};
  ds.test_item = {1};
  ds.user_weights = {1};
  NegativeSampler sampler(ds, 23, 0, 1);  // no negatives

  Rng rng(derive_seed(3, Stream::kGlobalInit));
  Matrix global_q = gaussian_matrix(2, 4, 0.0, 0.5, rng);
  ClientState state = init_client(0, Variant::kCF, global_q, 1, 0.5, 3);

  ClientConfig config;
  config.optimizer = Optimizer::kSgd;
  config.epochs_step1 = 0;
  config.epochs_step2 = 1;
  config.batch_size = 8;
  config.lr_embedding = 0.01;
  config.lr_buffer = 0.02;

  step1_local_training(state, global_q, ds, sampler, config, 29, 1);
  Vec p0 = state.p;
  Matrix q0 = state.q;

  step2_dual_function(state, ds, sampler, config, 29, 1);

  // Replay by hand: w step at w=0, then p step at q + w.
  Vec w = grad_item(p0, q0.row(0), 1);
  for (double& x : w) x *= -config.lr_buffer;
  Vec q_eff(4);
  for (std::size_t j = 0; j < 4; ++j) q_eff[j] = q0(0, j) + w[j];
  Matrix q_eff_m(1, 4);
  for (std::size_t j = 0; j < 4; ++j) q_eff_m(0, j) = q_eff[j];
  std::vector<int> labels{1};
  Vec gp = grad_user(p0, q_eff_m, labels);

  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(state.w(0, j) == doctest::Approx(w[j]).epsilon(1e-14));
    CHECK(state.p[j] == doctest::Approx(p0[j] - config.lr_embedding * gp[j]).epsilon(1e-14));
  }
}

TEST_CASE("empty training set raises with the client id") {
  ImplicitDataset ds;
  ds.n_users = 1;
  ds.n_items = 4;
  ds.train_positives = {{}};
  ds.test_item = {0};
  ds.user_weights = {0};
  NegativeSampler sampler(ds, 1, 4, 2);
  Matrix global_q(4, 2, 0.0);
  ClientState state = init_client(0, Variant::kCLR, global_q, 1, 0.1, 1);
  ClientConfig config;
  CHECK_THROWS_AS(
      step1_local_training(state, global_q, ds, sampler, config, 1, 1),
      std::runtime_error);
}

TEST_CASE("optimizer moments persist across rounds only when asked") {
  Fixture fx(Variant::kCLR);
  ClientConfig persist = fx.config;
  persist.persist_moments = true;

  ClientState keep = fx.client(0, Variant::kCLR);
  ClientState fresh = fx.client(0, Variant::kCLR);
  for (std::uint32_t round = 1; round <= 2; ++round) {
    run_variant_round(keep, fx.global_q, fx.dataset, fx.sampler, persist, fx.ldp_off,
                      fx.run_seed, fx.noise_seed, round);
    run_variant_round(fresh, fx.global_q, fx.dataset, fx.sampler, fx.config, fx.ldp_off,
                      fx.run_seed, fx.noise_seed, round);
  }
  REQUIRE(keep.p_moments.has_value());
  CHECK(keep.p_moments->step_count() > 0);
  CHECK_FALSE(fresh.p_moments.has_value());
  // Round 1 is identical (both start cold); round 2 diverges.
  CHECK(keep.p != fresh.p);
  // Step-1 result never depends on the carried moments (Q restarts from the
  // download, so its optimizer state is always cold).
  CHECK(keep.q == fresh.q);
}

TEST_CASE("buffer parameter accounting") {
  CHECK(buffer_parameter_count(Variant::kFedMF, 1682, 16, 2) == 0);
  CHECK(buffer_parameter_count(Variant::kCF, 1682, 16, 2) == 1682 * 16);
  CHECK(buffer_parameter_count(Variant::kCLR, 1682, 16, 2) == 2 * (1682 + 16));
}
