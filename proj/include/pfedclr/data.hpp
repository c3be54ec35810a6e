#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pfedclr/rng.hpp"

namespace pfedclr {

enum class RatingsFormat { kTabSeparated, kDoubleColon, kCsv };

RatingsFormat ratings_format_from_string(const std::string& name);
std::string to_string(RatingsFormat format);

struct RawRecord {
  std::string user;
  std::string item;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  bool has_timestamp = false;
  std::uint64_t file_order = 0;
};

struct RawInteractions {
  std::vector<RawRecord> records;
};

/// Parses a ratings log. Duplicate (user, item) pairs keep the record with
/// the greatest timestamp (later file position wins ties or missing stamps).
/// Malformed lines and negative ratings raise with the offending line number.
RawInteractions load_ratings(const std::filesystem::path& path, RatingsFormat format);

struct Interaction {
  std::uint32_t item = 0;
  std::int64_t timestamp = 0;
  bool has_timestamp = false;
  std::uint64_t file_order = 0;
};

// Binarized, user-filtered interactions with dense ids, before the holdout
// split. Item index space covers every item with at least one positive in the
// raw log, so filtering users does not change m.
struct InteractionLog {
  std::uint32_t n_users = 0;
  std::uint32_t n_items = 0;
  std::vector<std::vector<Interaction>> histories;  // per user, file order
  std::vector<std::string> user_ids;                // dense -> external
  std::vector<std::string> item_ids;
};

/// rating > 0 becomes a positive; users with fewer than min_interactions
/// positives are dropped, then user ids are re-densified.
InteractionLog binarize_and_filter(const RawInteractions& raw,
                                   std::uint32_t min_interactions = 10);

struct ImplicitDataset {
  std::uint32_t n_users = 0;
  std::uint32_t n_items = 0;
  std::vector<std::vector<std::uint32_t>> train_positives;  // per user
  std::vector<std::uint32_t> test_item;                     // per user
  std::vector<std::uint32_t> user_weights;                  // |D_u| = train count
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;

  std::uint64_t total_train_interactions() const;
};

/// Holds out each user's latest positive (greatest timestamp; last file
/// position among ties or when stamps are missing). Users with a single
/// positive cannot be split and raise.
ImplicitDataset leave_one_out_split(const InteractionLog& log);

/// load_ratings + binarize_and_filter + leave_one_out_split.
ImplicitDataset build_dataset(const std::filesystem::path& path, RatingsFormat format,
                              std::uint32_t min_interactions = 10);

// Train and evaluation negatives. Pools exclude each user's train positives
// and test item. Streams are keyed by (seed, user, round), so concurrent
// sampling never races and repeated calls reproduce the same draws.
class NegativeSampler {
 public:
  NegativeSampler(const ImplicitDataset& dataset, std::uint64_t seed,
                  std::uint32_t n_train_neg = 4, std::uint32_t n_eval_neg = 99);

  /// n_train_neg * |train_positives(user)| items, uniform with replacement.
  std::vector<std::uint32_t> train_negatives(std::uint32_t user, std::uint32_t round,
                                             Stream stream = Stream::kTrainNegStep1) const;

  /// Fixed per experiment: n_eval_neg distinct non-positive items (the whole
  /// pool when it is smaller).
  const std::vector<std::uint32_t>& eval_negatives(std::uint32_t user) const;
  bool eval_pool_truncated(std::uint32_t user) const;

  std::size_t pool_size(std::uint32_t user) const { return pools_[user].size(); }

 private:
  std::uint64_t seed_;
  std::uint32_t n_train_neg_;
  std::vector<std::vector<std::uint32_t>> pools_;
  std::vector<std::vector<std::uint32_t>> eval_;
  std::vector<std::uint32_t> positives_;
  std::vector<bool> truncated_;
};

/// Writes users.csv/items.csv (external_id,dense_id), train.csv, test.csv and
/// manifest.json into `dir`. Reloading reproduces the dataset bit for bit.
void save_dataset(const ImplicitDataset& dataset, const std::filesystem::path& dir,
                  std::uint64_t data_seed);
ImplicitDataset load_dataset(const std::filesystem::path& dir);

}  // namespace pfedclr
