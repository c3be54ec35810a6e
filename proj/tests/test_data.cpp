#include <doctest.h>

#include <fstream>
#include <set>

#include "pfedclr/data.hpp"
#include "support/synthetic.hpp"

using namespace pfedclr;

namespace {

std::filesystem::path write_file(const std::filesystem::path& dir,
                                 const std::string& name, const std::string& body) {
  auto path = dir / name;
  std::ofstream out(path);
  out << body;
  return path;
}

RawInteractions raw_from(const std::vector<std::tuple<std::string, std::string, double,
                                                      std::int64_t>>& rows) {
  RawInteractions raw;
  std::uint64_t order = 0;
  for (const auto& [u, i, r, ts] : rows) {
    raw.records.push_back({u, i, r, ts, true, order++});
  }
  return raw;
}

}  // namespace

TEST_CASE("load_ratings parses both delimited formats") {
  auto dir = synthetic::temp_dir("load");
  auto tab = write_file(dir, "u.data", "196\t242\t3\t881250949\n186\t302\t3\t891717742\n");
  RawInteractions raw = load_ratings(tab, RatingsFormat::kTabSeparated);
  REQUIRE(raw.records.size() == 2);
  CHECK(raw.records[0].user == "196");
  CHECK(raw.records[0].item == "242");
  CHECK(raw.records[0].rating == 3.0);
  CHECK(raw.records[0].timestamp == 881250949);

  auto colon = write_file(dir, "ratings.dat", "1::1193::5::978300760\n");
  raw = load_ratings(colon, RatingsFormat::kDoubleColon);
  REQUIRE(raw.records.size() == 1);
  CHECK(raw.records[0].user == "1");
  CHECK(raw.records[0].item == "1193");
  CHECK(raw.records[0].rating == 5.0);

  auto csv = write_file(dir, "ratings.csv", "user,item,rating,ts\n7,9,4.5,100\n");
  raw = load_ratings(csv, RatingsFormat::kCsv);
  REQUIRE(raw.records.size() == 1);
  CHECK(raw.records[0].rating == 4.5);
}

TEST_CASE("load_ratings error paths") {
  auto dir = synthetic::temp_dir("load_err");
  auto missing_fields = write_file(dir, "bad.data", "196 242\n");
  CHECK_THROWS_WITH_AS(load_ratings(missing_fields, RatingsFormat::kTabSeparated),
                       doctest::Contains(":1:"), std::runtime_error);

  auto empty = write_file(dir, "empty.data", "");
  CHECK_THROWS_AS(load_ratings(empty, RatingsFormat::kTabSeparated), std::runtime_error);

  auto negative = write_file(dir, "neg.data", "1\t2\t-1\t10\n");
  CHECK_THROWS_AS(load_ratings(negative, RatingsFormat::kTabSeparated),
                  std::runtime_error);

  CHECK_THROWS_AS(load_ratings(dir / "nope.data", RatingsFormat::kTabSeparated),
                  std::runtime_error);
}

TEST_CASE("duplicate pairs keep the record with the greatest timestamp") {
  auto dir = synthetic::temp_dir("dup");
  auto path = write_file(dir, "dup.data",
                         "1\t7\t2\t300\n"
                         "1\t7\t5\t100\n"  // older, dropped
                         "2\t7\t4\t50\n");
  RawInteractions raw = load_ratings(path, RatingsFormat::kTabSeparated);
  REQUIRE(raw.records.size() == 2);
  CHECK(raw.records[0].rating == 2.0);
  CHECK(raw.records[0].timestamp == 300);
}

TEST_CASE("binarize_and_filter thresholds users at min_interactions") {
  std::vector<std::tuple<std::string, std::string, double, std::int64_t>> rows;
  for (int i = 0; i < 9; ++i) rows.push_back({"alice", "i" + std::to_string(i), 1, i});
  for (int i = 0; i < 10; ++i) rows.push_back({"bob", "i" + std::to_string(i), 1, i});
  InteractionLog log = binarize_and_filter(raw_from(rows), 10);
  REQUIRE(log.n_users == 1);
  CHECK(log.user_ids[0] == "bob");
  // alice's items stay in the index space even though she was filtered.
  CHECK(log.n_items == 10);

  CHECK_THROWS_AS(binarize_and_filter(raw_from(rows), 11), std::runtime_error);
  CHECK_THROWS_AS(binarize_and_filter(RawInteractions{}, 1), std::invalid_argument);
}

TEST_CASE("binarization drops zero ratings and is idempotent") {
  std::vector<std::tuple<std::string, std::string, double, std::int64_t>> rows;
  for (int i = 0; i < 5; ++i) rows.push_back({"u", "i" + std::to_string(i), 2.5, i});
  rows.push_back({"u", "zero", 0.0, 99});
  InteractionLog log = binarize_and_filter(raw_from(rows), 2);
  CHECK(log.n_items == 5);  // "zero" never became a positive
  REQUIRE(log.histories[0].size() == 5);

  // Feed the binarized output back through; nothing changes.
  std::vector<std::tuple<std::string, std::string, double, std::int64_t>> again;
  for (const Interaction& it : log.histories[0]) {
    again.push_back({log.user_ids[0], log.item_ids[it.item], 1.0, it.timestamp});
  }
  InteractionLog log2 = binarize_and_filter(raw_from(again), 2);
  CHECK(log2.n_items == log.n_items);
  CHECK(log2.n_users == log.n_users);
  for (std::size_t i = 0; i < log.histories[0].size(); ++i) {
    CHECK(log2.item_ids[log2.histories[0][i].item] ==
          log.item_ids[log.histories[0][i].item]);
  }
}

TEST_CASE("leave_one_out_split holds out the latest positive") {
  SUBCASE("greatest timestamp wins") {
    std::vector<std::tuple<std::string, std::string, double, std::int64_t>> rows{
        {"u", "a", 1, 1}, {"u", "b", 1, 5}, {"u", "c", 1, 3}};
    ImplicitDataset ds = leave_one_out_split(binarize_and_filter(raw_from(rows), 2));
    CHECK(ds.item_ids[ds.test_item[0]] == "b");
    REQUIRE(ds.train_positives[0].size() == 2);
    std::set<std::string> train{ds.item_ids[ds.train_positives[0][0]],
                                ds.item_ids[ds.train_positives[0][1]]};
    CHECK(train == std::set<std::string>{"a", "c"});
    CHECK(ds.user_weights[0] == 2);
  }
  SUBCASE("equal timestamps fall back to file order, last record wins") {
    std::vector<std::tuple<std::string, std::string, double, std::int64_t>> rows{
        {"u", "a", 1, 1}, {"u", "b", 1, 1}};
    ImplicitDataset ds = leave_one_out_split(binarize_and_filter(raw_from(rows), 2));
    CHECK(ds.item_ids[ds.test_item[0]] == "b");
  }
  SUBCASE("a single positive cannot be split") {
    std::vector<std::tuple<std::string, std::string, double, std::int64_t>> rows{
        {"u", "a", 1, 1}};
    CHECK_THROWS_AS(leave_one_out_split(binarize_and_filter(raw_from(rows), 1)),
                    std::runtime_error);
  }
}

TEST_CASE("split sizes: every user loses exactly one positive") {
  auto dir = synthetic::temp_dir("sizes");
  auto path = synthetic::write_ratings_file(dir / "r.data", 12, 40, 11, 77);
  RawInteractions raw = load_ratings(path, RatingsFormat::kTabSeparated);
  InteractionLog log = binarize_and_filter(raw, 10);
  ImplicitDataset ds = leave_one_out_split(log);
  REQUIRE(ds.n_users == log.n_users);
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    CHECK(ds.train_positives[u].size() == log.histories[u].size() - 1);
    for (std::uint32_t item : ds.train_positives[u]) CHECK(item != ds.test_item[u]);
  }
}

TEST_CASE("train negatives avoid the user's positives and test item") {
  ImplicitDataset ds;
  ds.n_users = 1;
  ds.n_items = 5;
  ds.train_positives = {{0, 1}};
  ds.test_item = {2};
  ds.user_weights = {2};
  NegativeSampler sampler(ds, 123, 4, 2);

  auto negs = sampler.train_negatives(0, 1);
  CHECK(negs.size() == 4 * 2);
  for (std::uint32_t item : negs) CHECK((item == 3 || item == 4));

  CHECK(sampler.train_negatives(0, 1) == negs);  // same (seed, user, round)
  CHECK(sampler.train_negatives(0, 2) != negs);  // fresh draw per round
  CHECK(sampler.train_negatives(0, 1, Stream::kTrainNegStep2) != negs);
}

TEST_CASE("train negative count follows n_per_positive") {
  ImplicitDataset ds = synthetic::make_dataset(3, 50, 10, 5);
  NegativeSampler sampler(ds, 9, 4, 10);
  CHECK(sampler.train_negatives(1, 3).size() == 40);
}

TEST_CASE("exhausted pools raise") {
  ImplicitDataset ds;
  ds.n_users = 1;
  ds.n_items = 3;
  ds.train_positives = {{0, 1}};
  ds.test_item = {2};
  ds.user_weights = {2};
  NegativeSampler sampler(ds, 1, 4, 99);
  CHECK_THROWS_AS(sampler.train_negatives(0, 1), std::runtime_error);
}

TEST_CASE("eval negatives are distinct, exclusive, and fixed") {
  ImplicitDataset ds = synthetic::make_dataset(4, 200, 50, 21);
  NegativeSampler sampler(ds, 42, 4, 99);
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    const auto& ev = sampler.eval_negatives(u);
    REQUIRE(ev.size() == 99);
    std::set<std::uint32_t> uniq(ev.begin(), ev.end());
    CHECK(uniq.size() == 99);
    CHECK(uniq.count(ds.test_item[u]) == 0);
    for (std::uint32_t item : ds.train_positives[u]) CHECK(uniq.count(item) == 0);
    CHECK_FALSE(sampler.eval_pool_truncated(u));
  }
  // Rebuilding with the same seed reproduces the candidates exactly.
  NegativeSampler again(ds, 42, 4, 99);
  CHECK(again.eval_negatives(2) == sampler.eval_negatives(2));
}

TEST_CASE("small pools fall back to every candidate with a warning flag") {
  ImplicitDataset ds;
  ds.n_users = 1;
  ds.n_items = 100;
  std::vector<std::uint32_t> positives;
  for (std::uint32_t i = 0; i < 95; ++i) positives.push_back(i);
  ds.train_positives = {positives};
  ds.test_item = {95};
  ds.user_weights = {95};
  NegativeSampler sampler(ds, 3, 4, 99);
  CHECK(sampler.eval_negatives(0).size() == 4);  // items 96..99
  CHECK(sampler.eval_pool_truncated(0));
}

TEST_CASE("dataset snapshots round-trip bit for bit") {
  auto dir = synthetic::temp_dir("roundtrip");
  ImplicitDataset ds = synthetic::make_dataset(6, 30, 8, 13);
  save_dataset(ds, dir / "snap", 99);
  ImplicitDataset back = load_dataset(dir / "snap");
  CHECK(back.n_users == ds.n_users);
  CHECK(back.n_items == ds.n_items);
  CHECK(back.train_positives == ds.train_positives);
  CHECK(back.test_item == ds.test_item);
  CHECK(back.user_weights == ds.user_weights);
  CHECK(back.user_ids == ds.user_ids);
  CHECK(back.item_ids == ds.item_ids);
}
