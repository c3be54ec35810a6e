#include "pfedclr/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace pfedclr {

namespace {

using json = nlohmann::json;

[[noreturn]] void parse_fail(const std::filesystem::path& path, std::uint64_t line,
                             const std::string& what) {
  throw std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what);
}

std::vector<std::string> split_fields(const std::string& line, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = line.find(sep, pos);
    if (next == std::string::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Numeric-aware comparison so external ids like "10" sort after "9".
bool id_less(const std::string& a, const std::string& b) {
  std::int64_t ia = 0, ib = 0;
  auto ra = std::from_chars(a.data(), a.data() + a.size(), ia);
  auto rb = std::from_chars(b.data(), b.data() + b.size(), ib);
  bool na = ra.ec == std::errc() && ra.ptr == a.data() + a.size();
  bool nb = rb.ec == std::errc() && rb.ptr == b.data() + b.size();
  if (na && nb) return ia < ib;
  if (na != nb) return na;  // numeric ids before non-numeric
  return a < b;
}

}  // namespace

RatingsFormat ratings_format_from_string(const std::string& name) {
  if (name == "tab" || name == "tab_separated") return RatingsFormat::kTabSeparated;
  if (name == "double_colon") return RatingsFormat::kDoubleColon;
  if (name == "csv") return RatingsFormat::kCsv;
  throw std::invalid_argument("unknown ratings format: " + name);
}

std::string to_string(RatingsFormat format) {
  switch (format) {
    case RatingsFormat::kTabSeparated: return "tab_separated";
    case RatingsFormat::kDoubleColon: return "double_colon";
    case RatingsFormat::kCsv: return "csv";
  }
  return "?";
}

RawInteractions load_ratings(const std::filesystem::path& path, RatingsFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ratings file: " + path.string());

  const std::string sep = format == RatingsFormat::kTabSeparated ? "\t"
                          : format == RatingsFormat::kDoubleColon ? "::"
                                                                  : ",";
  std::string line;
  std::uint64_t line_no = 0;
  std::uint64_t order = 0;
  bool header_skipped = false;
  // Last-writer-wins per (user, item) with greatest timestamp.
  std::map<std::pair<std::string, std::string>, RawRecord> latest;

  while (std::getline(in, line)) {
    ++line_no;
    std::string stripped = trim(line);
    if (stripped.empty()) continue;
    if (format == RatingsFormat::kCsv && !header_skipped) {
      header_skipped = true;  // first non-empty row is the header
      continue;
    }
    auto fields = split_fields(stripped, sep);
    if (fields.size() < 3) {
      parse_fail(path, line_no, "expected user" + sep + "item" + sep +
                                    "rating[" + sep + "timestamp], got \"" + stripped + "\"");
    }
    RawRecord rec;
    rec.user = trim(fields[0]);
    rec.item = trim(fields[1]);
    if (rec.user.empty() || rec.item.empty()) parse_fail(path, line_no, "empty id field");
    try {
      rec.rating = std::stod(trim(fields[2]));
    } catch (const std::exception&) {
      parse_fail(path, line_no, "rating is not a number: \"" + fields[2] + "\"");
    }
    if (rec.rating < 0) parse_fail(path, line_no, "negative rating");
    if (fields.size() >= 4 && !trim(fields[3]).empty()) {
      std::string ts = trim(fields[3]);
      auto res = std::from_chars(ts.data(), ts.data() + ts.size(), rec.timestamp);
      if (res.ec != std::errc() || res.ptr != ts.data() + ts.size()) {
        parse_fail(path, line_no, "timestamp is not an integer: \"" + ts + "\"");
      }
      rec.has_timestamp = true;
    }
    rec.file_order = order++;

    auto key = std::make_pair(rec.user, rec.item);
    auto it = latest.find(key);
    if (it == latest.end()) {
      latest.emplace(std::move(key), std::move(rec));
    } else {
      const RawRecord& old = it->second;
      auto stamp = [](const RawRecord& r) {
        return std::make_pair(r.has_timestamp ? r.timestamp
                                              : std::numeric_limits<std::int64_t>::min(),
                              r.file_order);
      };
      if (stamp(rec) > stamp(old)) it->second = std::move(rec);
    }
  }
  if (latest.empty()) throw std::runtime_error("ratings file is empty: " + path.string());

  RawInteractions raw;
  raw.records.reserve(latest.size());
  for (auto& [key, rec] : latest) raw.records.push_back(std::move(rec));
  std::sort(raw.records.begin(), raw.records.end(),
            [](const RawRecord& a, const RawRecord& b) { return a.file_order < b.file_order; });
  return raw;
}

InteractionLog binarize_and_filter(const RawInteractions& raw,
                                   std::uint32_t min_interactions) {
  if (raw.records.empty()) throw std::invalid_argument("binarize_and_filter: no records");

  // Item index space: every item with a positive anywhere in the raw log.
  std::set<std::string, decltype(&id_less)> item_set(&id_less);
  std::map<std::string, std::vector<const RawRecord*>, decltype(&id_less)> by_user(&id_less);
  for (const RawRecord& rec : raw.records) {
    if (rec.rating <= 0) continue;
    item_set.insert(rec.item);
    by_user[rec.user].push_back(&rec);
  }
  if (by_user.empty()) throw std::runtime_error("binarize_and_filter: no positive interactions");

  InteractionLog log;
  log.item_ids.assign(item_set.begin(), item_set.end());
  log.n_items = static_cast<std::uint32_t>(log.item_ids.size());
  std::unordered_map<std::string, std::uint32_t> item_index;
  for (std::uint32_t i = 0; i < log.n_items; ++i) item_index[log.item_ids[i]] = i;

  for (auto& [user, recs] : by_user) {
    if (recs.size() < min_interactions) continue;
    std::sort(recs.begin(), recs.end(),
              [](const RawRecord* a, const RawRecord* b) { return a->file_order < b->file_order; });
    std::vector<Interaction> history;
    history.reserve(recs.size());
    for (const RawRecord* rec : recs) {
      history.push_back({item_index.at(rec->item), rec->timestamp, rec->has_timestamp,
                         rec->file_order});
    }
    log.user_ids.push_back(user);
    log.histories.push_back(std::move(history));
  }
  if (log.user_ids.empty()) {
    throw std::runtime_error("binarize_and_filter: every user fell below " +
                             std::to_string(min_interactions) + " interactions");
  }
  log.n_users = static_cast<std::uint32_t>(log.user_ids.size());
  return log;
}

ImplicitDataset leave_one_out_split(const InteractionLog& log) {
  ImplicitDataset ds;
  ds.n_users = log.n_users;
  ds.n_items = log.n_items;
  ds.user_ids = log.user_ids;
  ds.item_ids = log.item_ids;
  ds.train_positives.resize(log.n_users);
  ds.test_item.resize(log.n_users);
  ds.user_weights.resize(log.n_users);

  for (std::uint32_t u = 0; u < log.n_users; ++u) {
    const auto& history = log.histories[u];
    if (history.size() < 2) {
      throw std::runtime_error("leave_one_out_split: user " + log.user_ids[u] +
                               " has fewer than 2 positives");
    }
    // Greatest timestamp wins; missing stamps rank lowest; ties fall back to
    // file order so the last record is held out.
    std::size_t held = 0;
    auto key = [&](std::size_t idx) {
      const Interaction& it = history[idx];
      return std::make_pair(it.has_timestamp ? it.timestamp
                                             : std::numeric_limits<std::int64_t>::min(),
                            it.file_order);
    };
    for (std::size_t i = 1; i < history.size(); ++i) {
      if (key(i) >= key(held)) held = i;
    }
    ds.test_item[u] = history[held].item;
    auto& train = ds.train_positives[u];
    train.reserve(history.size() - 1);
    for (std::size_t i = 0; i < history.size(); ++i) {
      if (i != held) train.push_back(history[i].item);
    }
    ds.user_weights[u] = static_cast<std::uint32_t>(train.size());
  }
  return ds;
}

ImplicitDataset build_dataset(const std::filesystem::path& path, RatingsFormat format,
                              std::uint32_t min_interactions) {
  return leave_one_out_split(binarize_and_filter(load_ratings(path, format), min_interactions));
}

std::uint64_t ImplicitDataset::total_train_interactions() const {
  std::uint64_t total = 0;
  for (const auto& t : train_positives) total += t.size();
  return total;
}

NegativeSampler::NegativeSampler(const ImplicitDataset& dataset, std::uint64_t seed,
                                 std::uint32_t n_train_neg, std::uint32_t n_eval_neg)
    : seed_(seed), n_train_neg_(n_train_neg) {
  pools_.resize(dataset.n_users);
  eval_.resize(dataset.n_users);
  truncated_.assign(dataset.n_users, false);
  positives_.resize(dataset.n_users);
  for (std::uint32_t u = 0; u < dataset.n_users; ++u) {
    positives_[u] = static_cast<std::uint32_t>(dataset.train_positives[u].size());
  }

  std::vector<char> excluded(dataset.n_items);
  for (std::uint32_t u = 0; u < dataset.n_users; ++u) {
    std::fill(excluded.begin(), excluded.end(), 0);
    for (std::uint32_t item : dataset.train_positives[u]) excluded[item] = 1;
    excluded[dataset.test_item[u]] = 1;
    auto& pool = pools_[u];
    pool.reserve(dataset.n_items);
    for (std::uint32_t i = 0; i < dataset.n_items; ++i) {
      if (!excluded[i]) pool.push_back(i);
    }

    // Evaluation candidates are fixed once per experiment.
    auto& ev = eval_[u];
    if (pool.size() <= n_eval_neg) {
      ev = pool;
      truncated_[u] = pool.size() < n_eval_neg;
    } else {
      // Floyd's sampling: k distinct indices from [0, pool size).
      Rng rng(derive_seed(seed_, Stream::kEvalNeg, u));
      std::set<std::uint32_t> chosen;
      for (std::uint64_t j = pool.size() - n_eval_neg; j < pool.size(); ++j) {
        auto t = static_cast<std::uint32_t>(rng.below(j + 1));
        if (!chosen.insert(t).second) chosen.insert(static_cast<std::uint32_t>(j));
      }
      ev.reserve(chosen.size());
      for (std::uint32_t idx : chosen) ev.push_back(pool[idx]);
      std::sort(ev.begin(), ev.end());
    }
  }
}

std::vector<std::uint32_t> NegativeSampler::train_negatives(std::uint32_t user,
                                                            std::uint32_t round,
                                                            Stream stream) const {
  const std::size_t count = static_cast<std::size_t>(n_train_neg_) * positives_[user];
  if (count == 0) return {};
  const auto& pool = pools_[user];
  if (pool.empty()) {
    throw std::runtime_error("train_negatives: user " + std::to_string(user) +
                             " has interacted with every item");
  }
  Rng rng(derive_seed(seed_, stream, user, round));
  std::vector<std::uint32_t> out(count);
  for (auto& item : out) item = pool[rng.below(pool.size())];
  return out;
}

bool NegativeSampler::eval_pool_truncated(std::uint32_t user) const {
  return truncated_[user];
}

const std::vector<std::uint32_t>& NegativeSampler::eval_negatives(std::uint32_t user) const {
  return eval_[user];
}

void save_dataset(const ImplicitDataset& dataset, const std::filesystem::path& dir,
                  std::uint64_t data_seed) {
  std::filesystem::create_directories(dir);
  auto write_map = [&](const std::filesystem::path& file,
                       const std::vector<std::string>& ids) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "external_id,dense_id\n";
    for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << "," << i << "\n";
  };
  write_map(dir / "users.csv", dataset.user_ids);
  write_map(dir / "items.csv", dataset.item_ids);

  {
    std::ofstream out(dir / "train.csv");
    out << "user,item\n";
    for (std::uint32_t u = 0; u < dataset.n_users; ++u) {
      for (std::uint32_t item : dataset.train_positives[u]) {
        out << u << "," << item << "\n";
      }
    }
  }
  {
    std::ofstream out(dir / "test.csv");
    out << "user,item\n";
    for (std::uint32_t u = 0; u < dataset.n_users; ++u) {
      out << u << "," << dataset.test_item[u] << "\n";
    }
  }
  json manifest = {
      {"schema_version", 1},
      {"n_users", dataset.n_users},
      {"n_items", dataset.n_items},
      {"n_train_interactions", dataset.total_train_interactions()},
      {"data_seed", data_seed},
  };
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
}

ImplicitDataset load_dataset(const std::filesystem::path& dir) {
  auto read_lines = [](const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open " + file.string());
    std::vector<std::string> lines;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (!trim(line).empty()) lines.push_back(trim(line));
    }
    return lines;
  };

  ImplicitDataset ds;
  for (const std::string& line : read_lines(dir / "users.csv")) {
    ds.user_ids.push_back(line.substr(0, line.rfind(',')));
  }
  for (const std::string& line : read_lines(dir / "items.csv")) {
    ds.item_ids.push_back(line.substr(0, line.rfind(',')));
  }
  ds.n_users = static_cast<std::uint32_t>(ds.user_ids.size());
  ds.n_items = static_cast<std::uint32_t>(ds.item_ids.size());
  ds.train_positives.resize(ds.n_users);
  ds.test_item.assign(ds.n_users, 0);
  ds.user_weights.assign(ds.n_users, 0);

  auto parse_pair = [](const std::string& line) {
    std::size_t comma = line.find(',');
    return std::make_pair(static_cast<std::uint32_t>(std::stoul(line.substr(0, comma))),
                          static_cast<std::uint32_t>(std::stoul(line.substr(comma + 1))));
  };
  for (const std::string& line : read_lines(dir / "train.csv")) {
    auto [u, item] = parse_pair(line);
    ds.train_positives.at(u).push_back(item);
  }
  for (const std::string& line : read_lines(dir / "test.csv")) {
    auto [u, item] = parse_pair(line);
    ds.test_item.at(u) = item;
  }
  for (std::uint32_t u = 0; u < ds.n_users; ++u) {
    ds.user_weights[u] = static_cast<std::uint32_t>(ds.train_positives[u].size());
  }

  std::ifstream in(dir / "manifest.json");
  if (in) {
    json manifest = json::parse(in);
    if (manifest.value("n_users", ds.n_users) != ds.n_users ||
        manifest.value("n_items", ds.n_items) != ds.n_items) {
      throw std::runtime_error("dataset manifest disagrees with CSV contents in " +
                               dir.string());
    }
  }
  return ds;
}

}  // namespace pfedclr
