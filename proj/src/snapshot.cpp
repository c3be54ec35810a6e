#include "pfedclr/snapshot.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pfedclr {

namespace {

constexpr char kMatrixMagic[4] = {'P', 'F', 'C', 'M'};
constexpr char kClientMagic[4] = {'P', 'F', 'C', 'C'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("snapshot: truncated stream");
  return value;
}

void write_doubles(std::ostream& out, std::span<const double> v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& in, std::span<double> v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw std::runtime_error("snapshot: truncated stream");
}

void write_matrix_body(std::ostream& out, const Matrix& m) {
  write_pod(out, static_cast<std::uint64_t>(m.rows()));
  write_pod(out, static_cast<std::uint64_t>(m.cols()));
  write_doubles(out, {m.data(), m.size()});
}

Matrix read_matrix_body(std::istream& in) {
  auto rows = read_pod<std::uint64_t>(in);
  auto cols = read_pod<std::uint64_t>(in);
  Matrix m(rows, cols);
  read_doubles(in, {m.data(), m.size()});
  return m;
}

void write_adam(std::ostream& out, const std::optional<AdamState>& state) {
  write_pod<std::uint8_t>(out, state.has_value() ? 1 : 0);
  if (!state) return;
  AdamConfig config = state->config();
  write_pod(out, config.beta1);
  write_pod(out, config.beta2);
  write_pod(out, config.epsilon);
  write_pod(out, state->step_count());
  write_pod(out, static_cast<std::uint64_t>(state->size()));
  write_doubles(out, state->first_moment());
  write_doubles(out, state->second_moment());
}

std::optional<AdamState> read_adam(std::istream& in) {
  if (read_pod<std::uint8_t>(in) == 0) return std::nullopt;
  AdamConfig config;
  config.beta1 = read_pod<double>(in);
  config.beta2 = read_pod<double>(in);
  config.epsilon = read_pod<double>(in);
  auto steps = read_pod<std::int64_t>(in);
  auto size = read_pod<std::uint64_t>(in);
  AdamState state(size, config);
  Vec m1(size), m2(size);
  read_doubles(in, m1);
  read_doubles(in, m2);
  state.restore(steps, std::move(m1), std::move(m2));
  return state;
}

}  // namespace

void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMatrixMagic, 4);
  write_pod(out, kFormatVersion);
  write_matrix_body(out, m);
  if (!out) throw std::runtime_error("short write to " + path.string());
}

Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMatrixMagic, 4) != 0) {
    throw std::runtime_error("not a matrix file: " + path.string());
  }
  if (read_pod<std::uint32_t>(in) != kFormatVersion) {
    throw std::runtime_error("unsupported matrix format version in " + path.string());
  }
  return read_matrix_body(in);
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char buf[1 << 16];
  std::uint64_t h = 0xcbf29ce484222325ull;
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_snapshot(const std::filesystem::path& dir, const RunSnapshot& snapshot) {
  // Written to a staging directory first so an interrupted write never
  // clobbers the previous snapshot.
  std::filesystem::path staging = dir;
  staging += ".tmp";
  std::filesystem::remove_all(staging);
  std::filesystem::create_directories(staging);

  write_matrix(staging / "global_q.bin", snapshot.global_q);
  {
    std::ofstream out(staging / "clients.bin", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write clients.bin");
    out.write(kClientMagic, 4);
    write_pod(out, kFormatVersion);
    write_pod(out, static_cast<std::uint64_t>(snapshot.clients.size()));
    for (const ClientState& c : snapshot.clients) {
      write_pod(out, c.user_id);
      write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(c.variant));
      write_pod(out, c.weight);
      write_pod(out, c.last_step1_round);
      write_pod(out, c.last_personalized_round);
      write_pod(out, static_cast<std::uint64_t>(c.p.size()));
      write_doubles(out, c.p);
      write_matrix_body(out, c.q);
      write_pod<std::uint8_t>(out, c.w.empty() ? 0 : 1);
      if (!c.w.empty()) write_matrix_body(out, c.w);
      write_pod<std::uint8_t>(out, c.lora.empty() ? 0 : 1);
      if (!c.lora.empty()) {
        write_pod(out, c.lora.rank);
        write_matrix_body(out, c.lora.a);
        write_matrix_body(out, c.lora.b);
      }
      write_adam(out, c.p_moments);
      write_adam(out, c.w_moments);
      write_adam(out, c.a_moments);
      write_adam(out, c.b_moments);
    }
    if (!out) throw std::runtime_error("short write to clients.bin");
  }
  nlohmann::json meta = snapshot.meta;
  meta["round"] = snapshot.round;
  meta["format_version"] = kFormatVersion;
  {
    std::ofstream out(staging / "meta.json");
    out << meta.dump(2) << "\n";
  }
  std::filesystem::remove_all(dir);
  std::filesystem::rename(staging, dir);
}

RunSnapshot load_snapshot(const std::filesystem::path& dir) {
  RunSnapshot snapshot;
  {
    std::ifstream in(dir / "meta.json");
    if (!in) throw std::runtime_error("corrupt snapshot: missing meta.json in " + dir.string());
    snapshot.meta = nlohmann::json::parse(in);
  }
  snapshot.round = snapshot.meta.at("round").get<std::uint32_t>();
  snapshot.global_q = read_matrix(dir / "global_q.bin");

  std::ifstream in(dir / "clients.bin", std::ios::binary);
  if (!in) throw std::runtime_error("corrupt snapshot: missing clients.bin");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kClientMagic, 4) != 0) {
    throw std::runtime_error("corrupt snapshot: bad clients.bin header");
  }
  if (read_pod<std::uint32_t>(in) != kFormatVersion) {
    throw std::runtime_error("unsupported snapshot version");
  }
  auto n = read_pod<std::uint64_t>(in);
  snapshot.clients.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ClientState& c = snapshot.clients[i];
    c.user_id = read_pod<std::uint32_t>(in);
    c.variant = static_cast<Variant>(read_pod<std::uint8_t>(in));
    c.weight = read_pod<std::uint32_t>(in);
    c.last_step1_round = read_pod<std::uint32_t>(in);
    c.last_personalized_round = read_pod<std::uint32_t>(in);
    auto dim = read_pod<std::uint64_t>(in);
    c.p.resize(dim);
    read_doubles(in, c.p);
    c.q = read_matrix_body(in);
    if (read_pod<std::uint8_t>(in)) c.w = read_matrix_body(in);
    if (read_pod<std::uint8_t>(in)) {
      c.lora.rank = read_pod<std::uint32_t>(in);
      c.lora.a = read_matrix_body(in);
      c.lora.b = read_matrix_body(in);
    }
    c.p_moments = read_adam(in);
    c.w_moments = read_adam(in);
    c.a_moments = read_adam(in);
    c.b_moments = read_adam(in);
  }
  return snapshot;
}

std::uint64_t model_hash(const Matrix& global_q, std::span<const ClientState> clients) {
  std::uint64_t h = fnv1a(global_q.data(), global_q.size() * sizeof(double));
  for (const ClientState& c : clients) {
    h = fnv1a(c.p.data(), c.p.size() * sizeof(double), h);
    h = fnv1a(c.q.data(), c.q.size() * sizeof(double), h);
    if (!c.w.empty()) h = fnv1a(c.w.data(), c.w.size() * sizeof(double), h);
    if (!c.lora.empty()) {
      h = fnv1a(c.lora.a.data(), c.lora.a.size() * sizeof(double), h);
      h = fnv1a(c.lora.b.data(), c.lora.b.size() * sizeof(double), h);
    }
  }
  return h;
}

}  // namespace pfedclr
