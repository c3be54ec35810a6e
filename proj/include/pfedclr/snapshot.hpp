#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pfedclr/client.hpp"
#include "pfedclr/matrix.hpp"

#include <nlohmann/json.hpp>

namespace pfedclr {

// Matrices serialize to a small binary container: magic, version, shape,
// row-major float64 payload (little-endian). Round-trips are bit exact.
void write_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix(const std::filesystem::path& path);

/// FNV-1a 64 over a byte range; used for content fingerprints in manifests.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t hash_file(const std::filesystem::path& path);
std::string hash_hex(std::uint64_t h);

// Full training state at a round boundary: the global model, every client's
// state (including persisted optimizer moments when present), and a metadata
// document the orchestrator uses to continue the run.
struct RunSnapshot {
  std::uint32_t round = 0;
  Matrix global_q;
  std::vector<ClientState> clients;
  nlohmann::json meta;  // config echo, metrics so far, diagnostics state
};

void save_snapshot(const std::filesystem::path& dir, const RunSnapshot& snapshot);
RunSnapshot load_snapshot(const std::filesystem::path& dir);

/// Combined fingerprint of the learned parameters (global matrix plus every
/// client's user embedding and buffer); the determinism witness in manifests.
std::uint64_t model_hash(const Matrix& global_q, std::span<const ClientState> clients);

}  // namespace pfedclr
