#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "ctflab/ctf/ctf.hpp"

namespace ctflab::cli {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// A CTF run frozen between two iterations. Every random decision is derived
// from (master seed, iteration, sample id, pair seed), so no generator state
// needs saving beyond the master seed.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t master_seed = 0;
  ctf::CtfState state;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct LoadOptions {
  // Expected config hash; nullopt skips the comparison.
  std::optional<std::uint64_t> expected_hash;
  // Accept a hash mismatch, reporting it through `warn` instead of failing.
  bool allow_config_mismatch = false;
  std::function<void(const std::string&)> warn;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const LoadOptions& opts = {});

// Writes to "<path>.tmp" and renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const LoadOptions& opts = {});

}  // namespace ctflab::cli
