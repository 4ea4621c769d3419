#include "ctflab/cli/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "ctflab/binary_io.hpp"
#include "ctflab/error.hpp"

namespace ctflab::cli {

namespace {

using namespace binary_io;

constexpr char kMagic[8] = {'C', 'T', 'F', 'L', 'C', 'K', 'P', 'T'};
constexpr std::size_t kHeaderSize = 8 + 4 + 8 + 8;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

void collect(const std::string& prefix, const numerics::ParamSet& p,
             std::vector<std::pair<std::string, const numerics::Tensor*>>& out) {
  for (const auto& [name, t] : p.entries()) out.emplace_back(prefix + "/" + name, &t);
  for (const auto& [name, t] : p.momentum_buffers()) out.emplace_back(prefix + ".momentum/" + name, &t);
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const auto& s = ckpt.state;
  std::ostringstream body(std::ios::binary);
  write_u64(body, ckpt.master_seed);
  write_u64(body, s.iteration);
  write_u32(body, s.winner ? 1u : 0u);
  write_u64(body, s.winner.value_or(0));
  write_u32(body, s.ledger.policy() == ctf::ResetPolicy::reset ? 0u : 1u);
  write_u32(body, s.ledger.window_open() ? 1u : 0u);
  write_u64(body, s.ledger.window_start());
  write_u32(body, static_cast<std::uint32_t>(s.ledger.size()));
  for (double v : s.ledger.totals()) write_f64(body, v);
  write_u32(body, static_cast<std::uint32_t>(s.pairs.size()));
  std::vector<std::pair<std::string, const numerics::Tensor*>> tensors;
  for (std::size_t i = 0; i < s.pairs.size(); ++i) {
    const auto& p = s.pairs[i];
    write_u64(body, static_cast<std::uint64_t>(p.pair_id));
    write_u64(body, p.seed);
    write_u64(body, p.iteration);
    const std::string prefix = "pair" + std::to_string(i);
    collect(prefix + "/teacher", p.teacher, tensors);
    collect(prefix + "/student", p.student, tensors);
  }
  write_u32(body, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_string(body, name);
    write_tensor(body, *t);
  }
  const std::string payload = body.str();

  std::ostringstream out(std::ios::binary);
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kCheckpointVersion);
  write_u64(out, ckpt.config_hash);
  write_u64(out, payload.size());
  out << payload;
  write_u64(out, fnv1a(payload));
  return out.str();
}

Checkpoint decode_checkpoint(const std::string& bytes, const LoadOptions& opts) {
  if (bytes.size() < kHeaderSize) throw CheckpointError("truncated checkpoint: header incomplete");
  if (bytes.compare(0, sizeof(kMagic), std::string(kMagic, sizeof(kMagic))) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  std::istringstream head(bytes.substr(sizeof(kMagic), kHeaderSize - sizeof(kMagic)), std::ios::binary);
  const std::uint32_t version = read_u32(head);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.config_hash = read_u64(head);
  const std::uint64_t length = read_u64(head);
  if (bytes.size() - kHeaderSize < length + 8) throw CheckpointError("truncated checkpoint: payload incomplete");
  if (bytes.size() - kHeaderSize > length + 8) throw CheckpointError("trailing bytes after checkpoint");
  const std::string payload = bytes.substr(kHeaderSize, length);
  std::istringstream tail(bytes.substr(kHeaderSize + length), std::ios::binary);
  if (read_u64(tail) != fnv1a(payload)) throw CheckpointError("checkpoint checksum mismatch (corrupted file)");

  if (opts.expected_hash && *opts.expected_hash != ck.config_hash) {
    std::ostringstream msg;
    msg << "checkpoint was written with config hash " << std::hex << ck.config_hash << ", current config is "
        << *opts.expected_hash;
    if (!opts.allow_config_mismatch) throw CheckpointError(msg.str() + " (pass the override flag to load anyway)");
    if (opts.warn) opts.warn("warning: " + msg.str());
  }

  std::istringstream in(payload, std::ios::binary);
  auto& s = ck.state;
  ck.master_seed = read_u64(in);
  s.iteration = read_u64(in);
  const bool has_winner = read_u32(in) != 0;
  const std::uint64_t winner = read_u64(in);
  const auto policy = read_u32(in) == 0 ? ctf::ResetPolicy::reset : ctf::ResetPolicy::keep;
  const bool open = read_u32(in) != 0;
  const std::uint64_t window_start = read_u64(in);
  const std::uint32_t n = read_u32(in);
  if (n > 1024) throw CheckpointError("implausible ledger size");
  s.ledger = ctf::DpcoLedger(n, policy);
  for (auto& v : s.ledger.totals()) v = read_f64(in);
  s.ledger.restore_window(open, window_start);
  if (has_winner) {
    if (winner >= n) throw CheckpointError("winner index out of range");
    s.winner = static_cast<std::size_t>(winner);
  }
  const std::uint32_t pairs = read_u32(in);
  if (pairs != n) throw CheckpointError("ledger and pair counts differ");
  s.pairs.resize(pairs);
  for (auto& p : s.pairs) {
    p.pair_id = static_cast<int>(read_u64(in));
    p.seed = read_u64(in);
    p.iteration = read_u64(in);
  }
  const std::uint32_t count = read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(in);
    numerics::Tensor t = read_tensor(in);
    const auto slash = name.find('/');
    const auto second = name.find('/', slash + 1);
    if (name.rfind("pair", 0) != 0 || slash == std::string::npos || second == std::string::npos)
      throw CheckpointError("malformed tensor name '" + name + "'");
    const std::size_t idx = std::stoul(name.substr(4, slash - 4));
    if (idx >= pairs) throw CheckpointError("tensor '" + name + "' names a missing pair");
    const std::string role = name.substr(slash + 1, second - slash - 1);
    const std::string param = name.substr(second + 1);
    auto& p = s.pairs[idx];
    if (role == "teacher") p.teacher.set(param, std::move(t));
    else if (role == "student") p.student.set(param, std::move(t));
    else if (role == "teacher.momentum") p.teacher.set_momentum(param, std::move(t));
    else if (role == "student.momentum") p.student.set_momentum(param, std::move(t));
    else throw CheckpointError("unknown tensor role in '" + name + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("unread bytes in checkpoint payload");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::string bytes = encode_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const LoadOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str(), opts);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace ctflab::cli
