#include "ctflab/binary_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>

#include "ctflab/error.hpp"

namespace ctflab::binary_io {

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw CheckpointError("truncated input");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_tensor(std::ostream& os, const numerics::Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u64(os, e);
  for (double v : t.values()) write_f64(os, v);
}

std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  if (n > (1u << 20)) throw CheckpointError("implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw CheckpointError("truncated input");
  return s;
}

numerics::Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = read_u32(is);
  if (rank > 8) throw CheckpointError("implausible tensor rank");
  numerics::Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    e = read_u64(is);
    if (e == 0 || e > (1u << 28)) throw CheckpointError("implausible tensor extent");
    count *= e;
    if (count > (1ull << 30)) throw CheckpointError("implausible tensor size");
  }
  std::vector<double> values(count);
  for (auto& v : values) v = read_f64(is);
  return numerics::Tensor(std::move(shape), std::move(values));
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text) {
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw Error("not a number: '" + text + "'");
  }
  return v;
}

}  // namespace ctflab::binary_io
