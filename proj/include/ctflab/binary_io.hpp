#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "ctflab/numerics/tensor.hpp"

// Little-endian primitive encoding shared by checkpoints and dataset export.
namespace ctflab::binary_io {

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);  // u32 length + bytes
// u32 rank, u64 extents, then f64 values.
void write_tensor(std::ostream& os, const numerics::Tensor& t);

// Readers throw CheckpointError on truncated input.
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);
numerics::Tensor read_tensor(std::istream& is);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(const std::string& text);

}  // namespace ctflab::binary_io
