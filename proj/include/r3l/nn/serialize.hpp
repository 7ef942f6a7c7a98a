#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "r3l/nn/param_set.hpp"

namespace r3l::nn {

// Little-endian primitives shared by every binary format in the project.
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);

std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);

/// Parameter section: a u32 record count followed by one record per tensor,
/// (name length, name bytes, rank, dims as u32, values as f32), all
/// little-endian.
void write_params(std::ostream& os, const ParamSet& params);
ParamSet read_params(std::istream& is);

}  // namespace r3l::nn
