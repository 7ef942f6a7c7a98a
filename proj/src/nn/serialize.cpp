#include "r3l/nn/serialize.hpp"

#include <array>
#include <bit>
#include <stdexcept>

namespace r3l::nn {

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  os.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes{};
  if (!is.read(bytes.data(), bytes.size())) {
    throw std::runtime_error("unexpected end of binary stream");
  }
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return v;
}

constexpr std::uint32_t kMaxNameLength = 1u << 16;
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<std::uint32_t>(v)); }
void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<std::uint32_t>(is)); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  if (n > kMaxNameLength) throw std::runtime_error("string record too long");
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) throw std::runtime_error("unexpected end of binary stream");
  return s;
}

void write_params(std::ostream& os, const ParamSet& params) {
  write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    write_string(os, e.name);
    write_u32(os, static_cast<std::uint32_t>(e.tensor.shape.size()));
    for (auto d : e.tensor.shape) write_u32(os, d);
    for (Eigen::Index i = 0; i < e.tensor.values.size(); ++i) write_f32(os, e.tensor.values[i]);
  }
}

ParamSet read_params(std::istream& is) {
  ParamSet params;
  const std::uint32_t count = read_u32(is);
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = read_string(is);
    const std::uint32_t rank = read_u32(is);
    if (rank > kMaxRank) throw std::runtime_error("tensor rank too large for " + name);
    std::vector<std::uint32_t> shape(rank);
    for (auto& d : shape) d = read_u32(is);
    VectorF values(static_cast<Eigen::Index>(shape_product(shape)));
    for (Eigen::Index i = 0; i < values.size(); ++i) values[i] = read_f32(is);
    params.add(std::move(name), std::move(shape), std::move(values));
  }
  return params;
}

}  // namespace r3l::nn
