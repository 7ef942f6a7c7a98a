#include "r3l/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>

#include "r3l/nn/serialize.hpp"

namespace r3l {

namespace {
constexpr char kMagic[4] = {'R', '3', 'L', '1'};
constexpr std::uint64_t kMaxSection = std::uint64_t{1} << 40;
}  // namespace

void Checkpoint::add(std::string name, std::string bytes) {
  if (has(name)) throw CheckpointError("duplicate checkpoint section " + name);
  sections.emplace_back(std::move(name), std::move(bytes));
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(sections.begin(), sections.end(), [&](const auto& s) { return s.first == name; });
}

const std::string& Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections)
    if (s.first == name) return s.second;
  throw CheckpointError("checkpoint has no section " + name);
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write(kMagic, 4);
  nn::write_u32(os, ckpt.version);
  nn::write_string(os, ckpt.tag);
  nn::write_u64(os, ckpt.config_digest);
  nn::write_u64(os, static_cast<std::uint64_t>(ckpt.epoch));
  nn::write_u32(os, static_cast<std::uint32_t>(ckpt.sections.size()));
  for (const auto& [name, bytes] : ckpt.sections) {
    nn::write_string(os, name);
    nn::write_u64(os, bytes.size());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!os) throw CheckpointError("failed to write checkpoint");
}

Checkpoint read_checkpoint(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) throw CheckpointError("not an R3L1 checkpoint");
  try {
    Checkpoint c;
    c.version = nn::read_u32(is);
    if (c.version != Checkpoint::kVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version));
    c.tag = nn::read_string(is);
    c.config_digest = nn::read_u64(is);
    c.epoch = static_cast<std::int64_t>(nn::read_u64(is));
    const std::uint32_t n = nn::read_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = nn::read_string(is);
      const std::uint64_t size = nn::read_u64(is);
      if (size > kMaxSection) throw CheckpointError("checkpoint section too large: " + name);
      std::string bytes(size, '\0');
      if (size > 0 && !is.read(bytes.data(), static_cast<std::streamsize>(size)))
        throw CheckpointError("truncated checkpoint section " + name);
      c.add(std::move(name), std::move(bytes));
    }
    return c;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, ckpt);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace r3l
