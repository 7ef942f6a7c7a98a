#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace r3l {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Container of named binary sections behind the "R3L1" magic.
///
///   magic "R3L1" | u32 version | string tag | u64 config digest | i64 epoch |
///   u32 section count | per section: string name, u64 size, bytes
///
/// Parameter sections use the tensorcore record layout (see write_params).
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::string tag;
  std::uint64_t config_digest = 0;
  std::int64_t epoch = 0;
  std::vector<std::pair<std::string, std::string>> sections;

  void add(std::string name, std::string bytes);
  bool has(const std::string& name) const;
  /// Throws CheckpointError when the section is missing.
  const std::string& section(const std::string& name) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace r3l
