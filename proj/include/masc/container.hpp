#pragma once
// Checkpoint container: 8-byte magic, u32 header length, JSON header text,
// then raw little-endian float64 blocks in the order declared by the
// header's "blocks" array. All writers go through an atomic temp+rename.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "masc/array.hpp"

namespace masc {

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct NamedBlock {
  std::string name;
  const Array* array;
};

// header is augmented with "magic" and "blocks" (name + shape per block)
void write_container(const std::filesystem::path& path, const std::string& magic,
                     nlohmann::json header, const std::vector<NamedBlock>& blocks);

struct LoadedContainer {
  nlohmann::json header;
  std::vector<std::pair<std::string, Array>> blocks;

  const Array& block(const std::string& name) const;
};

LoadedContainer read_container(const std::filesystem::path& path,
                               const std::string& expected_magic);

// Writes content to path atomically (temp file in the same directory, then
// rename).
void atomic_write_file(const std::filesystem::path& path, const std::string& content);

}  // namespace masc
