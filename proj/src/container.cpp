#include "masc/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "container i/o assumes a little-endian host");

namespace masc {
namespace {

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  return path.parent_path() / (path.filename().string() + ".tmp");
}

}  // namespace

void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_container(const std::filesystem::path& path, const std::string& magic,
                     nlohmann::json header, const std::vector<NamedBlock>& blocks) {
  if (magic.size() != 8) throw FormatError("container magic must be 8 bytes");
  nlohmann::json block_list = nlohmann::json::array();
  for (const auto& b : blocks) {
    block_list.push_back({{"name", b.name}, {"shape", b.array->shape()}});
  }
  header["magic"] = magic;
  header["blocks"] = block_list;
  const std::string header_text = header.dump();

  std::ostringstream os(std::ios::binary);
  os.write(magic.data(), 8);
  const std::uint32_t len = static_cast<std::uint32_t>(header_text.size());
  os.write(reinterpret_cast<const char*>(&len), 4);
  os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& b : blocks) {
    os.write(reinterpret_cast<const char*>(b.array->data()),
             static_cast<std::streamsize>(b.array->size() * sizeof(double)));
  }
  atomic_write_file(path, os.str());
}

const Array& LoadedContainer::block(const std::string& name) const {
  for (const auto& [n, a] : blocks) {
    if (n == name) return a;
  }
  throw FormatError("container has no block named '" + name + "'");
}

LoadedContainer read_container(const std::filesystem::path& path,
                               const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  char magic[8];
  if (!in.read(magic, 8)) throw FormatError("truncated file at offset 0 (magic)");
  if (std::string(magic, 8) != expected_magic) {
    throw FormatError("bad magic in " + path.string() + ": expected " +
                      expected_magic);
  }
  std::uint32_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), 4)) {
    throw FormatError("truncated file at offset 8 (header length)");
  }
  std::string header_text(len, '\0');
  if (!in.read(header_text.data(), len)) {
    throw FormatError("truncated file at offset 12 (header)");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid container header JSON: " + std::string(e.what()));
  }
  if (!header.contains("blocks") || !header["blocks"].is_array()) {
    throw FormatError("container header missing blocks array");
  }

  LoadedContainer result;
  for (const auto& desc : header["blocks"]) {
    const std::string name = desc.at("name").get<std::string>();
    const Shape shape = desc.at("shape").get<Shape>();
    Array a(shape);
    const std::streamsize bytes =
        static_cast<std::streamsize>(a.size() * sizeof(double));
    if (!in.read(reinterpret_cast<char*>(a.data()), bytes)) {
      throw FormatError("truncated block '" + name + "' at offset " +
                        std::to_string(static_cast<long long>(in.tellg())));
    }
    result.blocks.emplace_back(name, std::move(a));
  }
  result.header = std::move(header);
  return result;
}

}  // namespace masc
