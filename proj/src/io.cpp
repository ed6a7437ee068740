#include "dynseg/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace dynseg::io {

void write_f32_le(std::ostream& os, const std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      char b[4] = {char(bits), char(bits >> 8), char(bits >> 16), char(bits >> 24)};
      os.write(b, 4);
    }
  }
}

void read_f32_le(const char* bytes, std::size_t count, std::vector<float>& out) {
  out.resize(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), bytes, count * sizeof(float));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const auto* b = reinterpret_cast<const unsigned char*>(bytes + 4 * i);
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t(b[3]) << 24);
      out[i] = std::bit_cast<float>(bits);
    }
  }
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace dynseg::io
