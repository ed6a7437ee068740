#pragma once

#include <cstddef>
#include <filesystem>
#include <ostream>
#include <vector>

namespace dynseg::io {

void write_f32_le(std::ostream& os, const std::vector<float>& values);
void read_f32_le(const char* bytes, std::size_t count, std::vector<float>& out);

// Whole file contents; throws std::runtime_error naming the path when it
// cannot be opened.
std::vector<char> read_file(const std::filesystem::path& path);

}  // namespace dynseg::io
