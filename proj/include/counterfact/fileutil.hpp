#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace cfx {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

}  // namespace cfx
