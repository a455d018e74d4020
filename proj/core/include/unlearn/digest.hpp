#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace unlearn {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// Writes `content` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace unlearn
