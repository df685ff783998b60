#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace kcal::cli {

// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

// SHA-256 of a file's exact contents.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace kcal::cli
