#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace entmeta {

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace entmeta
