#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace zscore {

/// Loads a .json or .toml file into a JSON document. TOML tables become
/// objects, arrays stay arrays, and scalars keep their types.
nlohmann::json load_config_document(const std::filesystem::path& path);

nlohmann::json parse_toml_document(const std::string& text);

std::string read_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and rename, so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

/// Lowercase hex SHA-256 of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);

}  // namespace zscore
