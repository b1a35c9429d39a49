#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

namespace prism::detail {

using nlohmann::json;

/// Parses `text`; syntax errors become ParseError naming `what`, the line,
/// column and offending line.
json parse_json(std::string_view text, std::string_view what);

/// Member `key` of object `j`, or ParseError naming `path`.
const json& member(const json& j, std::string_view key, std::string_view path);
double get_number(const json& j, std::string_view key, std::string_view path);
std::size_t get_count(const json& j, std::string_view key, std::string_view path);
std::string get_string(const json& j, std::string_view key, std::string_view path);
bool get_bool(const json& j, std::string_view key, std::string_view path);

/// Checks `schema` and raises VersionError on mismatch.
void check_schema(const json& j, int expected, std::string_view what);

std::string read_text(const std::filesystem::path& path);
/// Writes via a temporary file in the same directory, then renames.
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace prism::detail
