#include "json_util.hpp"

#include <fstream>
#include <sstream>

#include "prism/errors.hpp"

namespace prism::detail {

json parse_json(std::string_view text, std::string_view what) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const std::size_t offset = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    std::size_t line = 1;
    std::size_t line_start = 0;
    for (std::size_t i = 0; i < offset; ++i) {
      if (text[i] == '\n') {
        ++line;
        line_start = i + 1;
      }
    }
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    std::ostringstream msg;
    msg << what << ": invalid JSON at line " << line << ", column " << (offset - line_start + 1)
        << ": " << text.substr(line_start, std::min<std::size_t>(line_end - line_start, 120));
    throw ParseError(msg.str());
  }
}

const json& member(const json& j, std::string_view key, std::string_view path) {
  if (!j.is_object()) throw ParseError(std::string(path) + ": expected an object");
  const auto it = j.find(std::string(key));
  if (it == j.end()) throw ParseError(std::string(path) + ": missing field '" + std::string(key) + "'");
  return *it;
}

double get_number(const json& j, std::string_view key, std::string_view path) {
  const json& v = member(j, key, path);
  if (!v.is_number()) {
    throw ParseError(std::string(path) + "." + std::string(key) + ": expected a number");
  }
  return v.get<double>();
}

std::size_t get_count(const json& j, std::string_view key, std::string_view path) {
  const json& v = member(j, key, path);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    throw ParseError(std::string(path) + "." + std::string(key) + ": expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

std::string get_string(const json& j, std::string_view key, std::string_view path) {
  const json& v = member(j, key, path);
  if (!v.is_string()) {
    throw ParseError(std::string(path) + "." + std::string(key) + ": expected a string");
  }
  return v.get<std::string>();
}

bool get_bool(const json& j, std::string_view key, std::string_view path) {
  const json& v = member(j, key, path);
  if (!v.is_boolean()) {
    throw ParseError(std::string(path) + "." + std::string(key) + ": expected a boolean");
  }
  return v.get<bool>();
}

void check_schema(const json& j, int expected, std::string_view what) {
  const json& v = member(j, "schema", what);
  if (!v.is_number_integer()) throw ParseError(std::string(what) + ": schema must be an integer");
  if (v.get<long long>() != expected) {
    throw VersionError(std::string(what) + ": unsupported schema version " + v.dump() + " (expected " +
                       std::to_string(expected) + ")");
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path.string());
  return buf.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("cannot write " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot write " + path.string());
  }
}

}  // namespace prism::detail
