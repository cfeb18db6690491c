#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace optrisk {

std::string sha256_hex(std::string_view data);

// Writes via a sibling temp file and rename so readers never see partial output.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

std::vector<std::string> split(std::string_view line, char sep);
std::string trim(std::string_view s);
double parse_double(std::string_view s);
long parse_long(std::string_view s);

// Shortest round-trip representation, stable across runs.
std::string format_double(double x);

}  // namespace optrisk
