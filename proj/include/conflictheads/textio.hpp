#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace conflictheads {

// Shortest round-trip decimal form of a double (std::to_chars). Parsing the
// result with parse_double recovers the exact bit pattern, which the
// structured-text artifact formats rely on.
std::string format_double(double value);

double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split_string(std::string_view text, char delim);
std::string trim(std::string_view text);

// FNV-1a over bytes, printed as 16 hex chars. Used to stamp artifacts with
// the hash of the exact configuration that produced them.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_hex(std::string_view bytes);

std::string read_text_file(const std::string& path);
// Creates missing parent directories, then writes the whole file.
void write_text_file(const std::string& path, std::string_view content);
void ensure_parent_dir(const std::string& path);

}  // namespace conflictheads
