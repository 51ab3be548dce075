#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace medprompt::text {

std::vector<std::string> tokenize(std::string_view s);
std::string trim(std::string_view s);
// Trims and collapses internal whitespace runs to a single space.
std::string normalize_space(std::string_view s);
std::string to_lower(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
bool contains(std::string_view haystack, std::string_view needle);

// 64-bit FNV-1a. Used for toy-encoder hash buckets and config digests.
std::uint64_t fnv1a64(std::string_view s);
std::string hex64(std::uint64_t v);

}  // namespace medprompt::text
