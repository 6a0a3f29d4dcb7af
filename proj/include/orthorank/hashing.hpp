#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace orthorank {

std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

// Hash of a token sequence serialized as little-endian int32.
std::string sha256_tokens(std::span<const int32_t> tokens);

}  // namespace orthorank
