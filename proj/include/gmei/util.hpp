#pragma once

#include <cstdint>
#include <string>

namespace gmei::util {

std::uint32_t crc32(const std::string& data);
std::uint64_t fnv1a64(const std::string& data);
std::string to_hex(std::uint64_t value, int width = 16);
std::string base64_encode(const std::string& data);
std::string base64_decode(const std::string& text);
std::string hex_dump(const std::string& bytes);  // "02 31 48 ..." for transcripts

std::int64_t now_ms();

}  // namespace gmei::util
