#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "est/video.hpp"

namespace est {

// ESTV layout, all little-endian:
//   "ESTV" | u32 version | u32 num_videos | u32 num_classes
//   per video: u32 label | u32 T | u32 H | u32 W | u32 C | T*H*W*C float32
// Video ids are assigned from record order on read.
inline constexpr std::uint32_t kContainerVersion = 1;

std::vector<unsigned char> encode_container(const Dataset& dataset);
// Throws FormatError carrying the byte offset of the first bad field.
Dataset decode_container(std::span<const unsigned char> bytes);

void write_container(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_container(const std::filesystem::path& path);

}  // namespace est
