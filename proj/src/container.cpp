#include "est/container.hpp"

#include <string>

#include "est/binary_io.hpp"
#include "est/errors.hpp"

namespace est {

std::vector<unsigned char> encode_container(const Dataset& dataset) {
  io::ByteWriter w;
  w.bytes("ESTV");
  w.put<std::uint32_t>(kContainerVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.videos.size()));
  w.put<std::uint32_t>(dataset.num_classes);
  for (const auto& v : dataset.videos) {
    const auto& g = v.frames.geometry;
    if (v.frames.pixels.size() != v.frames.count * g.frame_size()) {
      throw ValidationError("video " + std::to_string(v.id) + " pixel count does not match its geometry");
    }
    if (v.label >= dataset.num_classes) {
      throw ValidationError("video " + std::to_string(v.id) + " label " + std::to_string(v.label) +
                            " out of range for " + std::to_string(dataset.num_classes) + " classes");
    }
    w.put<std::uint32_t>(v.label);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.frames.count));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.width));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.channels));
    w.put_array<float>(v.frames.pixels);
  }
  return std::move(w.buffer());
}

Dataset decode_container(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "ESTV") throw FormatError("bad dataset magic, expected \"ESTV\"", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version), version_at);
  }
  const auto num_videos = r.get<std::uint32_t>("video count");
  Dataset ds;
  ds.num_classes = r.get<std::uint32_t>("class count");
  ds.videos.reserve(std::min<std::uint32_t>(num_videos, 1u << 16));
  for (std::uint32_t i = 0; i < num_videos; ++i) {
    const std::string rec = "video record " + std::to_string(i);
    Video v;
    v.id = i;
    const std::size_t label_at = r.offset();
    v.label = r.get<std::uint32_t>(rec + " label");
    if (v.label >= ds.num_classes) {
      throw FormatError(rec + " label " + std::to_string(v.label) + " out of range for " +
                            std::to_string(ds.num_classes) + " classes",
                        label_at);
    }
    v.frames.count = r.get<std::uint32_t>(rec + " frame count");
    v.frames.geometry.height = r.get<std::uint32_t>(rec + " height");
    v.frames.geometry.width = r.get<std::uint32_t>(rec + " width");
    v.frames.geometry.channels = r.get<std::uint32_t>(rec + " channels");
    const std::size_t n = v.frames.count * v.frames.geometry.frame_size();
    r.require(n * sizeof(float), rec + " pixel payload");
    v.frames.pixels.resize(n);
    r.get_array<float>(v.frames.pixels, rec + " pixel payload");
    ds.videos.push_back(std::move(v));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last video record", r.offset());
  return ds;
}

void write_container(const Dataset& dataset, const std::filesystem::path& path) {
  io::write_file(path, encode_container(dataset));
}

Dataset read_container(const std::filesystem::path& path) { return decode_container(io::read_file(path)); }

}  // namespace est
