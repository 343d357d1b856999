#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace est {

struct FrameGeometry {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;

  std::size_t frame_size() const noexcept { return height * width * channels; }
  friend bool operator==(const FrameGeometry&, const FrameGeometry&) = default;
};

// T frames of H x W x C float intensities, stored frame-major (T, H, W, C).
struct FrameStack {
  FrameGeometry geometry;
  std::size_t count = 0;
  std::vector<float> pixels;

  std::span<const float> frame(std::size_t t) const {
    return std::span<const float>(pixels).subspan(t * geometry.frame_size(), geometry.frame_size());
  }
  std::span<float> frame(std::size_t t) {
    return std::span<float>(pixels).subspan(t * geometry.frame_size(), geometry.frame_size());
  }
  friend bool operator==(const FrameStack&, const FrameStack&) = default;
};

struct Video {
  std::uint32_t id = 0;
  std::uint32_t label = 0;
  FrameStack frames;

  std::size_t length() const noexcept { return frames.count; }
  friend bool operator==(const Video&, const Video&) = default;
};

// A window-relative sub-video: frames [offset, offset + length) of the window.
struct SubVideo {
  Video video;
  std::size_t offset = 0;
};

struct Snippet {
  FrameStack frames;
  // Strictly increasing positions inside the parent sub-video.
  std::vector<std::size_t> source_indices;
  friend bool operator==(const Snippet&, const Snippet&) = default;
};

struct SnippetSet {
  std::uint32_t video_id = 0;
  std::uint32_t label = 0;
  std::vector<Snippet> snippets;
  // Index into the permutation table, or empty for the natural order.
  std::optional<std::size_t> order_label;
  friend bool operator==(const SnippetSet&, const SnippetSet&) = default;
};

struct Dataset {
  std::uint32_t num_classes = 0;
  std::vector<Video> videos;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

}  // namespace est
