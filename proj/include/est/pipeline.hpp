#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "est/rng.hpp"
#include "est/video.hpp"

namespace est {

// Snippet extraction constants. The defaults unify clips to 105 frames, take
// a 75-frame window starting in the first 30 frames, split it into 7
// sub-videos of 15 frames overlapping by 5, and keep 5 frames of each.
struct PipelineConfig {
  std::size_t target_frames = 105;
  std::size_t window = 75;
  std::size_t start_range = 30;
  std::size_t subvideo_len = 15;
  std::size_t overlap = 5;
  std::size_t snippets_per_video = 7;
  std::size_t frames_per_snippet = 5;

  std::size_t stride() const noexcept { return subvideo_len - overlap; }
  // Throws ConfigError when the constants are inconsistent.
  void validate() const;
};

// Resamples to `target` frames: uniform index subsampling when longer, linear
// interpolation in time when shorter, identity when equal.
Video unify_length(const Video& video, std::size_t target = 105);

// Frames [start, start + window) for a start drawn uniformly from
// [0, start_range).
Video sample_window(const Video& video, Rng& rng, const PipelineConfig& config = {});
Video window_at(const Video& video, std::size_t start, const PipelineConfig& config = {});

// Overlapping sub-videos; sub-video k covers window frames
// [k * stride, k * stride + subvideo_len).
std::vector<SubVideo> decompose(const Video& window, const PipelineConfig& config = {});

// J distinct frames drawn without replacement, kept in temporal order.
Snippet sample_snippet(const Video& subvideo, Rng& rng, std::size_t frames_per_snippet = 5);
Snippet take_snippet(const Video& subvideo, std::span<const std::size_t> indices);

// unify -> window -> decompose -> one snippet per sub-video, natural order.
SnippetSet build_snippet_set(const Video& video, Rng& rng, const PipelineConfig& config = {});

}  // namespace est
