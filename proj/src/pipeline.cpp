#include "est/pipeline.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "est/errors.hpp"

namespace est {

namespace {

FrameStack gather(const FrameStack& src, std::span<const std::size_t> indices) {
  FrameStack out;
  out.geometry = src.geometry;
  out.count = indices.size();
  const std::size_t fs = src.geometry.frame_size();
  out.pixels.resize(out.count * fs);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto f = src.frame(indices[i]);
    std::copy(f.begin(), f.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(i * fs));
  }
  return out;
}

Video with_frames(const Video& like, FrameStack frames) {
  Video v;
  v.id = like.id;
  v.label = like.label;
  v.frames = std::move(frames);
  return v;
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t count) {
  std::vector<std::size_t> out(count);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

}  // namespace

void PipelineConfig::validate() const {
  if (overlap >= subvideo_len) throw ConfigError("overlap must be smaller than subvideo_len");
  if (snippets_per_video == 0 || frames_per_snippet == 0) throw ConfigError("snippet counts must be positive");
  if (frames_per_snippet > subvideo_len) throw ConfigError("frames_per_snippet exceeds subvideo_len");
  if ((snippets_per_video - 1) * stride() + subvideo_len != window) {
    throw ConfigError("sub-videos do not tile the window: (" + std::to_string(snippets_per_video) + " - 1) * " +
                      std::to_string(stride()) + " + " + std::to_string(subvideo_len) +
                      " != " + std::to_string(window));
  }
  if (start_range == 0 || start_range - 1 + window > target_frames) {
    throw ConfigError("window of " + std::to_string(window) + " starting below " + std::to_string(start_range) +
                      " does not fit in " + std::to_string(target_frames) + " frames");
  }
}

Video unify_length(const Video& video, std::size_t target) {
  const std::size_t t = video.length();
  if (t < 2) throw ValidationError("unify_length: need at least 2 frames, got " + std::to_string(t));
  if (target < 2) throw ValidationError("unify_length: target must be at least 2 frames");
  if (t == target) return video;

  if (t > target) {
    // round(k * (t - 1) / (target - 1)), half rounded up, in integer arithmetic.
    std::vector<std::size_t> idx(target);
    const std::size_t num = t - 1, den = target - 1;
    for (std::size_t k = 0; k < target; ++k) idx[k] = (2 * k * num + den) / (2 * den);
    return with_frames(video, gather(video.frames, idx));
  }

  FrameStack out;
  out.geometry = video.frames.geometry;
  out.count = target;
  const std::size_t fs = out.geometry.frame_size();
  out.pixels.resize(target * fs);
  for (std::size_t k = 0; k < target; ++k) {
    const double pos = static_cast<double>(k) * static_cast<double>(t - 1) / static_cast<double>(target - 1);
    const std::size_t lo = std::min(static_cast<std::size_t>(pos), t - 1);
    const std::size_t hi = std::min(lo + 1, t - 1);
    const double frac = pos - static_cast<double>(lo);
    auto a = video.frames.frame(lo);
    auto b = video.frames.frame(hi);
    auto dst = out.frame(k);
    for (std::size_t i = 0; i < fs; ++i) {
      dst[i] = frac == 0.0 ? a[i] : static_cast<float>((1.0 - frac) * a[i] + frac * b[i]);
    }
  }
  return with_frames(video, std::move(out));
}

Video window_at(const Video& video, std::size_t start, const PipelineConfig& config) {
  if (video.length() != config.target_frames) {
    throw ValidationError("sample_window: expected " + std::to_string(config.target_frames) + " frames, got " +
                          std::to_string(video.length()));
  }
  if (start >= config.start_range || start + config.window > video.length()) {
    throw ValidationError("sample_window: start " + std::to_string(start) + " out of range");
  }
  return with_frames(video, gather(video.frames, iota(start, config.window)));
}

Video sample_window(const Video& video, Rng& rng, const PipelineConfig& config) {
  if (video.length() != config.target_frames) {
    throw ValidationError("sample_window: expected " + std::to_string(config.target_frames) + " frames, got " +
                          std::to_string(video.length()));
  }
  return window_at(video, rng.uniform_index(config.start_range), config);
}

std::vector<SubVideo> decompose(const Video& window, const PipelineConfig& config) {
  if (window.length() != config.window) {
    throw ValidationError("decompose: expected " + std::to_string(config.window) + " frames, got " +
                          std::to_string(window.length()));
  }
  std::vector<SubVideo> out;
  out.reserve(config.snippets_per_video);
  for (std::size_t k = 0; k < config.snippets_per_video; ++k) {
    const std::size_t offset = k * config.stride();
    out.push_back({with_frames(window, gather(window.frames, iota(offset, config.subvideo_len))), offset});
  }
  return out;
}

Snippet take_snippet(const Video& subvideo, std::span<const std::size_t> indices) {
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= subvideo.length()) {
      throw ValidationError("take_snippet: index " + std::to_string(indices[i]) + " out of range");
    }
    if (i > 0 && indices[i] <= indices[i - 1]) throw ValidationError("take_snippet: indices not strictly increasing");
  }
  Snippet s;
  s.frames = gather(subvideo.frames, indices);
  s.source_indices.assign(indices.begin(), indices.end());
  return s;
}

Snippet sample_snippet(const Video& subvideo, Rng& rng, std::size_t frames_per_snippet) {
  const std::size_t n = subvideo.length();
  if (frames_per_snippet > n) {
    throw ValidationError("sample_snippet: cannot draw " + std::to_string(frames_per_snippet) + " of " +
                          std::to_string(n) + " frames");
  }
  // Partial Fisher-Yates: the first J slots become a uniform J-subset.
  std::vector<std::size_t> pool = iota(0, n);
  for (std::size_t i = 0; i < frames_per_snippet; ++i) {
    std::swap(pool[i], pool[i + rng.uniform_index(n - i)]);
  }
  pool.resize(frames_per_snippet);
  std::sort(pool.begin(), pool.end());
  return take_snippet(subvideo, pool);
}

SnippetSet build_snippet_set(const Video& video, Rng& rng, const PipelineConfig& config) {
  config.validate();
  const Video unified = unify_length(video, config.target_frames);
  const Video window = sample_window(unified, rng, config);
  SnippetSet set;
  set.video_id = video.id;
  set.label = video.label;
  for (const auto& sub : decompose(window, config)) {
    set.snippets.push_back(sample_snippet(sub.video, rng, config.frames_per_snippet));
  }
  return set;
}

}  // namespace est
