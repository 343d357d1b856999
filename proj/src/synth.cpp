#include "est/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "est/errors.hpp"
#include "est/rng.hpp"

namespace est {

ClassPattern class_pattern(std::uint32_t label, std::uint32_t num_classes) {
  if (label >= num_classes) throw ValidationError("class_pattern: label out of range");
  // Directions spread over a half circle so no two classes trace the same
  // path in opposite directions (which would make their snippet multisets
  // coincide when the ramp is also reversed).
  const std::uint32_t directions = (num_classes + 1) / 2;
  const double angle = std::numbers::pi * static_cast<double>(label / 2) / static_cast<double>(directions);
  return {std::cos(angle), std::sin(angle), label % 2 == 0};
}

Dataset synth_dataset(const SynthConfig& config) {
  if (config.num_classes == 0) throw ConfigError("synth: num_classes must be positive");
  if (config.frames < 2) throw ConfigError("synth: need at least 2 frames");
  const auto& g = config.geometry;
  if (g.height == 0 || g.width == 0 || g.channels == 0) throw ConfigError("synth: empty frame geometry");

  Dataset ds;
  ds.num_classes = config.num_classes;
  ds.videos.reserve(static_cast<std::size_t>(config.num_classes) * config.per_class);

  const double extent = static_cast<double>(std::min(g.height, g.width));
  const double sigma = config.blob_sigma * extent;
  const double radius = config.path_radius * extent;
  const double cy0 = 0.5 * static_cast<double>(g.height - 1);
  const double cx0 = 0.5 * static_cast<double>(g.width - 1);
  const double last = static_cast<double>(config.frames - 1);

  std::uint32_t id = 0;
  for (std::uint32_t label = 0; label < config.num_classes; ++label) {
    const ClassPattern pattern = class_pattern(label, config.num_classes);
    for (std::size_t k = 0; k < config.per_class; ++k, ++id) {
      Rng rng = Rng::derive(config.seed, Stream::kSynth, {id});
      const double cx = cx0 + rng.uniform(-1.0, 1.0) * config.jitter * extent;
      const double cy = cy0 + rng.uniform(-1.0, 1.0) * config.jitter * extent;
      const double gain = rng.uniform(0.85, 1.15);
      const double reach = radius * rng.uniform(0.85, 1.15);

      Video v;
      v.id = id;
      v.label = label;
      v.frames.geometry = g;
      v.frames.count = config.frames;
      v.frames.pixels.resize(config.frames * g.frame_size());
      for (std::size_t t = 0; t < config.frames; ++t) {
        const double progress = static_cast<double>(t) / last;  // 0 -> 1
        const double ramp = pattern.brightening ? progress : 1.0 - progress;
        const double amp = gain * (config.amplitude_low + (config.amplitude_high - config.amplitude_low) * ramp);
        const double along = (2.0 * progress - 1.0) * reach;
        const double bx = cx + along * pattern.direction_x;
        const double by = cy + along * pattern.direction_y;
        auto frame = v.frames.frame(t);
        for (std::size_t y = 0; y < g.height; ++y) {
          for (std::size_t x = 0; x < g.width; ++x) {
            const double dx = static_cast<double>(x) - bx;
            const double dy = static_cast<double>(y) - by;
            const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            for (std::size_t c = 0; c < g.channels; ++c) {
              double value = config.background + amp * blob;
              if (config.noise > 0.0) value += config.noise * rng.normal();
              frame[(y * g.width + x) * g.channels + c] = static_cast<float>(std::clamp(value, 0.0, 1.0));
            }
          }
        }
      }
      ds.videos.push_back(std::move(v));
    }
  }
  return ds;
}

}  // namespace est
