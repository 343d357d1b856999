#pragma once

#include <cstddef>
#include <cstdint>

#include "est/video.hpp"

namespace est {

// Synthetic stand-in for facial-expression clips. Each class is a faint
// Gaussian blob drifting across the frame; the drift direction and whether
// the blob brightens or fades over time together define the class.
// Classes 2k and 2k+1 share a direction and differ only in ramp sign.
struct SynthConfig {
  std::uint32_t num_classes = 7;
  std::size_t per_class = 100;
  FrameGeometry geometry{32, 32, 1};
  std::size_t frames = 105;
  double background = 0.5;
  double amplitude_low = 0.05;
  double amplitude_high = 0.20;
  double blob_sigma = 0.10;   // fraction of min(H, W)
  double path_radius = 0.20;  // half path length, fraction of min(H, W)
  double jitter = 0.05;       // per-video center offset, fraction of min(H, W)
  double noise = 0.03;        // i.i.d. Gaussian pixel noise
  std::uint64_t seed = 0;
};

struct ClassPattern {
  double direction_x = 0.0;
  double direction_y = 0.0;
  bool brightening = true;
};

ClassPattern class_pattern(std::uint32_t label, std::uint32_t num_classes);

// Videos are emitted class-major (all of class 0, then class 1, ...) with ids
// equal to their position. Deterministic in config.
Dataset synth_dataset(const SynthConfig& config);

}  // namespace est
