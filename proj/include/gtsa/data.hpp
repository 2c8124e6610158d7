#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gtsa/image.hpp"

namespace gtsa {

/// Ordered image collection; every entry is 8-bit RGB and exactly size x size
/// after standardization.
struct Dataset {
  std::vector<ImageU8> images;
  int size = 0;

  bool empty() const { return images.empty(); }
  size_t count() const { return images.size(); }
};

/// Procedural multi-object scene: a low-frequency value-noise background,
/// 5..12 colored primitives (rects, discs, bars), and a fixed top-to-bottom
/// luminance ramp so scenes carry an orientation cue. Crops from different
/// locations genuinely differ in content. Pure function of (seed, size).
ImageU8 synth_image(uint64_t seed, int size);

/// n synthetic scenes with per-image seeds derived from seed.
Dataset synth_dataset(uint64_t seed, int n, int size);

/// Loads every PNG/PPM in dir (lexicographic order), resizes so the short
/// side equals size, then center-crops to size x size. Errors name the
/// offending file; an empty directory is an error.
Dataset load_dataset(const std::string& dir, int size);

}  // namespace gtsa
