#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gtsa {

/// Interleaved 8-bit RGB, row-major.
struct ImageU8 {
  int w = 0, h = 0;
  std::vector<uint8_t> rgb;  // h * w * 3

  ImageU8() = default;
  ImageU8(int width, int height) : w(width), h(height), rgb(static_cast<size_t>(width) * height * 3, 0) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("ImageU8: bad dims");
  }

  uint8_t* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
  const uint8_t* px(int x, int y) const { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
};

/// Interleaved float RGB in [0,1] working format for the augment pipeline.
struct ImageF {
  int w = 0, h = 0;
  std::vector<float> rgb;  // h * w * 3

  ImageF() = default;
  ImageF(int width, int height) : w(width), h(height), rgb(static_cast<size_t>(width) * height * 3, 0.f) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("ImageF: bad dims");
  }

  float* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
  const float* px(int x, int y) const { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
};

inline ImageF to_float(const ImageU8& im) {
  ImageF out(im.w, im.h);
  for (size_t i = 0; i < im.rgb.size(); ++i) out.rgb[i] = im.rgb[i] * (1.0f / 255.0f);
  return out;
}

inline ImageU8 to_u8(const ImageF& im) {
  ImageU8 out(im.w, im.h);
  for (size_t i = 0; i < im.rgb.size(); ++i) {
    float v = im.rgb[i];
    v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    out.rgb[i] = static_cast<uint8_t>(v * 255.0f + 0.5f);
  }
  return out;
}

}  // namespace gtsa
