#include "gtsa/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "gtsa/image_io.hpp"
#include "gtsa/resample.hpp"
#include "gtsa/rng.hpp"

namespace gtsa {

namespace {

float smoothstep(float t) { return t * t * (3.f - 2.f * t); }

// Coarse random RGB lattice, smoothly interpolated: the scene background.
void value_noise_background(ImageF& im, Rng& rng) {
  const int g = 5;  // lattice cells per side
  std::vector<float> lattice((g + 1) * (g + 1) * 3);
  for (float& v : lattice) v = static_cast<float>(rng.uniform(0.15, 0.85));
  for (int y = 0; y < im.h; ++y) {
    float fy = static_cast<float>(y) / im.h * g;
    int cy = std::min(static_cast<int>(fy), g - 1);
    float ty = smoothstep(fy - cy);
    for (int x = 0; x < im.w; ++x) {
      float fx = static_cast<float>(x) / im.w * g;
      int cx = std::min(static_cast<int>(fx), g - 1);
      float tx = smoothstep(fx - cx);
      float* o = im.px(x, y);
      for (int c = 0; c < 3; ++c) {
        float v00 = lattice[(cy * (g + 1) + cx) * 3 + c];
        float v01 = lattice[(cy * (g + 1) + cx + 1) * 3 + c];
        float v10 = lattice[((cy + 1) * (g + 1) + cx) * 3 + c];
        float v11 = lattice[((cy + 1) * (g + 1) + cx + 1) * 3 + c];
        o[c] = (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
      }
    }
  }
}

void fill_rect(ImageF& im, double x0, double y0, double x1, double y1, const float col[3]) {
  int ix0 = std::max(0, static_cast<int>(std::floor(x0)));
  int iy0 = std::max(0, static_cast<int>(std::floor(y0)));
  int ix1 = std::min(im.w, static_cast<int>(std::ceil(x1)));
  int iy1 = std::min(im.h, static_cast<int>(std::ceil(y1)));
  for (int y = iy0; y < iy1; ++y)
    for (int x = ix0; x < ix1; ++x) {
      float* o = im.px(x, y);
      o[0] = col[0]; o[1] = col[1]; o[2] = col[2];
    }
}

void fill_disc(ImageF& im, double cx, double cy, double r, const float col[3]) {
  int ix0 = std::max(0, static_cast<int>(std::floor(cx - r)));
  int iy0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  int ix1 = std::min(im.w, static_cast<int>(std::ceil(cx + r)));
  int iy1 = std::min(im.h, static_cast<int>(std::ceil(cy + r)));
  for (int y = iy0; y < iy1; ++y)
    for (int x = ix0; x < ix1; ++x) {
      double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r) {
        float* o = im.px(x, y);
        o[0] = col[0]; o[1] = col[1]; o[2] = col[2];
      }
    }
}

}  // namespace

ImageU8 synth_image(uint64_t seed, int size) {
  if (size < 32) throw std::invalid_argument("synth_image: size must be >= 32");
  Rng rng(hash_mix(seed, 0x5c3a9ed1u));
  ImageF im(size, size);
  value_noise_background(im, rng);

  int n_shapes = 5 + static_cast<int>(rng.below(8));  // 5..12
  for (int s = 0; s < n_shapes; ++s) {
    float col[3] = {static_cast<float>(rng.uniform(0.05, 0.95)),
                    static_cast<float>(rng.uniform(0.05, 0.95)),
                    static_cast<float>(rng.uniform(0.05, 0.95))};
    double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
    switch (rng.below(3)) {
      case 0: {  // rect
        double hw = rng.uniform(0.05, 0.16) * size, hh = rng.uniform(0.05, 0.16) * size;
        fill_rect(im, cx - hw, cy - hh, cx + hw, cy + hh, col);
        break;
      }
      case 1: {  // disc
        double r = rng.uniform(0.04, 0.14) * size;
        fill_disc(im, cx, cy, r, col);
        break;
      }
      default: {  // bar, axis-aligned
        double half_long = rng.uniform(0.12, 0.3) * size;
        double half_short = rng.uniform(0.015, 0.04) * size;
        if (rng.below(2))
          fill_rect(im, cx - half_long, cy - half_short, cx + half_long, cy + half_short, col);
        else
          fill_rect(im, cx - half_short, cy - half_long, cx + half_short, cy + half_long, col);
        break;
      }
    }
  }

  // Global top-to-bottom luminance ramp: every crop of every scene carries
  // the same orientation cue, which is what makes rotation predictable from
  // content at all.
  for (int y = 0; y < size; ++y) {
    float ramp = 1.3f - 0.6f * static_cast<float>(y) / (size - 1);
    float* row = im.px(0, y);
    for (int i = 0; i < im.w * 3; ++i) row[i] *= ramp;
  }
  return to_u8(im);
}

Dataset synth_dataset(uint64_t seed, int n, int size) {
  if (n <= 0) throw std::invalid_argument("synth_dataset: n must be positive");
  Dataset ds;
  ds.size = size;
  ds.images.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    ds.images.push_back(synth_image(hash_mix(seed, 0xda7a5e7u, static_cast<uint64_t>(i)), size));
  return ds;
}

Dataset load_dataset(const std::string& dir, int size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("load_dataset: not a directory: " + dir);
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw std::runtime_error("load_dataset: no files in " + dir);

  Dataset ds;
  ds.size = size;
  for (const std::string& p : paths) {
    ImageU8 raw = read_image(p);
    ImageF f = to_float(raw);
    // Short side -> size, then center crop to square.
    int ow, oh;
    if (raw.w <= raw.h) {
      ow = size;
      oh = std::max(size, static_cast<int>(std::lround(double(raw.h) * size / raw.w)));
    } else {
      oh = size;
      ow = std::max(size, static_cast<int>(std::lround(double(raw.w) * size / raw.h)));
    }
    ImageF r = resize_bilinear(f, ow, oh);
    double x0 = (ow - size) / 2.0, y0 = (oh - size) / 2.0;
    ImageF sq = resample_rect(r, Rect{x0, y0, x0 + size, y0 + size}, size, size);
    ds.images.push_back(to_u8(sq));
  }
  return ds;
}

}  // namespace gtsa
