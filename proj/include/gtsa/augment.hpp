#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "gtsa/image.hpp"
#include "gtsa/rng.hpp"
#include "gtsa/types.hpp"

namespace gtsa {

struct AugmentConfig {
  int n_global = 2;
  int n_local = 4;
  int global_size = 64;
  int local_size = 32;
  int min_image = 32;  // reject smaller sources
  double global_area_min = 0.5, global_area_max = 1.0;
  double local_area_min = 0.05, local_area_max = 0.4;
  double jitter_strength = 0.5;
  double p_grayscale = 0.2;
  double p_blur_global = 0.5, p_blur_local = 0.1;
  double p_noise = 0.1;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
  double noise_sigma = 0.02;
  bool enable_photometric = true;  // off: all views carry identity photo params
  bool enable_rotation = true;     // off: rot_k fixed to 0
};

/// One emitted view: the finished float image (crop -> resize -> photometric
/// -> rotate already applied) plus its full provenance.
struct View {
  ImageF image;
  ViewParams params;
};

/// Globals first, then locals. Every view's crop intersects every global
/// crop with positive area.
struct ViewSet {
  std::vector<View> views;
  int n_global = 0;
  int n_local = 0;
};

/// Deterministic multi-crop sampler; the result is a pure function of
/// (image, cfg, seed), with all per-view randomness keyed on (seed, view
/// index) so views can be regenerated independently.
ViewSet sample_view_set(const ImageU8& image, const AugmentConfig& cfg, uint64_t seed);

/// Color jitter (brightness/contrast/saturation factors uniform in
/// 1 +- 0.4*strength, hue shift uniform in +-0.1*strength), optional
/// grayscale (luma 0.299/0.587/0.114), separable Gaussian blur (radius
/// ceil(3 sigma)), additive Gaussian noise; clamped to [0,1] at the end.
/// Identity params return the input bit-exactly.
ImageF apply_photometric(const ImageF& im, const PhotometricParams& p, uint64_t seed);

/// Bilinear crop + resize to a square, sharing the geometry module's
/// center-aligned border-clamped sampling convention.
ImageF crop_resize(const ImageF& im, const Rect& rect, int out_size);

/// Lossless k x 90-degree CCW pixel permutation; the same index rule as the
/// feature-map rotation. Odd k requires a square image.
ImageF rotate_image(const ImageF& im, RotIndex k);

namespace aug_detail {

/// Crop rect with area fraction uniform in [fmin, fmax] of W*H and aspect
/// log-uniform in [3/4, 4/3] (narrowed to what fits), placed uniformly.
Rect sample_area_rect(Rng& rng, double W, double H, double fmin, double fmax);

/// Local crop: rejection-sampled (<= 20 tries) until it overlaps every
/// global by >= 25% of its own area; on failure placed uniformly inside the
/// common intersection of all globals. Second element reports the fallback.
std::pair<Rect, bool> sample_local_rect(Rng& rng, double W, double H, const AugmentConfig& cfg,
                                        const std::vector<Rect>& globals);

}  // namespace aug_detail

}  // namespace gtsa
