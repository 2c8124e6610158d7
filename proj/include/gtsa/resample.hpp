#pragma once

#include "gtsa/image.hpp"
#include "gtsa/types.hpp"

namespace gtsa {

/// Bilinear resample of a source-space rect onto an out_w x out_h grid.
/// Output pixel (ox, oy) samples the source at
///   rect.x0 + (ox + 0.5) * rect.width() / out_w   (same for y),
/// with source values at pixel centers (i + 0.5, j + 0.5) and border clamp:
/// the one sampling convention shared with the feature-space pooling.
ImageF resample_rect(const ImageF& im, const Rect& rect, int out_w, int out_h);

/// Whole-image resize (rect = full bounds).
ImageF resize_bilinear(const ImageF& im, int out_w, int out_h);

}  // namespace gtsa
