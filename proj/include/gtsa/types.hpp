#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace gtsa {

/// Axis-aligned rectangle in continuous coordinates (pixels or feature
/// cells; the frame is stated at each use). Valid rects have positive area;
/// a degenerate intersection is reported as absent, never as a zero-area
/// rect.
struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }

  bool valid() const {
    return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) &&
           std::isfinite(y1) && x1 > x0 && y1 > y0;
  }
};

/// Counter-clockwise quarter-turn count; the one rotation convention shared
/// by images, feature maps, and rect corners.
struct RotIndex {
  int k = 0;

  RotIndex() = default;
  explicit RotIndex(int kk) : k(kk) {
    if (k < 0 || k > 3) throw std::invalid_argument("RotIndex: k must be in {0,1,2,3}");
  }

  RotIndex inverse() const { return RotIndex((4 - k) % 4); }
};

struct PhotometricParams {
  double jitter_strength = 0;  // scales brightness/contrast/saturation/hue deltas
  bool grayscale = false;
  double blur_sigma = 0;   // 0 disables
  double noise_sigma = 0;  // 0 disables

  bool is_identity() const {
    return jitter_strength == 0 && !grayscale && blur_sigma == 0 && noise_sigma == 0;
  }
};

enum class ViewKind { kGlobal, kLocal };

/// Full provenance of one augmented view. The recorded crop is always in
/// unrotated source coordinates; the pipeline order is fixed as
/// crop -> resize -> photometric -> rotate, so the emitted view image is a
/// pure function of (source image, this record).
struct ViewParams {
  ViewKind kind = ViewKind::kGlobal;
  Rect crop;           // source pixels
  int out_size = 0;    // square view side, pixels
  RotIndex rot;        // applied to the student copy only
  PhotometricParams photo;
  uint64_t seed = 0;   // stream for all per-view draws
};

/// Paired feature-space rectangles of a student/teacher overlap. The student
/// rect lives in the student view's post-rotation frame; rel_rot is the
/// student view's rotation (teacher views are never rotated).
struct OverlapRegion {
  Rect student_rect;
  Rect teacher_rect;
  RotIndex rel_rot;
  bool valid = false;
};

}  // namespace gtsa
