#pragma once

#include <optional>

#include "gtsa/tensor.hpp"
#include "gtsa/types.hpp"

namespace gtsa {

/// Feature maps are (B, D, h, w) row-major throughout; h*w > 0, D > 0, all
/// entries finite.
template <typename T>
using FeatureMapT = TensorT<T>;

/// Axis-aligned intersection; absent when the interiors are disjoint
/// (touching edges have zero area and count as disjoint).
std::optional<Rect> intersect(const Rect& a, const Rect& b);

/// Maps a source-space rect into a view's pixel frame: translate by the crop
/// origin, scale per axis by out_size/crop_size, then carry the corners
/// through the view's CCW rotation ((x,y) -> (y, S-x) per quarter turn,
/// S = out_size) and re-normalize to min/max corner form. The rect must
/// intersect the view's crop.
Rect source_to_view(const Rect& r, const ViewParams& view);

/// Divides all coordinates by the patch size (pixels per feature cell);
/// fractional results are legal.
Rect view_to_feature(const Rect& r, double patch);

/// Region pooling operator. Divides rect into out_h x out_w equal cells and
/// samples each cell at its center by bilinear interpolation, with stored
/// values located at cell centers (i+0.5, j+0.5) and out-of-bounds samples
/// clamped to the border. The same rect is applied to every batch item.
template <typename T>
FeatureMapT<T> roi_align(const FeatureMapT<T>& map, const Rect& rect, int out_h, int out_w);

/// Rotation operator: element (r, c) moves to (w-1-c, r), applied k times.
/// Odd k requires a square map.
template <typename T>
FeatureMapT<T> rotate_map(const FeatureMapT<T>& map, RotIndex k);

/// Composes intersect -> source_to_view -> view_to_feature for both views.
/// The teacher view must be unrotated; rel_rot is taken from the student
/// view. Returns valid=false when the source-space intersection is absent.
OverlapRegion overlap_region(const ViewParams& sview, const ViewParams& tview,
                             double patch_s, double patch_t);

// Kernel pieces shared with the autodiff ops.
namespace detail {

/// One bilinear sample of channel plane (h, w) at continuous (x, y) with
/// border clamping; plane points at the (b, d) slice of a (B, D, h, w) map.
template <typename T>
T bilinear_at(const T* plane, int64_t h, int64_t w, double x, double y);

/// Sample-point stencil: indices and weights of the four neighbors.
struct BilinearTaps {
  int64_t i0, i1, j0, j1;  // rows i, cols j
  double w00, w01, w10, w11;
};
BilinearTaps bilinear_taps(int64_t h, int64_t w, double x, double y);

/// Destination of (r, c) under k CCW quarter turns of an (h, w) grid.
inline void rotate_index(int k, int64_t h, int64_t w, int64_t r, int64_t c,
                         int64_t* ro, int64_t* co) {
  switch (k & 3) {
    case 0: *ro = r; *co = c; break;
    case 1: *ro = w - 1 - c; *co = r; break;
    case 2: *ro = h - 1 - r; *co = w - 1 - c; break;
    default: *ro = c; *co = h - 1 - r; break;
  }
}

}  // namespace detail

}  // namespace gtsa
