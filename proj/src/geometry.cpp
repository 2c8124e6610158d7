#include "gtsa/geometry.hpp"

#include <algorithm>

namespace gtsa {

std::optional<Rect> intersect(const Rect& a, const Rect& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("intersect: invalid rect");
  Rect r{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
         std::min(a.y1, b.y1)};
  if (r.x1 <= r.x0 || r.y1 <= r.y0) return std::nullopt;
  return r;
}

Rect source_to_view(const Rect& r, const ViewParams& view) {
  if (!r.valid()) throw std::invalid_argument("source_to_view: invalid rect");
  if (!intersect(r, view.crop)) throw std::invalid_argument("source_to_view: rect does not intersect the crop");
  const double sx = view.out_size / view.crop.width();
  const double sy = view.out_size / view.crop.height();
  double x0 = (r.x0 - view.crop.x0) * sx, x1 = (r.x1 - view.crop.x0) * sx;
  double y0 = (r.y0 - view.crop.y0) * sy, y1 = (r.y1 - view.crop.y0) * sy;
  const double s = view.out_size;
  for (int t = 0; t < view.rot.k; ++t) {
    // (x,y) -> (y, S-x) on all four corners, re-normalized to min/max form.
    double nx0 = y0, nx1 = y1, ny0 = s - x1, ny1 = s - x0;
    x0 = nx0; x1 = nx1; y0 = ny0; y1 = ny1;
  }
  return Rect{x0, y0, x1, y1};
}

Rect view_to_feature(const Rect& r, double patch) {
  if (patch <= 0) throw std::invalid_argument("view_to_feature: patch must be positive");
  return Rect{r.x0 / patch, r.y0 / patch, r.x1 / patch, r.y1 / patch};
}

namespace detail {

BilinearTaps bilinear_taps(int64_t h, int64_t w, double x, double y) {
  // Stored values sit at cell centers; clamp the stencil at the border.
  double u = x - 0.5, v = y - 0.5;
  double uf = std::floor(u), vf = std::floor(v);
  double fu = u - uf, fv = v - vf;
  int64_t j0 = static_cast<int64_t>(uf), i0 = static_cast<int64_t>(vf);
  int64_t j1 = j0 + 1, i1 = i0 + 1;
  j0 = std::clamp<int64_t>(j0, 0, w - 1);
  j1 = std::clamp<int64_t>(j1, 0, w - 1);
  i0 = std::clamp<int64_t>(i0, 0, h - 1);
  i1 = std::clamp<int64_t>(i1, 0, h - 1);
  BilinearTaps t;
  t.i0 = i0; t.i1 = i1; t.j0 = j0; t.j1 = j1;
  t.w00 = (1 - fv) * (1 - fu);
  t.w01 = (1 - fv) * fu;
  t.w10 = fv * (1 - fu);
  t.w11 = fv * fu;
  return t;
}

template <typename T>
T bilinear_at(const T* plane, int64_t h, int64_t w, double x, double y) {
  BilinearTaps t = bilinear_taps(h, w, x, y);
  return static_cast<T>(t.w00 * plane[t.i0 * w + t.j0] + t.w01 * plane[t.i0 * w + t.j1] +
                        t.w10 * plane[t.i1 * w + t.j0] + t.w11 * plane[t.i1 * w + t.j1]);
}

template float bilinear_at<float>(const float*, int64_t, int64_t, double, double);
template double bilinear_at<double>(const double*, int64_t, int64_t, double, double);

}  // namespace detail

template <typename T>
FeatureMapT<T> roi_align(const FeatureMapT<T>& map, const Rect& rect, int out_h, int out_w) {
  if (map.ndim() != 4) throw std::invalid_argument("roi_align: map must be (B,D,h,w)");
  if (!rect.valid()) throw std::invalid_argument("roi_align: empty rect");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("roi_align: output dims must be >= 1");
  const int64_t b = map.dim(0), d = map.dim(1), h = map.dim(2), w = map.dim(3);
  FeatureMapT<T> out({b, d, out_h, out_w});
  const double cw = rect.width() / out_w, ch = rect.height() / out_h;
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t di = 0; di < d; ++di) {
      const T* plane = map.ptr() + (bi * d + di) * h * w;
      T* op = out.ptr() + (bi * d + di) * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        double y = rect.y0 + (oy + 0.5) * ch;
        for (int64_t ox = 0; ox < out_w; ++ox) {
          double x = rect.x0 + (ox + 0.5) * cw;
          op[oy * out_w + ox] = detail::bilinear_at(plane, h, w, x, y);
        }
      }
    }
  }
  return out;
}

template <typename T>
FeatureMapT<T> rotate_map(const FeatureMapT<T>& map, RotIndex k) {
  if (map.ndim() != 4) throw std::invalid_argument("rotate_map: map must be (B,D,h,w)");
  const int64_t b = map.dim(0), d = map.dim(1), h = map.dim(2), w = map.dim(3);
  if ((k.k & 1) && h != w)
    throw std::invalid_argument("rotate_map: odd k requires a square map");
  const int64_t oh = (k.k & 1) ? w : h, ow = (k.k & 1) ? h : w;
  FeatureMapT<T> out({b, d, oh, ow});
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t di = 0; di < d; ++di) {
      const T* ip = map.ptr() + (bi * d + di) * h * w;
      T* op = out.ptr() + (bi * d + di) * oh * ow;
      for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
          int64_t ro, co;
          detail::rotate_index(k.k, h, w, r, c, &ro, &co);
          op[ro * ow + co] = ip[r * w + c];
        }
    }
  }
  return out;
}

OverlapRegion overlap_region(const ViewParams& sview, const ViewParams& tview,
                             double patch_s, double patch_t) {
  if (tview.rot.k != 0)
    throw std::invalid_argument("overlap_region: teacher views are unrotated");
  OverlapRegion reg;
  reg.rel_rot = sview.rot;
  auto src = intersect(sview.crop, tview.crop);
  if (!src) return reg;
  reg.student_rect = view_to_feature(source_to_view(*src, sview), patch_s);
  reg.teacher_rect = view_to_feature(source_to_view(*src, tview), patch_t);
  reg.valid = true;
  return reg;
}

template FeatureMapT<float> roi_align<float>(const FeatureMapT<float>&, const Rect&, int, int);
template FeatureMapT<double> roi_align<double>(const FeatureMapT<double>&, const Rect&, int, int);
template FeatureMapT<float> rotate_map<float>(const FeatureMapT<float>&, RotIndex);
template FeatureMapT<double> rotate_map<double>(const FeatureMapT<double>&, RotIndex);

}  // namespace gtsa
