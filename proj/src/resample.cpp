#include "gtsa/resample.hpp"

#include <stdexcept>

#include "gtsa/geometry.hpp"

namespace gtsa {

ImageF resample_rect(const ImageF& im, const Rect& rect, int out_w, int out_h) {
  if (!rect.valid()) throw std::invalid_argument("resample_rect: empty rect");
  if (out_w < 1 || out_h < 1) throw std::invalid_argument("resample_rect: bad output size");
  ImageF out(out_w, out_h);
  const double cw = rect.width() / out_w, ch = rect.height() / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double y = rect.y0 + (oy + 0.5) * ch;
    for (int ox = 0; ox < out_w; ++ox) {
      const double x = rect.x0 + (ox + 0.5) * cw;
      detail::BilinearTaps t = detail::bilinear_taps(im.h, im.w, x, y);
      const float* r00 = im.px(static_cast<int>(t.j0), static_cast<int>(t.i0));
      const float* r01 = im.px(static_cast<int>(t.j1), static_cast<int>(t.i0));
      const float* r10 = im.px(static_cast<int>(t.j0), static_cast<int>(t.i1));
      const float* r11 = im.px(static_cast<int>(t.j1), static_cast<int>(t.i1));
      float* o = out.px(ox, oy);
      for (int c = 0; c < 3; ++c)
        o[c] = static_cast<float>(t.w00 * r00[c] + t.w01 * r01[c] + t.w10 * r10[c] +
                                  t.w11 * r11[c]);
    }
  }
  return out;
}

ImageF resize_bilinear(const ImageF& im, int out_w, int out_h) {
  return resample_rect(im, Rect{0, 0, double(im.w), double(im.h)}, out_w, out_h);
}

}  // namespace gtsa
