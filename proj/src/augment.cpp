#include "gtsa/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gtsa/geometry.hpp"
#include "gtsa/resample.hpp"

namespace gtsa {

namespace {

constexpr uint64_t kViewStream = 0x76696577u;   // per-view parameter draws
constexpr uint64_t kPhotoStream = 0x70686f74u;  // per-view photometric draws

float luma(const float* p) { return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]; }

void rgb_to_hsv(const float* p, float* h, float* s, float* v) {
  float mx = std::max({p[0], p[1], p[2]}), mn = std::min({p[0], p[1], p[2]});
  float d = mx - mn;
  *v = mx;
  *s = mx > 0 ? d / mx : 0;
  if (d <= 0) {
    *h = 0;
    return;
  }
  float hh;
  if (mx == p[0])
    hh = (p[1] - p[2]) / d;
  else if (mx == p[1])
    hh = 2.f + (p[2] - p[0]) / d;
  else
    hh = 4.f + (p[0] - p[1]) / d;
  hh /= 6.f;
  if (hh < 0) hh += 1.f;
  *h = hh;
}

void hsv_to_rgb(float h, float s, float v, float* p) {
  if (s <= 0) {
    p[0] = p[1] = p[2] = v;
    return;
  }
  h = h - std::floor(h);
  float hh = h * 6.f;
  int sector = std::min(5, static_cast<int>(hh));
  float f = hh - sector;
  float a = v * (1 - s), b = v * (1 - s * f), c = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: p[0] = v; p[1] = c; p[2] = a; break;
    case 1: p[0] = b; p[1] = v; p[2] = a; break;
    case 2: p[0] = a; p[1] = v; p[2] = c; break;
    case 3: p[0] = a; p[1] = b; p[2] = v; break;
    case 4: p[0] = c; p[1] = a; p[2] = v; break;
    default: p[0] = v; p[1] = a; p[2] = b; break;
  }
}

void gaussian_blur(ImageF& im, double sigma) {
  int radius = static_cast<int>(std::ceil(3 * sigma));
  if (radius < 1) return;
  std::vector<float> k(static_cast<size_t>(radius) + 1);
  double sum = 0;
  for (int i = 0; i <= radius; ++i) {
    k[i] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    sum += (i == 0 ? 1.0 : 2.0) * k[i];
  }
  for (float& v : k) v = static_cast<float>(v / sum);

  ImageF tmp(im.w, im.h);
  for (int y = 0; y < im.h; ++y)  // horizontal pass
    for (int x = 0; x < im.w; ++x) {
      float acc[3] = {0, 0, 0};
      for (int i = -radius; i <= radius; ++i) {
        const float* p = im.px(std::clamp(x + i, 0, im.w - 1), y);
        float wk = k[std::abs(i)];
        acc[0] += wk * p[0]; acc[1] += wk * p[1]; acc[2] += wk * p[2];
      }
      float* o = tmp.px(x, y);
      o[0] = acc[0]; o[1] = acc[1]; o[2] = acc[2];
    }
  for (int y = 0; y < im.h; ++y)  // vertical pass
    for (int x = 0; x < im.w; ++x) {
      float acc[3] = {0, 0, 0};
      for (int i = -radius; i <= radius; ++i) {
        const float* p = tmp.px(x, std::clamp(y + i, 0, im.h - 1));
        float wk = k[std::abs(i)];
        acc[0] += wk * p[0]; acc[1] += wk * p[1]; acc[2] += wk * p[2];
      }
      float* o = im.px(x, y);
      o[0] = acc[0]; o[1] = acc[1]; o[2] = acc[2];
    }
}

double overlap_fraction(const Rect& local, const Rect& g) {
  double ix0 = std::max(local.x0, g.x0), iy0 = std::max(local.y0, g.y0);
  double ix1 = std::min(local.x1, g.x1), iy1 = std::min(local.y1, g.y1);
  if (ix1 <= ix0 || iy1 <= iy0) return 0;
  return (ix1 - ix0) * (iy1 - iy0) / local.area();
}

}  // namespace

namespace aug_detail {

Rect sample_area_rect(Rng& rng, double W, double H, double fmin, double fmax) {
  double f = rng.uniform(fmin, fmax);
  // Aspect log-uniform in [3/4, 4/3], narrowed so the crop fits the source.
  double lo = std::max(0.75, f * W / H), hi = std::min(4.0 / 3.0, W / (f * H));
  if (lo > hi) {  // extreme source aspect: fall back to the feasible range
    lo = f * W / H;
    hi = W / (f * H);
  }
  double r = std::exp(rng.uniform(std::log(lo), std::log(hi)));
  double w = std::min(W, std::sqrt(f * W * H * r));
  double h = std::min(H, std::sqrt(f * W * H / r));
  double x0 = rng.uniform(0, W - w), y0 = rng.uniform(0, H - h);
  return Rect{x0, y0, x0 + w, y0 + h};
}

std::pair<Rect, bool> sample_local_rect(Rng& rng, double W, double H, const AugmentConfig& cfg,
                                        const std::vector<Rect>& globals) {
  for (int attempt = 0; attempt < 20; ++attempt) {
    Rect r = sample_area_rect(rng, W, H, cfg.local_area_min, cfg.local_area_max);
    bool ok = true;
    for (const Rect& g : globals)
      if (overlap_fraction(r, g) < 0.25) { ok = false; break; }
    if (ok) return {r, false};
  }
  // Common intersection of all globals; non-empty because globals overlap
  // pairwise (area fraction >= 0.5) and pairwise-overlapping intervals share
  // a common interval on each axis.
  Rect common = globals.at(0);
  for (size_t i = 1; i < globals.size(); ++i) {
    common.x0 = std::max(common.x0, globals[i].x0);
    common.y0 = std::max(common.y0, globals[i].y0);
    common.x1 = std::min(common.x1, globals[i].x1);
    common.y1 = std::min(common.y1, globals[i].y1);
  }
  if (!common.valid())
    throw std::logic_error("sample_local_rect: globals have no common intersection");
  Rect want = sample_area_rect(rng, W, H, cfg.local_area_min, cfg.local_area_max);
  double w = std::min(want.width(), common.width());
  double h = std::min(want.height(), common.height());
  double x0 = rng.uniform(common.x0, common.x1 - w);
  double y0 = rng.uniform(common.y0, common.y1 - h);
  return {Rect{x0, y0, x0 + w, y0 + h}, true};
}

}  // namespace aug_detail

ImageF crop_resize(const ImageF& im, const Rect& rect, int out_size) {
  if (!rect.valid()) throw std::invalid_argument("crop_resize: empty rect");
  if (out_size < 1) throw std::invalid_argument("crop_resize: bad out_size");
  return resample_rect(im, rect, out_size, out_size);
}

ImageF rotate_image(const ImageF& im, RotIndex k) {
  if ((k.k & 1) && im.w != im.h)
    throw std::invalid_argument("rotate_image: odd k requires a square image");
  if (k.k == 0) return im;
  int ow = (k.k & 1) ? im.h : im.w, oh = (k.k & 1) ? im.w : im.h;
  ImageF out(ow, oh);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      int64_t ro, co;
      detail::rotate_index(k.k, im.h, im.w, y, x, &ro, &co);
      const float* p = im.px(x, y);
      float* o = out.px(static_cast<int>(co), static_cast<int>(ro));
      o[0] = p[0]; o[1] = p[1]; o[2] = p[2];
    }
  return out;
}

ImageF apply_photometric(const ImageF& im, const PhotometricParams& p, uint64_t seed) {
  Rng rng(hash_mix(seed, kPhotoStream));
  // Factors are always drawn, in a fixed order, so the stream layout does
  // not depend on which transforms are enabled.
  double s = p.jitter_strength;
  float fb = static_cast<float>(rng.uniform(1 - 0.4 * s, 1 + 0.4 * s));
  float fc = static_cast<float>(rng.uniform(1 - 0.4 * s, 1 + 0.4 * s));
  float fs = static_cast<float>(rng.uniform(1 - 0.4 * s, 1 + 0.4 * s));
  float fh = static_cast<float>(rng.uniform(-0.1 * s, 0.1 * s));

  ImageF out = im;
  size_t n = out.rgb.size();

  if (fb != 1.f)
    for (size_t i = 0; i < n; ++i) out.rgb[i] *= fb;

  if (fc != 1.f) {  // blend toward the mean luma of the whole image
    double m = 0;
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) m += luma(out.px(x, y));
    float mean = static_cast<float>(m / (static_cast<double>(out.w) * out.h));
    for (size_t i = 0; i < n; ++i) out.rgb[i] = mean + (out.rgb[i] - mean) * fc;
  }

  if (fs != 1.f)  // blend toward per-pixel luma
    for (size_t i = 0; i < n; i += 3) {
      float* px = &out.rgb[i];
      float l = luma(px);
      px[0] = l + (px[0] - l) * fs;
      px[1] = l + (px[1] - l) * fs;
      px[2] = l + (px[2] - l) * fs;
    }

  if (fh != 0.f)
    for (size_t i = 0; i < n; i += 3) {
      float* px = &out.rgb[i];
      float h, sv, v;
      rgb_to_hsv(px, &h, &sv, &v);
      hsv_to_rgb(h + fh, sv, v, px);
    }

  if (p.grayscale)
    for (size_t i = 0; i < n; i += 3) {
      float l = luma(&out.rgb[i]);
      out.rgb[i] = out.rgb[i + 1] = out.rgb[i + 2] = l;
    }

  if (p.blur_sigma > 0) gaussian_blur(out, p.blur_sigma);

  if (p.noise_sigma > 0)
    for (size_t i = 0; i < n; ++i)
      out.rgb[i] += static_cast<float>(p.noise_sigma * rng.normal());

  for (size_t i = 0; i < n; ++i) out.rgb[i] = std::clamp(out.rgb[i], 0.f, 1.f);
  return out;
}

ViewSet sample_view_set(const ImageU8& image, const AugmentConfig& cfg, uint64_t seed) {
  if (cfg.n_global < 2) throw std::invalid_argument("sample_view_set: need >= 2 global views");
  if (cfg.n_local < 0) throw std::invalid_argument("sample_view_set: negative local count");
  if (std::min(image.w, image.h) < cfg.min_image)
    throw std::invalid_argument("sample_view_set: image below minimum size");
  if (cfg.global_area_min < 0.5)
    throw std::invalid_argument("sample_view_set: global area fraction below 0.5 breaks the overlap guarantee");

  ImageF src = to_float(image);
  if (std::min(src.w, src.h) < cfg.global_size) {
    // Minimal upscale: short side -> global_size, aspect preserved.
    double scale = static_cast<double>(cfg.global_size) / std::min(src.w, src.h);
    int nw = std::max(cfg.global_size, static_cast<int>(std::lround(src.w * scale)));
    int nh = std::max(cfg.global_size, static_cast<int>(std::lround(src.h * scale)));
    src = resize_bilinear(src, nw, nh);
  }
  const double W = src.w, H = src.h;
  const int n_views = cfg.n_global + cfg.n_local;

  // Crops first (locals need all globals), then the rest of each view's
  // parameters, all keyed on (seed, view index).
  std::vector<Rect> crops(static_cast<size_t>(n_views));
  std::vector<Rect> globals;
  for (int i = 0; i < cfg.n_global; ++i) {
    Rng rng(hash_mix(seed, kViewStream, static_cast<uint64_t>(i)));
    crops[static_cast<size_t>(i)] =
        aug_detail::sample_area_rect(rng, W, H, cfg.global_area_min, cfg.global_area_max);
    globals.push_back(crops[static_cast<size_t>(i)]);
  }
  for (int i = cfg.n_global; i < n_views; ++i) {
    Rng rng(hash_mix(seed, kViewStream, static_cast<uint64_t>(i)));
    crops[static_cast<size_t>(i)] =
        aug_detail::sample_local_rect(rng, W, H, cfg, globals).first;
  }

  ViewSet set;
  set.n_global = cfg.n_global;
  set.n_local = cfg.n_local;
  for (int i = 0; i < n_views; ++i) {
    const bool is_global = i < cfg.n_global;
    Rng rng(hash_mix(seed, kViewStream, static_cast<uint64_t>(i), 1));

    ViewParams vp;
    vp.kind = is_global ? ViewKind::kGlobal : ViewKind::kLocal;
    vp.crop = crops[static_cast<size_t>(i)];
    vp.out_size = is_global ? cfg.global_size : cfg.local_size;
    vp.rot = cfg.enable_rotation ? RotIndex(static_cast<int>(rng.below(4))) : RotIndex(0);
    vp.seed = hash_mix(seed, kPhotoStream, static_cast<uint64_t>(i));

    PhotometricParams ph;
    if (cfg.enable_photometric) {
      ph.jitter_strength = cfg.jitter_strength;
      ph.grayscale = rng.uniform() < cfg.p_grayscale;
      double p_blur = is_global ? cfg.p_blur_global : cfg.p_blur_local;
      ph.blur_sigma = rng.uniform() < p_blur
                          ? rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)
                          : 0.0;
      ph.noise_sigma = rng.uniform() < cfg.p_noise ? cfg.noise_sigma : 0.0;
    }
    vp.photo = ph;

    View v;
    v.params = vp;
    v.image = rotate_image(apply_photometric(crop_resize(src, vp.crop, vp.out_size), ph, vp.seed),
                           vp.rot);
    set.views.push_back(std::move(v));
  }

  // The guarantee every loss pair depends on.
  for (const View& v : set.views)
    for (const Rect& g : globals)
      if (!(std::min(v.params.crop.x1, g.x1) > std::max(v.params.crop.x0, g.x0) &&
            std::min(v.params.crop.y1, g.y1) > std::max(v.params.crop.y0, g.y0)))
        throw std::logic_error("sample_view_set: view crop misses a global crop");
  return set;
}

}  // namespace gtsa
