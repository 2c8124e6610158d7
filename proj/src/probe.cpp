#include "gtsa/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gtsa/augment.hpp"
#include "gtsa/losses.hpp"
#include "gtsa/resample.hpp"
#include "gtsa/rng.hpp"

namespace gtsa {

const char* const kProbeFamilies[3] = {"color_jitter", "four_fold_rotation", "crop_multicrop"};

namespace {

int family_index(const std::string& family) {
  for (int i = 0; i < 3; ++i)
    if (family == kProbeFamilies[i]) return i;
  throw std::invalid_argument("probe: unknown family: " + family);
}

Tensor chw_stack(const std::vector<const ImageF*>& ims) {
  const int64_t B = static_cast<int64_t>(ims.size()), S = ims[0]->w;
  Tensor out({B, 3, S, S});
  for (int64_t b = 0; b < B; ++b) {
    const ImageF& im = *ims[static_cast<size_t>(b)];
    float* dst = out.ptr() + b * 3 * S * S;
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) dst[(c * S + y) * S + x] = im.px(int(x), int(y))[c];
  }
  return out;
}

/// GAP of (B,D,h,w) into per-item double vectors.
std::vector<std::vector<double>> gap_vectors(const Tensor& map) {
  const int64_t B = map.dim(0), D = map.dim(1), P = map.dim(2) * map.dim(3);
  std::vector<std::vector<double>> out(static_cast<size_t>(B),
                                       std::vector<double>(static_cast<size_t>(D), 0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t d = 0; d < D; ++d) {
      double s = 0;
      const float* p = map.ptr() + (b * D + d) * P;
      for (int64_t t = 0; t < P; ++t) s += p[t];
      out[static_cast<size_t>(b)][static_cast<size_t>(d)] = s / static_cast<double>(P);
    }
  return out;
}

ViewParams identity_params(int src, int out_size, uint64_t seed) {
  ViewParams p;
  p.kind = ViewKind::kGlobal;
  p.crop = Rect{0, 0, static_cast<double>(src), static_cast<double>(src)};
  p.out_size = out_size;
  p.rot = RotIndex(0);
  p.photo = PhotometricParams{};
  p.seed = seed;
  return p;
}

void draw_dot(ImageU8& im, int cx, int cy, const uint8_t rgb[3]) {
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const int x = cx + dx, y = cy + dy;
      if (x < 0 || y < 0 || x >= im.w || y >= im.h) continue;
      uint8_t* p = im.px(x, y);
      p[0] = rgb[0];
      p[1] = rgb[1];
      p[2] = rgb[2];
    }
}

void draw_line(ImageU8& im, double x0, double y0, double x1, double y1, const uint8_t rgb[3]) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || y < 0 || x >= im.w || y >= im.h) continue;
    uint8_t* p = im.px(x, y);
    p[0] = rgb[0];
    p[1] = rgb[1];
    p[2] = rgb[2];
  }
}

}  // namespace

EncoderFn student_encoder(Params student, ArchConfig arch) {
  return [student = std::move(student), arch](const Tensor& images) {
    return encode_map(student, arch, images);
  };
}

ProbeResult sensitivity(const EncoderFn& enc, const Dataset& data, const std::string& family,
                        int n_views, uint64_t seed, const TrainConfig& cfg,
                        bool transforms_enabled,
                        std::vector<std::vector<ViewParams>>* record) {
  const int fam = family_index(family);
  if (data.empty()) throw std::invalid_argument("probe: empty dataset");
  if (fam == 2) n_views = 10;  // always 2 global + 8 local
  if (n_views < 2) throw std::invalid_argument("probe: n_views must be >= 2");

  const int src = data.size;
  double var_sum = 0;
  for (size_t i = 0; i < data.count(); ++i) {
    const ImageF full = to_float(data.images[i]);
    const ImageF base = resize_bilinear(full, cfg.global_size, cfg.global_size);

    std::vector<ImageF> views(static_cast<size_t>(n_views));
    std::vector<ViewParams> params(static_cast<size_t>(n_views));
    for (int v = 0; v < n_views; ++v) {
      const uint64_t sv = hash_mix(seed, static_cast<uint64_t>(fam), static_cast<uint64_t>(i),
                                   static_cast<uint64_t>(v));
      ViewParams vp = identity_params(src, cfg.global_size, sv);
      if (!transforms_enabled) {
        views[static_cast<size_t>(v)] = base;
      } else if (fam == 0) {
        vp.photo.jitter_strength = cfg.jitter_strength;
        views[static_cast<size_t>(v)] = apply_photometric(base, vp.photo, sv);
      } else if (fam == 1) {
        Rng r(sv);
        vp.rot = RotIndex(static_cast<int>(r.below(4)));
        views[static_cast<size_t>(v)] = rotate_image(base, vp.rot);
      } else {
        Rng r(sv);
        const bool global = v < 2;
        vp.kind = global ? ViewKind::kGlobal : ViewKind::kLocal;
        vp.out_size = global ? cfg.global_size : cfg.local_size;
        vp.crop = aug_detail::sample_area_rect(
            r, src, src, global ? cfg.global_area_min : cfg.local_area_min,
            global ? cfg.global_area_max : cfg.local_area_max);
        views[static_cast<size_t>(v)] = crop_resize(full, vp.crop, vp.out_size);
      }
      params[static_cast<size_t>(v)] = vp;
    }
    if (record) record->push_back(params);

    // Batch the encoder per view size (feature dims match, spatial may not).
    std::vector<std::vector<double>> vecs(static_cast<size_t>(n_views));
    std::vector<int> order(static_cast<size_t>(n_views));
    for (int v = 0; v < n_views; ++v) order[static_cast<size_t>(v)] = v;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return views[static_cast<size_t>(a)].w < views[static_cast<size_t>(b)].w;
    });
    for (size_t lo = 0; lo < order.size();) {
      size_t hi = lo;
      while (hi < order.size() && views[static_cast<size_t>(order[hi])].w ==
                                      views[static_cast<size_t>(order[lo])].w)
        ++hi;
      std::vector<const ImageF*> group;
      for (size_t k = lo; k < hi; ++k)
        group.push_back(&views[static_cast<size_t>(order[k])]);
      const auto gv = gap_vectors(enc(chw_stack(group)));
      for (size_t k = lo; k < hi; ++k) vecs[static_cast<size_t>(order[k])] = gv[k - lo];
      lo = hi;
    }

    const size_t D = vecs[0].size();
    double image_var = 0;
    for (size_t d = 0; d < D; ++d) {
      double mean = 0;
      for (int v = 0; v < n_views; ++v) mean += vecs[static_cast<size_t>(v)][d];
      mean /= n_views;
      double ss = 0;
      for (int v = 0; v < n_views; ++v) {
        const double dv = vecs[static_cast<size_t>(v)][d] - mean;
        ss += dv * dv;
      }
      image_var += ss / (n_views - 1);
    }
    var_sum += image_var / static_cast<double>(D);
  }

  ProbeResult r;
  r.family = family;
  r.mean_variance = var_sum / static_cast<double>(data.count());
  r.n_views = n_views;
  r.n_images = static_cast<int>(data.count());
  return r;
}

void write_probe_csv(const std::vector<ProbeResult>& results, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << "family,mean_variance,n_views,n_images\n";
  char buf[64];
  for (const ProbeResult& r : results) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.mean_variance);
    f << r.family << ',' << buf << ',' << r.n_views << ',' << r.n_images << '\n';
  }
  f.close();
  if (!f) throw std::runtime_error(path + ": write failed");
}

std::pair<double, double> source_to_view_point(const ViewParams& v, double sx, double sy) {
  const double S = v.out_size;
  double x = (sx - v.crop.x0) * S / v.crop.width();
  double y = (sy - v.crop.y0) * S / v.crop.height();
  for (int i = 0; i < v.rot.k; ++i) {
    const double nx = y, ny = S - x;
    x = nx;
    y = ny;
  }
  return {x, y};
}

std::pair<double, double> view_to_source_point(const ViewParams& v, double vx, double vy) {
  const double S = v.out_size;
  double x = vx, y = vy;
  for (int i = 0; i < v.rot.k; ++i) {  // inverse quarter turn per step
    const double nx = S - y, ny = x;
    x = nx;
    y = ny;
  }
  return {v.crop.x0 + x * v.crop.width() / S, v.crop.y0 + y * v.crop.height() / S};
}

MatchExport export_matches(const Params& student, const Params& teacher, const ArchConfig& arch,
                           const TrainConfig& cfg, const ImageU8& image, int K, uint64_t seed) {
  AugmentConfig aug = augment_of(cfg);
  aug.n_local = 0;
  aug.n_global = 2;
  const ViewSet vs = sample_view_set(image, aug, seed);
  const View& a = vs.views[0];
  const View& b = vs.views[1];

  MatchExport out;
  out.view_s = a.image;
  out.view_t = rotate_image(b.image, b.params.rot.inverse());

  std::vector<const ImageF*> sa{&out.view_s}, tb{&out.view_t};
  const Tensor fs = forward_map(student, arch, chw_stack(sa), true);
  const Tensor ft = forward_map(teacher, arch, chw_stack(tb), false);
  const std::vector<MatchSet> ms = match_topk(fs, ft, K);

  ViewParams tparams = b.params;
  tparams.rot = RotIndex(0);
  const int64_t ws = fs.dim(3), wt = ft.dim(3);
  for (const MatchPair& p : ms[0].pairs) {
    const double sxv = (static_cast<double>(p.p % ws) + 0.5) * cfg.patch;
    const double syv = (static_cast<double>(p.p / ws) + 0.5) * cfg.patch;
    const double txv = (static_cast<double>(p.pt % wt) + 0.5) * cfg.patch;
    const double tyv = (static_cast<double>(p.pt / wt) + 0.5) * cfg.patch;
    const auto [sx, sy] = view_to_source_point(a.params, sxv, syv);
    const auto [tx, ty] = view_to_source_point(tparams, txv, tyv);
    out.records.push_back({sx, sy, tx, ty, p.sim});
    out.view_records.push_back({sxv, syv, txv, tyv, p.sim});
  }
  return out;
}

void write_match_csv(const MatchExport& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  char buf[192];
  for (const MatchRecord& r : m.records) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g,%.9g\n", r.sx, r.sy, r.tx, r.ty, r.sim);
    f << buf;
  }
  f.close();
  if (!f) throw std::runtime_error(path + ": write failed");
}

ImageU8 render_match_overlay(const MatchExport& m) {
  const int gap = 8;
  const int h = std::max(m.view_s.h, m.view_t.h);
  const int w = m.view_s.w + gap + m.view_t.w;
  ImageU8 canvas(w, h);
  std::fill(canvas.rgb.begin(), canvas.rgb.end(), static_cast<uint8_t>(32));

  const ImageU8 us = to_u8(m.view_s), ut = to_u8(m.view_t);
  for (int y = 0; y < us.h; ++y)
    for (int x = 0; x < us.w; ++x)
      std::copy(us.px(x, y), us.px(x, y) + 3, canvas.px(x, y));
  const int off = m.view_s.w + gap;
  for (int y = 0; y < ut.h; ++y)
    for (int x = 0; x < ut.w; ++x)
      std::copy(ut.px(x, y), ut.px(x, y) + 3, canvas.px(off + x, y));

  const uint8_t line_rgb[3] = {60, 255, 60};
  const uint8_t dot_rgb[3] = {255, 80, 80};
  for (const MatchRecord& r : m.view_records) {
    draw_line(canvas, r.sx, r.sy, off + r.tx, r.ty, line_rgb);
    draw_dot(canvas, static_cast<int>(std::lround(r.sx)), static_cast<int>(std::lround(r.sy)),
             dot_rgb);
    draw_dot(canvas, static_cast<int>(std::lround(off + r.tx)),
             static_cast<int>(std::lround(r.ty)), dot_rgb);
  }
  return canvas;
}

double rotation_accuracy(const Params& student, const ArchConfig& arch, const TrainConfig& cfg,
                         const Dataset& holdout, int n_views, uint64_t seed) {
  if (holdout.empty()) throw std::invalid_argument("rotation_accuracy: empty dataset");
  const AugmentConfig aug = augment_of(cfg);
  int correct = 0, total = 0;
  for (uint64_t c = 0; total < n_views; ++c) {
    const ImageU8& img = holdout.images[static_cast<size_t>(c % holdout.count())];
    const ViewSet vs = sample_view_set(img, aug, hash_mix(seed, 0x726f7465ull, c));
    for (const View& v : vs.views) {
      if (total >= n_views) break;
      std::vector<const ImageF*> one{&v.image};
      const Tensor logits = rot_logits_value(student, arch, chw_stack(one));
      int arg = 0;
      for (int k = 1; k < 4; ++k)
        if (logits[k] > logits[arg]) arg = k;
      correct += arg == v.params.rot.k ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(correct) / total;
}

}  // namespace gtsa
