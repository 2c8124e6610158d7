#include "gtsa/losses.hpp"

#include <algorithm>
#include <cmath>

namespace gtsa {

namespace {

// Per-item slice of a (B,D,h,w) map as a 1-item map.
template <typename T>
FeatureMapT<T> item_map(const FeatureMapT<T>& m, int64_t b) {
  const int64_t D = m.dim(1), h = m.dim(2), w = m.dim(3);
  FeatureMapT<T> out({1, D, h, w});
  std::copy(m.ptr() + b * D * h * w, m.ptr() + (b + 1) * D * h * w, out.ptr());
  return out;
}

template <typename T>
double cosine_cell(const FeatureMapT<T>& a, const FeatureMapT<T>& b, int64_t t, int64_t T_cells) {
  const int64_t D = a.dim(1);
  double sa = 0, sb = 0, s = 0;
  for (int64_t d = 0; d < D; ++d) {
    const double av = a[d * T_cells + t], bv = b[d * T_cells + t];
    sa += av * av;
    sb += bv * bv;
    s += av * bv;
  }
  return s / ((std::sqrt(sa) + kCosineNormEps) * (std::sqrt(sb) + kCosineNormEps));
}

}  // namespace

template <typename T>
double overlap_loss(const FeatureMapT<T>& z, const FeatureMapT<T>& zt,
                    const std::vector<OverlapRegion>& regions, int out) {
  if (z.ndim() != 4 || zt.ndim() != 4) throw std::invalid_argument("overlap_loss: maps must be (B,D,h,w)");
  const int64_t B = z.dim(0);
  if (zt.dim(0) != B || zt.dim(1) != z.dim(1))
    throw std::invalid_argument("overlap_loss: batch or feature dims disagree");
  if (static_cast<int64_t>(regions.size()) != B)
    throw std::invalid_argument("overlap_loss: one region per batch item required");
  const int64_t T_cells = static_cast<int64_t>(out) * out;
  double acc = 0;
  for (int64_t b = 0; b < B; ++b) {
    const OverlapRegion& r = regions[static_cast<size_t>(b)];
    if (!r.valid) throw std::invalid_argument("overlap_loss: invalid overlap region");
    FeatureMapT<T> ps = roi_align(item_map(z, b), r.student_rect, out, out);
    FeatureMapT<T> pt =
        rotate_map(roi_align(item_map(zt, b), r.teacher_rect, out, out), r.rel_rot);
    for (int64_t t = 0; t < T_cells; ++t) acc += cosine_cell(ps, pt, t, T_cells);
  }
  return -acc / static_cast<double>(B * T_cells);
}

template <typename T>
double overlap_loss(const FeatureMapT<T>& z, const FeatureMapT<T>& zt,
                    const OverlapRegion& region, int out) {
  if (z.ndim() != 4) throw std::invalid_argument("overlap_loss: maps must be (B,D,h,w)");
  return overlap_loss(z, zt, std::vector<OverlapRegion>(static_cast<size_t>(z.dim(0)), region),
                      out);
}

template <typename T>
double rotation_loss(const TensorT<T>& logits, const std::vector<int64_t>& labels) {
  if (logits.ndim() != 2) throw std::invalid_argument("rotation_loss: logits must be (B,C)");
  const int64_t B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B)
    throw std::invalid_argument("rotation_loss: label count mismatch");
  double acc = 0;
  for (int64_t r = 0; r < B; ++r) {
    const int64_t lab = labels[static_cast<size_t>(r)];
    if (lab < 0 || lab >= C) throw std::invalid_argument("rotation_loss: label out of range");
    double m = logits[r * C];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(logits[r * C + c]));
    double s = 0;
    for (int64_t c = 0; c < C; ++c) s += std::exp(logits[r * C + c] - m);
    acc += m + std::log(s) - logits[r * C + lab];
  }
  return acc / static_cast<double>(B);
}

template <typename T>
std::vector<MatchSet> match_topk(const FeatureMapT<T>& z, const FeatureMapT<T>& zt, int K) {
  if (z.ndim() != 4 || zt.ndim() != 4) throw std::invalid_argument("match_topk: maps must be (B,D,h,w)");
  const int64_t B = z.dim(0), D = z.dim(1);
  if (zt.dim(0) != B || zt.dim(1) != D)
    throw std::invalid_argument("match_topk: batch or feature dims disagree");
  if (K < 1) throw std::invalid_argument("match_topk: K must be >= 1");
  const int64_t Ps = z.dim(2) * z.dim(3), Pt = zt.dim(2) * zt.dim(3);
  const int keep = static_cast<int>(std::min<int64_t>(K, Ps));

  std::vector<MatchSet> out(static_cast<size_t>(B));
  std::vector<double> ns(static_cast<size_t>(Ps)), nt(static_cast<size_t>(Pt));
  for (int64_t b = 0; b < B; ++b) {
    const T* zb = z.ptr() + b * D * Ps;
    const T* tb = zt.ptr() + b * D * Pt;
    // Patch vectors live in channel-major maps: element (d, p) at d*P + p.
    for (int64_t p = 0; p < Ps; ++p) {
      double s = 0;
      for (int64_t d = 0; d < D; ++d) s += static_cast<double>(zb[d * Ps + p]) * zb[d * Ps + p];
      ns[static_cast<size_t>(p)] = std::sqrt(s) + kCosineNormEps;
    }
    for (int64_t p = 0; p < Pt; ++p) {
      double s = 0;
      for (int64_t d = 0; d < D; ++d) s += static_cast<double>(tb[d * Pt + p]) * tb[d * Pt + p];
      nt[static_cast<size_t>(p)] = std::sqrt(s) + kCosineNormEps;
    }
    std::vector<MatchPair> best(static_cast<size_t>(Ps));
    for (int64_t p = 0; p < Ps; ++p) {
      double bsim = 0;
      int64_t bidx = -1;
      for (int64_t q = 0; q < Pt; ++q) {
        double dot = 0;
        for (int64_t d = 0; d < D; ++d)
          dot += static_cast<double>(zb[d * Ps + p]) * tb[d * Pt + q];
        const double sim = dot / (ns[static_cast<size_t>(p)] * nt[static_cast<size_t>(q)]);
        if (bidx < 0 || sim > bsim) {  // ties keep the lower teacher index
          bsim = sim;
          bidx = q;
        }
      }
      best[static_cast<size_t>(p)] = MatchPair{p, bidx, bsim};
    }
    std::stable_sort(best.begin(), best.end(), [](const MatchPair& a, const MatchPair& b) {
      return a.sim > b.sim;  // stable: equal sims keep lower student index
    });
    best.resize(static_cast<size_t>(keep));
    out[static_cast<size_t>(b)].pairs = std::move(best);
    out[static_cast<size_t>(b)].k = keep;
  }
  return out;
}

template <typename T>
double patch_corr_loss(const FeatureMapT<T>& z, const FeatureMapT<T>& zt, int K) {
  std::vector<MatchSet> ms = match_topk(z, zt, K);
  double acc = 0;
  int64_t n = 0;
  for (const MatchSet& m : ms)
    for (const MatchPair& p : m.pairs) {
      acc += p.sim;
      ++n;
    }
  return -acc / static_cast<double>(n);
}

template <typename T>
TotalLoss total_loss(const std::vector<FeatureMapT<T>>& student_maps,
                     const std::vector<FeatureMapT<T>>& teacher_maps,
                     const std::vector<std::vector<std::vector<OverlapRegion>>>& regions,
                     const std::vector<TensorT<T>>& rot_logits,
                     const std::vector<std::vector<int64_t>>& rot_labels,
                     const LossWeights& w, const LossFlags& flags, int G, int L, int K, int pool) {
  const int V = G + L;
  if (static_cast<int>(student_maps.size()) != V || static_cast<int>(teacher_maps.size()) != G)
    throw std::invalid_argument("total_loss: wrong view-map counts");
  if (static_cast<int>(rot_logits.size()) != V || static_cast<int>(rot_labels.size()) != V)
    throw std::invalid_argument("total_loss: wrong rotation counts");
  if (static_cast<int>(regions.size()) != G)
    throw std::invalid_argument("total_loss: regions must be indexed [g][l]");

  TotalLoss out;
  out.n_pairs = G * V - G;
  out.n_views = V;
  double ov = 0, pc = 0, rp = 0;
  for (int g = 0; g < G; ++g) {
    if (static_cast<int>(regions[static_cast<size_t>(g)].size()) != V)
      throw std::invalid_argument("total_loss: regions must be indexed [g][l]");
    for (int l = 0; l < V; ++l) {
      if (l == g) continue;
      const auto& regs = regions[static_cast<size_t>(g)][static_cast<size_t>(l)];
      if (flags.overlap)
        ov += overlap_loss(student_maps[static_cast<size_t>(l)],
                           teacher_maps[static_cast<size_t>(g)], regs, pool);
      if (flags.pc)
        pc += patch_corr_loss(student_maps[static_cast<size_t>(l)],
                              teacher_maps[static_cast<size_t>(g)], K);
    }
  }
  if (flags.rp)
    for (int l = 0; l < V; ++l)
      rp += rotation_loss(rot_logits[static_cast<size_t>(l)], rot_labels[static_cast<size_t>(l)]);

  out.overlap = flags.overlap ? ov / out.n_pairs : 0;
  out.pc = flags.pc ? pc / out.n_pairs : 0;
  out.rp = flags.rp ? rp / out.n_views : 0;
  out.total = (flags.overlap ? out.overlap : 0) + (flags.pc ? w.alpha * out.pc : 0) +
              (flags.rp ? w.beta * out.rp : 0);
  return out;
}

template <typename T>
int build_overlap_pair(Graph<T>& g, int student_map, int teacher_map,
                       const std::vector<OverlapRegion>& regions, int pool) {
  std::vector<Rect> rs, rt;
  std::vector<int> ks;
  rs.reserve(regions.size());
  rt.reserve(regions.size());
  ks.reserve(regions.size());
  for (const OverlapRegion& r : regions) {
    if (!r.valid) throw std::invalid_argument("build_overlap_pair: invalid overlap region");
    rs.push_back(r.student_rect);
    rt.push_back(r.teacher_rect);
    ks.push_back(r.rel_rot.k);
  }
  int ps = g.roi_align_batch(student_map, std::move(rs), pool, pool);
  int pt = g.rotate_map_batch(g.roi_align_batch(teacher_map, std::move(rt), pool, pool),
                              std::move(ks));
  int cos = g.cosine_rows(g.nchw_to_rows(ps), g.nchw_to_rows(pt));
  return g.scale(g.mean_all(cos), -1.0);
}

template <typename T>
int build_patch_corr_pair(Graph<T>& g, int student_rows, int teacher_rows, int64_t B, int K) {
  const int64_t D = g.value(student_rows).dim(1);
  const int64_t Ps = g.value(student_rows).dim(0) / B, Pt = g.value(teacher_rows).dim(0) / B;
  if (g.value(student_rows).dim(0) != B * Ps || g.value(teacher_rows).dim(0) != B * Pt ||
      g.value(teacher_rows).dim(1) != D)
    throw std::invalid_argument("build_patch_corr_pair: row shape mismatch");

  // Matching runs on values; maps are reassembled row-major so the value-
  // level matcher sees the same layout as the tape.
  FeatureMapT<T> zs({B, D, Ps, 1}), zt({B, D, Pt, 1});
  {
    const T* sp = g.value(student_rows).ptr();
    const T* tp = g.value(teacher_rows).ptr();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t d = 0; d < D; ++d) {
        for (int64_t p = 0; p < Ps; ++p) zs[(b * D + d) * Ps + p] = sp[(b * Ps + p) * D + d];
        for (int64_t p = 0; p < Pt; ++p) zt[(b * D + d) * Pt + p] = tp[(b * Pt + p) * D + d];
      }
  }
  std::vector<MatchSet> ms = match_topk(zs, zt, K);

  std::vector<int64_t> sidx, tidx;
  for (int64_t b = 0; b < B; ++b)
    for (const MatchPair& p : ms[static_cast<size_t>(b)].pairs) {
      sidx.push_back(b * Ps + p.p);
      tidx.push_back(b * Pt + p.pt);
    }
  int cos = g.cosine_rows(g.gather_rows(student_rows, std::move(sidx)),
                          g.gather_rows(teacher_rows, std::move(tidx)));
  return g.scale(g.mean_all(cos), -1.0);
}

template <typename T>
TotalIds combine_total(Graph<T>& g, const std::vector<int>& overlap_ids,
                       const std::vector<int>& pc_ids, const std::vector<int>& rp_ids,
                       const LossWeights& w, const LossFlags& flags) {
  auto zero = [&]() {
    TensorT<T> z({1});
    return g.input(std::move(z), false);
  };
  auto average = [&](const std::vector<int>& ids) {
    return g.weighted_sum(ids, std::vector<double>(ids.size(), 1.0 / ids.size()));
  };
  TotalIds out;
  out.overlap = flags.overlap && !overlap_ids.empty() ? average(overlap_ids) : zero();
  out.pc = flags.pc && !pc_ids.empty() ? average(pc_ids) : zero();
  out.rp = flags.rp && !rp_ids.empty() ? average(rp_ids) : zero();
  std::vector<int> terms;
  std::vector<double> weights;
  if (flags.overlap) {
    terms.push_back(out.overlap);
    weights.push_back(1.0);
  }
  if (flags.pc) {
    terms.push_back(out.pc);
    weights.push_back(w.alpha);
  }
  if (flags.rp) {
    terms.push_back(out.rp);
    weights.push_back(w.beta);
  }
  if (terms.empty()) throw std::invalid_argument("combine_total: every loss term is disabled");
  out.total = g.weighted_sum(std::move(terms), std::move(weights));
  return out;
}

#define GTSA_INSTANTIATE(T)                                                                       \
  template double overlap_loss<T>(const FeatureMapT<T>&, const FeatureMapT<T>&,                   \
                                  const std::vector<OverlapRegion>&, int);                        \
  template double overlap_loss<T>(const FeatureMapT<T>&, const FeatureMapT<T>&,                   \
                                  const OverlapRegion&, int);                                     \
  template double rotation_loss<T>(const TensorT<T>&, const std::vector<int64_t>&);               \
  template std::vector<MatchSet> match_topk<T>(const FeatureMapT<T>&, const FeatureMapT<T>&,      \
                                               int);                                              \
  template double patch_corr_loss<T>(const FeatureMapT<T>&, const FeatureMapT<T>&, int);          \
  template TotalLoss total_loss<T>(                                                               \
      const std::vector<FeatureMapT<T>>&, const std::vector<FeatureMapT<T>>&,                     \
      const std::vector<std::vector<std::vector<OverlapRegion>>>&, const std::vector<TensorT<T>>&,\
      const std::vector<std::vector<int64_t>>&, const LossWeights&, const LossFlags&, int, int,   \
      int, int);                                                                                  \
  template int build_overlap_pair<T>(Graph<T>&, int, int, const std::vector<OverlapRegion>&,      \
                                     int);                                                        \
  template int build_patch_corr_pair<T>(Graph<T>&, int, int, int64_t, int);                       \
  template TotalIds combine_total<T>(Graph<T>&, const std::vector<int>&, const std::vector<int>&, \
                                     const std::vector<int>&, const LossWeights&, const LossFlags&);

GTSA_INSTANTIATE(float)
GTSA_INSTANTIATE(double)
#undef GTSA_INSTANTIATE

}  // namespace gtsa
