#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "gtsa/geometry.hpp"
#include "gtsa/graph.hpp"
#include "gtsa/losses.hpp"
#include "gtsa/rng.hpp"
#include "gtsa/tensor.hpp"
#include "gtsa/types.hpp"
#include "test_util.hpp"

using namespace gtsa;
using namespace testutil;

namespace {

TensorD rand_map(std::vector<int64_t> shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  fill_random(t.ptr(), t.numel(), seed, lo, hi);
  return t;
}

OverlapRegion make_region(const Rect& s, const Rect& t, int k) {
  OverlapRegion r;
  r.student_rect = s;
  r.teacher_rect = t;
  r.rel_rot = RotIndex(k);
  r.valid = true;
  return r;
}

// Pools one batch item of a (B,D,h,w) map over rect into an out x out grid,
// sampling each cell center with the independent bilinear oracle. Layout of
// the result matches a 1-item map: (d*out + i)*out + j.
std::vector<double> pool_oracle(const TensorD& map, int64_t b, const Rect& rect, int out) {
  const int64_t D = map.dim(1), h = map.dim(2), w = map.dim(3);
  std::vector<double> cells(static_cast<size_t>(D * out * out));
  const double cw = rect.width() / out, ch = rect.height() / out;
  for (int64_t d = 0; d < D; ++d) {
    const double* plane = map.ptr() + (b * D + d) * h * w;
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < out; ++j)
        cells[static_cast<size_t>((d * out + i) * out + j)] =
            bilinear_oracle(plane, h, w, rect.x0 + (j + 0.5) * cw, rect.y0 + (i + 0.5) * ch);
  }
  return cells;
}

// k CCW quarter turns of a (D, n, n) cell block: (r, c) -> (n-1-c, r) per turn.
std::vector<double> rotate_oracle(std::vector<double> cells, int64_t D, int n, int k) {
  for (int t = 0; t < k; ++t) {
    std::vector<double> next(cells.size());
    for (int64_t d = 0; d < D; ++d)
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
          next[static_cast<size_t>((d * n + (n - 1 - c)) * n + r)] =
              cells[static_cast<size_t>((d * n + r) * n + c)];
    cells = std::move(next);
  }
  return cells;
}

double cosine_oracle(const std::vector<double>& a, const std::vector<double>& b, int64_t D,
                     int64_t t, int64_t T) {
  double sa = 0, sb = 0, dot = 0;
  for (int64_t d = 0; d < D; ++d) {
    const double av = a[static_cast<size_t>(d * T + t)], bv = b[static_cast<size_t>(d * T + t)];
    sa += av * av;
    sb += bv * bv;
    dot += av * bv;
  }
  return dot / ((std::sqrt(sa) + kCosineNormEps) * (std::sqrt(sb) + kCosineNormEps));
}

// Exhaustive matcher: every student patch scores every teacher patch, the
// argmax keeps the earliest teacher index on exact ties, and the final order
// is similarity descending with the lower student index first.
template <typename T>
std::vector<MatchPair> match_oracle_item(const TensorT<T>& z, const TensorT<T>& zt, int64_t b,
                                         int K) {
  const int64_t D = z.dim(1), Ps = z.dim(2) * z.dim(3), Pt = zt.dim(2) * zt.dim(3);
  const T* zb = z.ptr() + b * D * Ps;
  const T* tb = zt.ptr() + b * D * Pt;
  auto norm = [D](const T* base, int64_t P, int64_t p) {
    double s = 0;
    for (int64_t d = 0; d < D; ++d)
      s += static_cast<double>(base[d * P + p]) * static_cast<double>(base[d * P + p]);
    return std::sqrt(s) + kCosineNormEps;
  };
  std::vector<MatchPair> best;
  for (int64_t p = 0; p < Ps; ++p) {
    double bs = 0;
    int64_t bq = -1;
    for (int64_t q = 0; q < Pt; ++q) {
      double dot = 0;
      for (int64_t d = 0; d < D; ++d)
        dot += static_cast<double>(zb[d * Ps + p]) * static_cast<double>(tb[d * Pt + q]);
      const double sim = dot / (norm(zb, Ps, p) * norm(tb, Pt, q));
      if (bq < 0 || sim > bs) {
        bs = sim;
        bq = q;
      }
    }
    best.push_back(MatchPair{p, bq, bs});
  }
  std::sort(best.begin(), best.end(), [](const MatchPair& x, const MatchPair& y) {
    if (x.sim != y.sim) return x.sim > y.sim;
    return x.p < y.p;
  });
  best.resize(static_cast<size_t>(std::min<int64_t>(K, Ps)));
  return best;
}

template <typename T>
void run_match_trials(int trials, uint64_t salt) {
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(hash_mix(salt, static_cast<uint64_t>(trial)));
    const int64_t B = 1 + rng.below(3), D = 1 + rng.below(6);
    const int64_t hs = 1 + rng.below(4), ws = 1 + rng.below(4);
    const int64_t ht = 1 + rng.below(4), wt = 1 + rng.below(4);
    const int K = 1 + static_cast<int>(rng.below(20));
    const int64_t Ps = hs * ws, Pt = ht * wt;
    TensorT<T> z({B, D, hs, ws}), zt({B, D, ht, wt});
    for (auto& v : z.data) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    for (auto& v : zt.data) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    // Duplicated patch vectors force bit-exact similarity ties; an occasional
    // zero patch exercises the guarded-cosine path.
    for (int64_t b = 0; b < B; ++b) {
      if (Pt >= 2 && rng.below(2) == 0) {
        const int64_t q0 = rng.below(Pt), q1 = rng.below(Pt);
        for (int64_t d = 0; d < D; ++d) zt[(b * D + d) * Pt + q1] = zt[(b * D + d) * Pt + q0];
      }
      if (Ps >= 2 && rng.below(2) == 0) {
        const int64_t p0 = rng.below(Ps), p1 = rng.below(Ps);
        for (int64_t d = 0; d < D; ++d) z[(b * D + d) * Ps + p1] = z[(b * D + d) * Ps + p0];
      }
      if (rng.below(4) == 0) {
        const int64_t p0 = rng.below(Ps);
        for (int64_t d = 0; d < D; ++d) z[(b * D + d) * Ps + p0] = T(0);
      }
    }
    const std::vector<MatchSet> got = match_topk(z, zt, K);
    REQUIRE(got.size() == static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
      const std::vector<MatchPair> want = match_oracle_item(z, zt, b, K);
      const MatchSet& m = got[static_cast<size_t>(b)];
      bool same = m.k == static_cast<int>(want.size()) && m.pairs.size() == want.size();
      for (size_t i = 0; same && i < want.size(); ++i)
        same = m.pairs[i].p == want[i].p && m.pairs[i].pt == want[i].pt &&
               m.pairs[i].sim == want[i].sim;
      CAPTURE(trial);
      CAPTURE(b);
      CHECK(same);
    }
  }
}

using BuildFn = std::function<int(GraphD&, const std::vector<int>&)>;

// Analytic gradients from one backward pass versus central differences on
// every element of every trainable input.
void fd_check(const std::vector<TensorD>& inputs, const BuildFn& build, double tol = 2e-6) {
  const double h = 1e-5;
  GraphD g;
  std::vector<int> ids;
  for (const TensorD& t : inputs) ids.push_back(g.input(t, true));
  const int loss = build(g, ids);
  REQUIRE(g.value(loss).numel() == 1);
  g.backward(loss);
  std::vector<TensorD> grads;
  for (int id : ids) grads.push_back(g.grad(id));

  auto eval = [&](size_t i, int64_t e, double delta) {
    std::vector<TensorD> mod = inputs;
    mod[i][e] += delta;
    GraphD g2;
    std::vector<int> ids2;
    for (TensorD& t : mod) ids2.push_back(g2.input(std::move(t), true));
    return static_cast<double>(g2.value(build(g2, ids2))[0]);
  };

  for (size_t i = 0; i < inputs.size(); ++i)
    for (int64_t e = 0; e < inputs[i].numel(); ++e) {
      const double fd = (eval(i, e, h) - eval(i, e, -h)) / (2 * h);
      const double an = grads[i][e];
      const double rel = std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
      CAPTURE(i);
      CAPTURE(e);
      CHECK(rel <= tol);
    }
}

}  // namespace

TEST_CASE("overlap_loss equals an independent pool-rotate-cosine oracle") {
  const int64_t B = 2, D = 3;
  const int out = 3;
  TensorD z = rand_map({B, D, 5, 4}, 101);
  TensorD zt = rand_map({B, D, 4, 6}, 102);
  std::vector<OverlapRegion> regions = {
      make_region({0.4, 0.7, 3.1, 4.6}, {1.2, 0.3, 5.4, 3.8}, 1),
      make_region({0.9, 0.2, 3.7, 3.9}, {0.6, 1.1, 4.9, 3.6}, 3)};

  double acc = 0;
  for (int64_t b = 0; b < B; ++b) {
    const OverlapRegion& r = regions[static_cast<size_t>(b)];
    const std::vector<double> ps = pool_oracle(z, b, r.student_rect, out);
    const std::vector<double> pt =
        rotate_oracle(pool_oracle(zt, b, r.teacher_rect, out), D, out, r.rel_rot.k);
    for (int64_t t = 0; t < out * out; ++t) acc += cosine_oracle(ps, pt, D, t, out * out);
  }
  const double want = -acc / static_cast<double>(B * out * out);
  CHECK(approx(overlap_loss(z, zt, regions, out), want, 1e-12));

  // The float instantiation agrees with the double oracle to float precision.
  CHECK(approx(overlap_loss(z.cast<float>(), zt.cast<float>(), regions, out), want, 1e-4));
}

TEST_CASE("overlap_loss reaches -1 when pooled features are rotation-composed copies") {
  const int64_t D = 4;
  const int n = 5;
  for (int k = 0; k < 4; ++k) {
    TensorD zt = rand_map({1, D, n, n}, 200 + static_cast<uint64_t>(k), 0.2, 1.0);
    TensorD z = rotate_map(zt, RotIndex(k));
    OverlapRegion r = make_region({0, 0, n, n}, {0, 0, n, n}, k);
    // Full-rect pooling at out == n samples every cell center exactly, so the
    // pooled teacher grid rotates onto the student grid cell for cell.
    const double loss = overlap_loss(z, zt, r, n);
    CAPTURE(k);
    CHECK(approx(loss, -1.0, 1e-6));
    CHECK(loss > -1.0);  // the norm guard keeps each cosine strictly below 1
  }
}

TEST_CASE("the single-region overlap overload replicates the region across the batch") {
  TensorD z = rand_map({3, 2, 4, 4}, 301);
  TensorD zt = rand_map({3, 2, 4, 4}, 302);
  OverlapRegion r = make_region({0.5, 0.5, 3.5, 3.5}, {0.2, 0.8, 3.9, 3.1}, 2);
  CHECK(overlap_loss(z, zt, r, 2) == overlap_loss(z, zt, std::vector<OverlapRegion>(3, r), 2));
}

TEST_CASE("overlap_loss validates maps and regions") {
  TensorD z = rand_map({2, 3, 4, 4}, 401);
  TensorD zt = rand_map({2, 3, 4, 4}, 402);
  OverlapRegion good = make_region({0.1, 0.1, 3.0, 3.0}, {0.1, 0.1, 3.0, 3.0}, 0);
  OverlapRegion bad;  // valid = false

  CHECK_THROWS_WITH_AS(overlap_loss(z, zt, std::vector<OverlapRegion>{good, bad}, 2),
                       doctest::Contains("invalid overlap region"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(overlap_loss(z, zt, std::vector<OverlapRegion>{good}, 2),
                       doctest::Contains("one region per batch item"), std::invalid_argument);
  TensorD z3({2, 3, 16});
  CHECK_THROWS_WITH_AS(overlap_loss(z3, zt, good, 2), doctest::Contains("(B,D,h,w)"),
                       std::invalid_argument);
  TensorD zt_b = rand_map({3, 3, 4, 4}, 403);
  CHECK_THROWS_WITH_AS(overlap_loss(z, zt_b, std::vector<OverlapRegion>(2, good), 2),
                       doctest::Contains("batch or feature dims disagree"), std::invalid_argument);
  TensorD zt_d = rand_map({2, 4, 4, 4}, 404);
  CHECK_THROWS_WITH_AS(overlap_loss(z, zt_d, std::vector<OverlapRegion>(2, good), 2),
                       doctest::Contains("batch or feature dims disagree"), std::invalid_argument);
}

TEST_CASE("rotation_loss matches a log-sum-exp oracle and survives large shifts") {
  const int64_t B = 5, C = 4;
  TensorD logits({B, C});
  fill_random(logits.ptr(), logits.numel(), 501, -2.0, 2.0);
  const std::vector<int64_t> labels = {0, 3, 1, 2, 3};

  double want = 0;
  for (int64_t r = 0; r < B; ++r) {
    double s = 0;
    for (int64_t c = 0; c < C; ++c) s += std::exp(logits[r * C + c]);
    want += std::log(s) - logits[r * C + labels[static_cast<size_t>(r)]];
  }
  want /= static_cast<double>(B);
  CHECK(approx(rotation_loss(logits, labels), want, 1e-12));

  // A uniform +1000 shift leaves every softmax unchanged; the naive form
  // would overflow.
  TensorD shifted = logits;
  for (auto& v : shifted.data) v += 1000.0;
  CHECK(approx(rotation_loss(shifted, labels), want, 1e-9));

  TensorD uniform({3, 4});
  for (auto& v : uniform.data) v = 0.7;
  CHECK(approx(rotation_loss(uniform, {1, 2, 0}), std::log(4.0), 1e-12));
}

TEST_CASE("rotation_loss validates logits and labels") {
  TensorD flat({4});
  CHECK_THROWS_WITH_AS(rotation_loss(flat, {0}), doctest::Contains("(B,C)"),
                       std::invalid_argument);
  TensorD lg = rand_map({2, 4}, 502);
  CHECK_THROWS_WITH_AS(rotation_loss(lg, {0}), doctest::Contains("label count"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(rotation_loss(lg, {0, 4}), doctest::Contains("out of range"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(rotation_loss(lg, {-1, 0}), doctest::Contains("out of range"),
                       std::invalid_argument);
}

TEST_CASE("match_topk keeps the earliest teacher index and student order on exact ties") {
  // Patch vectors (4,3) and (3,4) share the exact integer norm 5, so every
  // matched similarity is the same representable number and ties are bit-level.
  const int64_t Ps = 3, Pt = 4;
  TensorD z({1, 2, 1, Ps}), zt({1, 2, 1, Pt});
  auto set = [](TensorD& m, int64_t P, int64_t p, double a, double b) {
    m[0 * P + p] = a;
    m[1 * P + p] = b;
  };
  set(z, Ps, 0, 4, 3);   // v
  set(z, Ps, 1, 4, 3);   // v again
  set(z, Ps, 2, 3, 4);   // u
  set(zt, Pt, 0, 3, 4);  // u
  set(zt, Pt, 1, 4, 3);  // v
  set(zt, Pt, 2, 4, 3);  // v again
  set(zt, Pt, 3, -5, 0);

  const std::vector<MatchSet> ms = match_topk(z, zt, 5);
  REQUIRE(ms.size() == 1);
  CHECK(ms[0].k == 3);  // K clamps to the student patch count
  REQUIRE(ms[0].pairs.size() == 3);
  // Students 0 and 1 tie between teacher 1 and 2: the argmax keeps teacher 1.
  // All three best similarities tie, so the order stays 0, 1, 2.
  CHECK(ms[0].pairs[0].p == 0);
  CHECK(ms[0].pairs[0].pt == 1);
  CHECK(ms[0].pairs[1].p == 1);
  CHECK(ms[0].pairs[1].pt == 1);
  CHECK(ms[0].pairs[2].p == 2);
  CHECK(ms[0].pairs[2].pt == 0);
  CHECK(ms[0].pairs[0].sim == ms[0].pairs[1].sim);
  CHECK(ms[0].pairs[0].sim == ms[0].pairs[2].sim);

  // A zero student patch scores 0 everywhere and keeps teacher index 0.
  TensorD z0({1, 1, 1, 2}), t0({1, 1, 1, 2});
  z0[0] = 0.0;
  z0[1] = 1.0;
  t0[0] = -1.0;
  t0[1] = 2.0;
  const std::vector<MatchSet> m0 = match_topk(z0, t0, 2);
  REQUIRE(m0[0].pairs.size() == 2);
  CHECK(m0[0].pairs[0].p == 1);
  CHECK(m0[0].pairs[0].pt == 1);
  CHECK(m0[0].pairs[1].p == 0);
  CHECK(m0[0].pairs[1].pt == 0);
  CHECK(m0[0].pairs[1].sim == 0.0);
}

TEST_CASE("match_topk agrees exactly with the exhaustive oracle on randomized maps") {
  run_match_trials<double>(700, 0x6d617468);
  run_match_trials<float>(300, 0x6d617466);
}

TEST_CASE("match_topk validates maps and K") {
  TensorD z = rand_map({2, 3, 2, 2}, 601);
  TensorD zt = rand_map({2, 3, 2, 2}, 602);
  CHECK_THROWS_WITH_AS(match_topk(z, zt, 0), doctest::Contains("K must be >= 1"),
                       std::invalid_argument);
  TensorD flat({2, 3, 4});
  CHECK_THROWS_WITH_AS(match_topk(flat, zt, 1), doctest::Contains("(B,D,h,w)"),
                       std::invalid_argument);
  TensorD zt_b = rand_map({3, 3, 2, 2}, 603);
  CHECK_THROWS_WITH_AS(match_topk(z, zt_b, 1),
                       doctest::Contains("batch or feature dims disagree"),
                       std::invalid_argument);
  TensorD zt_d = rand_map({2, 4, 2, 2}, 604);
  CHECK_THROWS_WITH_AS(match_topk(z, zt_d, 1),
                       doctest::Contains("batch or feature dims disagree"),
                       std::invalid_argument);
}

TEST_CASE("patch_corr_loss averages the retained similarities over batch and K") {
  const int64_t B = 2;
  TensorD z = rand_map({B, 4, 2, 3}, 701);   // 6 student patches
  TensorD zt = rand_map({B, 4, 2, 4}, 702);  // 8 teacher patches
  for (int K : {1, 4, 50}) {
    double acc = 0;
    int64_t n = 0;
    for (int64_t b = 0; b < B; ++b)
      for (const MatchPair& p : match_oracle_item(z, zt, b, K)) {
        acc += p.sim;
        ++n;
      }
    CAPTURE(K);
    CHECK(n == B * std::min<int64_t>(K, 6));  // K clamps at the patch count
    CHECK(approx(patch_corr_loss(z, zt, K), -acc / static_cast<double>(n), 1e-12));
  }
}

TEST_CASE("total_loss applies the pair and view normalizers") {
  const int G = 2, L = 2, V = 4;
  const int64_t B = 2, D = 3;
  const int K = 3, pool = 2;
  std::vector<TensorD> student;
  student.push_back(rand_map({B, D, 4, 4}, 801));
  student.push_back(rand_map({B, D, 4, 4}, 802));
  student.push_back(rand_map({B, D, 2, 2}, 803));
  student.push_back(rand_map({B, D, 2, 2}, 804));
  std::vector<TensorD> teacher;
  teacher.push_back(rand_map({B, D, 4, 4}, 811));
  teacher.push_back(rand_map({B, D, 4, 4}, 812));

  Rng rr(821);
  auto rand_rect = [&rr](double hi) {
    const double x0 = rr.uniform(0.0, hi / 2), y0 = rr.uniform(0.0, hi / 2);
    return Rect{x0, y0, x0 + rr.uniform(0.5, hi / 2), y0 + rr.uniform(0.5, hi / 2)};
  };
  std::vector<std::vector<std::vector<OverlapRegion>>> regions(G);
  for (int g = 0; g < G; ++g) {
    regions[static_cast<size_t>(g)].resize(V);
    for (int l = 0; l < V; ++l) {
      std::vector<OverlapRegion> rs;
      for (int64_t b = 0; b < B; ++b) {
        if (l == g) {
          rs.push_back(OverlapRegion{});  // diagonal entries must never be read
          continue;
        }
        const double s_hi = l < G ? 4.0 : 2.0;
        rs.push_back(make_region(rand_rect(s_hi), rand_rect(4.0), static_cast<int>(rr.below(4))));
      }
      regions[static_cast<size_t>(g)][static_cast<size_t>(l)] = rs;
    }
  }
  std::vector<TensorD> logits;
  std::vector<std::vector<int64_t>> labels;
  for (int l = 0; l < V; ++l) {
    logits.push_back(rand_map({B, 4}, 831 + static_cast<uint64_t>(l), -2.0, 2.0));
    labels.push_back({rr.below(4), rr.below(4)});
  }

  const LossWeights w;  // alpha = beta = 0.5
  const LossFlags all;
  const TotalLoss got = total_loss(student, teacher, regions, logits, labels, w, all, G, L, K, pool);
  CHECK(got.n_pairs == 6);
  CHECK(got.n_views == 4);

  double ov = 0, pc = 0, rp = 0;
  for (int g = 0; g < G; ++g)
    for (int l = 0; l < V; ++l) {
      if (l == g) continue;
      const auto& regs = regions[static_cast<size_t>(g)][static_cast<size_t>(l)];
      ov += overlap_loss(student[static_cast<size_t>(l)], teacher[static_cast<size_t>(g)], regs,
                         pool);
      pc += patch_corr_loss(student[static_cast<size_t>(l)], teacher[static_cast<size_t>(g)], K);
    }
  for (int l = 0; l < V; ++l)
    rp += rotation_loss(logits[static_cast<size_t>(l)], labels[static_cast<size_t>(l)]);
  CHECK(approx(got.overlap, ov / 6.0, 1e-12));
  CHECK(approx(got.pc, pc / 6.0, 1e-12));
  CHECK(approx(got.rp, rp / 4.0, 1e-12));
  CHECK(approx(got.total, got.overlap + 0.5 * got.pc + 0.5 * got.rp, 1e-12));

  // Each disabled term reports 0 and leaves the weighted sum.
  const TotalLoss no_ov =
      total_loss(student, teacher, regions, logits, labels, w, LossFlags{false, true, true}, G, L,
                 K, pool);
  CHECK(no_ov.overlap == 0.0);
  CHECK(no_ov.pc == got.pc);
  CHECK(approx(no_ov.total, 0.5 * got.pc + 0.5 * got.rp, 1e-12));

  const TotalLoss no_pc =
      total_loss(student, teacher, regions, logits, labels, w, LossFlags{true, false, true}, G, L,
                 K, pool);
  CHECK(no_pc.pc == 0.0);
  CHECK(approx(no_pc.total, got.overlap + 0.5 * got.rp, 1e-12));

  const TotalLoss no_rp =
      total_loss(student, teacher, regions, logits, labels, w, LossFlags{true, true, false}, G, L,
                 K, pool);
  CHECK(no_rp.rp == 0.0);
  CHECK(approx(no_rp.total, got.overlap + 0.5 * got.pc, 1e-12));

  const TotalLoss none =
      total_loss(student, teacher, regions, logits, labels, w, LossFlags{false, false, false}, G,
                 L, K, pool);
  CHECK(none.total == 0.0);

  // Zero weights keep the diagnostic terms but the total collapses to the
  // overlap term exactly.
  const TotalLoss zero_w =
      total_loss(student, teacher, regions, logits, labels, LossWeights{0.0, 0.0}, all, G, L, K,
                 pool);
  CHECK(zero_w.total == zero_w.overlap);
  CHECK(zero_w.pc == got.pc);
  CHECK(zero_w.rp == got.rp);
}

TEST_CASE("total_loss validates the per-view bookkeeping") {
  const int G = 1, L = 1;
  const int64_t B = 1, D = 2;
  std::vector<TensorD> student = {rand_map({B, D, 4, 4}, 901), rand_map({B, D, 2, 2}, 902)};
  std::vector<TensorD> teacher = {rand_map({B, D, 4, 4}, 903)};
  std::vector<std::vector<std::vector<OverlapRegion>>> regions(1);
  regions[0].resize(2);
  regions[0][0] = {OverlapRegion{}};
  regions[0][1] = {make_region({0.2, 0.2, 1.8, 1.8}, {0.5, 0.5, 3.5, 3.5}, 1)};
  std::vector<TensorD> logits = {rand_map({B, 4}, 904), rand_map({B, 4}, 905)};
  std::vector<std::vector<int64_t>> labels = {{2}, {0}};
  const LossWeights w;
  const LossFlags all;

  CHECK_NOTHROW(total_loss(student, teacher, regions, logits, labels, w, all, G, L, 4, 2));

  std::vector<TensorD> one_student = {student[0]};
  CHECK_THROWS_WITH_AS(
      total_loss(one_student, teacher, regions, logits, labels, w, all, G, L, 4, 2),
      doctest::Contains("wrong view-map counts"), std::invalid_argument);
  std::vector<TensorD> two_teachers = {teacher[0], teacher[0]};
  CHECK_THROWS_WITH_AS(
      total_loss(student, two_teachers, regions, logits, labels, w, all, G, L, 4, 2),
      doctest::Contains("wrong view-map counts"), std::invalid_argument);
  std::vector<TensorD> one_logit = {logits[0]};
  CHECK_THROWS_WITH_AS(
      total_loss(student, teacher, regions, one_logit, labels, w, all, G, L, 4, 2),
      doctest::Contains("wrong rotation counts"), std::invalid_argument);
  std::vector<std::vector<int64_t>> three_labels = {{2}, {0}, {1}};
  CHECK_THROWS_WITH_AS(
      total_loss(student, teacher, regions, logits, three_labels, w, all, G, L, 4, 2),
      doctest::Contains("wrong rotation counts"), std::invalid_argument);
  std::vector<std::vector<std::vector<OverlapRegion>>> wide(2, regions[0]);
  CHECK_THROWS_WITH_AS(total_loss(student, teacher, wide, logits, labels, w, all, G, L, 4, 2),
                       doctest::Contains("regions must be indexed [g][l]"), std::invalid_argument);
  std::vector<std::vector<std::vector<OverlapRegion>>> shallow(1);
  shallow[0].resize(1);
  shallow[0][0] = regions[0][1];
  CHECK_THROWS_WITH_AS(total_loss(student, teacher, shallow, logits, labels, w, all, G, L, 4, 2),
                       doctest::Contains("regions must be indexed [g][l]"), std::invalid_argument);
}

TEST_CASE("build_overlap_pair reproduces the value loss and differentiates cleanly") {
  const int64_t B = 2, D = 3;
  const int pool = 3;
  TensorD zs = rand_map({B, D, 5, 5}, 1001, 0.25, 1.0);
  TensorD zt = rand_map({B, D, 4, 4}, 1002, 0.25, 1.0);
  const std::vector<OverlapRegion> regions = {
      make_region({0.4, 0.6, 3.3, 3.9}, {0.3, 0.2, 3.6, 3.4}, 1),
      make_region({1.1, 0.8, 4.2, 4.4}, {0.7, 0.9, 3.8, 3.7}, 3)};

  GraphD g;
  const int s = g.input(zs, true);
  const int t = g.input(zt, false);  // teacher features carry no gradient
  const int loss = build_overlap_pair(g, s, t, regions, pool);
  REQUIRE(g.value(loss).numel() == 1);
  CHECK(approx(g.value(loss)[0], overlap_loss(zs, zt, regions, pool), 1e-12));

  g.backward(loss);
  double mag = 0;
  bool finite = true;
  for (double v : g.grad(s).data) {
    finite = finite && std::isfinite(v);
    mag += std::abs(v);
  }
  CHECK(finite);
  CHECK(mag > 0);

  fd_check({zs, zt}, [&regions, pool](GraphD& g2, const std::vector<int>& in) {
    return build_overlap_pair(g2, in[0], in[1], regions, pool);
  });

  GraphD g3;
  const int s3 = g3.input(zs, true);
  const int t3 = g3.input(zt, false);
  CHECK_THROWS_WITH_AS(
      build_overlap_pair(g3, s3, t3, std::vector<OverlapRegion>(2, OverlapRegion{}), pool),
      doctest::Contains("invalid overlap region"), std::invalid_argument);
}

TEST_CASE("build_patch_corr_pair matches rows by value and differentiates the selection") {
  const int64_t B = 2, D = 4, Ps = 5, Pt = 7;
  const int K = 3;
  TensorD srows = rand_map({B * Ps, D}, 1101);
  TensorD trows = rand_map({B * Pt, D}, 1102);

  // Channel-major maps equivalent to the row tensors.
  TensorD zs({B, D, Ps, 1}), zt({B, D, Pt, 1});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t d = 0; d < D; ++d) {
      for (int64_t p = 0; p < Ps; ++p) zs[(b * D + d) * Ps + p] = srows[(b * Ps + p) * D + d];
      for (int64_t p = 0; p < Pt; ++p) zt[(b * D + d) * Pt + p] = trows[(b * Pt + p) * D + d];
    }

  GraphD g;
  const int s = g.input(srows, true);
  const int t = g.input(trows, true);
  const int loss = build_patch_corr_pair(g, s, t, B, K);
  REQUIRE(g.value(loss).numel() == 1);
  CHECK(approx(g.value(loss)[0], patch_corr_loss(zs, zt, K), 1e-12));

  // The matched indices are constants of the tape, so gradients flow only
  // through the gathered cosines.
  fd_check({srows, trows}, [B, K](GraphD& g2, const std::vector<int>& in) {
    return build_patch_corr_pair(g2, in[0], in[1], B, K);
  });

  GraphD g3;
  const int odd = g3.input(rand_map({B * Ps + 1, D}, 1103), true);
  const int t3 = g3.input(trows, true);
  CHECK_THROWS_WITH_AS(build_patch_corr_pair(g3, odd, t3, B, K),
                       doctest::Contains("row shape mismatch"), std::invalid_argument);
  const int s3 = g3.input(srows, true);
  const int tbad = g3.input(rand_map({B * Pt, D + 1}, 1104), true);
  CHECK_THROWS_WITH_AS(build_patch_corr_pair(g3, s3, tbad, B, K),
                       doctest::Contains("row shape mismatch"), std::invalid_argument);
}

TEST_CASE("combine_total averages term lists and weights the total") {
  GraphD g;
  auto scalar = [&g](double v) {
    TensorD t({1});
    t[0] = v;
    return g.input(std::move(t), true);
  };
  const std::vector<int> ov = {scalar(-0.9), scalar(-0.8), scalar(-0.7)};
  const std::vector<int> pc = {scalar(-0.5), scalar(-0.1)};
  const std::vector<int> rp = {scalar(1.2)};
  const LossWeights w{0.3, 0.7};
  const TotalIds ids = combine_total(g, ov, pc, rp, w, LossFlags{});

  const double mo = (-0.9 - 0.8 - 0.7) / 3.0;
  const double mp = (-0.5 - 0.1) / 2.0;
  CHECK(approx(g.value(ids.overlap)[0], mo, 1e-15));
  CHECK(approx(g.value(ids.pc)[0], mp, 1e-15));
  CHECK(approx(g.value(ids.rp)[0], 1.2, 1e-15));
  CHECK(approx(g.value(ids.total)[0], mo + 0.3 * mp + 0.7 * 1.2, 1e-12));

  g.backward(ids.total);
  for (int id : ov) CHECK(approx(g.grad(id)[0], 1.0 / 3.0, 1e-15));
  for (int id : pc) CHECK(approx(g.grad(id)[0], 0.3 / 2.0, 1e-15));
  CHECK(approx(g.grad(rp[0])[0], 0.7, 1e-15));
}

TEST_CASE("combine_total fills disabled or empty terms with constant zeros") {
  GraphD g;
  auto scalar = [&g](double v) {
    TensorD t({1});
    t[0] = v;
    return g.input(std::move(t), true);
  };
  const std::vector<int> ov = {scalar(-0.6)};
  const std::vector<int> pc = {scalar(-0.4)};
  const std::vector<int> rp = {scalar(1.1)};
  const LossWeights w{0.3, 0.7};

  const TotalIds no_pc = combine_total(g, ov, pc, rp, w, LossFlags{true, false, true});
  CHECK(g.value(no_pc.pc)[0] == 0.0);
  CHECK_FALSE(g.requires_grad(no_pc.pc));
  CHECK(approx(g.value(no_pc.total)[0], -0.6 + 0.7 * 1.1, 1e-12));

  // A flag left on with no collected terms falls back to the same zero node.
  GraphD g2;
  TensorD r({1});
  r[0] = 1.1;
  const int rp0 = g2.input(std::move(r), true);
  const TotalIds sparse = combine_total(g2, {}, {}, {rp0}, w, LossFlags{});
  CHECK(g2.value(sparse.overlap)[0] == 0.0);
  CHECK(g2.value(sparse.pc)[0] == 0.0);
  CHECK_FALSE(g2.requires_grad(sparse.overlap));
  CHECK(approx(g2.value(sparse.total)[0], 0.7 * 1.1, 1e-12));
  g2.backward(sparse.total);
  CHECK(approx(g2.grad(rp0)[0], 0.7, 1e-15));

  GraphD g3;
  TensorD q({1});
  const int any = g3.input(std::move(q), true);
  CHECK_THROWS_WITH_AS(combine_total(g3, {any}, {any}, {any}, w, LossFlags{false, false, false}),
                       doctest::Contains("every loss term is disabled"), std::invalid_argument);
}

TEST_CASE("graph total equals the value-level total for a two-view batch") {
  const int G = 1, L = 1;
  const int64_t B = 2, D = 3;
  const int K = 2, pool = 2;
  TensorD s0 = rand_map({B, D, 4, 4}, 1201, 0.2, 1.0);  // student global view
  TensorD s1 = rand_map({B, D, 2, 2}, 1202, 0.2, 1.0);  // student local view
  TensorD t0 = rand_map({B, D, 4, 4}, 1203, 0.2, 1.0);  // teacher global view
  const std::vector<OverlapRegion> regions01 = {
      make_region({0.3, 0.4, 1.7, 1.8}, {0.5, 0.6, 3.2, 3.5}, 2),
      make_region({0.2, 0.3, 1.9, 1.6}, {1.0, 0.8, 3.7, 3.3}, 0)};
  std::vector<std::vector<std::vector<OverlapRegion>>> regions(1);
  regions[0].resize(2);
  regions[0][0] = std::vector<OverlapRegion>(static_cast<size_t>(B));  // diagonal, never read
  regions[0][1] = regions01;
  TensorD lg0 = rand_map({B, 4}, 1204, -2.0, 2.0);
  TensorD lg1 = rand_map({B, 4}, 1205, -2.0, 2.0);
  const std::vector<int64_t> labels0 = {1, 3};
  const std::vector<int64_t> labels1 = {0, 2};
  const LossWeights w;
  const LossFlags all;

  const TotalLoss want = total_loss<double>({s0, s1}, {t0}, regions, {lg0, lg1},
                                            {labels0, labels1}, w, all, G, L, K, pool);
  CHECK(want.n_pairs == 1);
  CHECK(want.n_views == 2);

  GraphD g;
  const int s1m = g.input(s1, true);
  const int t0m = g.input(t0, false);
  const int ovid = build_overlap_pair(g, s1m, t0m, regions01, pool);
  const int pcid = build_patch_corr_pair(g, g.nchw_to_rows(s1m), g.nchw_to_rows(t0m), B, K);
  const int rp0 = g.softmax_ce_mean(g.input(lg0, true), labels0);
  const int rp1 = g.softmax_ce_mean(g.input(lg1, true), labels1);
  const TotalIds ids = combine_total(g, {ovid}, {pcid}, {rp0, rp1}, w, all);

  CHECK(approx(g.value(ids.overlap)[0], want.overlap, 1e-10));
  CHECK(approx(g.value(ids.pc)[0], want.pc, 1e-10));
  CHECK(approx(g.value(ids.rp)[0], want.rp, 1e-10));
  CHECK(approx(g.value(ids.total)[0], want.total, 1e-10));

  g.backward(ids.total);
  bool finite = true;
  double mag = 0;
  for (double v : g.grad(s1m).data) {
    finite = finite && std::isfinite(v);
    mag += std::abs(v);
  }
  CHECK(finite);
  CHECK(mag > 0);
}
