#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gtsa/graph.hpp"
#include "gtsa/model.hpp"
#include "gtsa/tensor.hpp"
#include "test_util.hpp"

using namespace gtsa;
using namespace testutil;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.patch = 2;
  a.dim = 8;
  a.depth = 1;
  a.heads = 2;
  a.mlp_ratio = 2;
  a.encoder_norm = true;
  a.proj_blocks = 1;
  a.pred_blocks = 1;
  return a;
}

Tensor random_images(int64_t B, int64_t S, uint64_t seed) {
  Tensor t({B, 3, S, S});
  fill_random(t.ptr(), t.numel(), seed, 0.0f, 1.0f);
  return t;
}

void zero_prefix(Params& p, const std::string& prefix) {
  for (size_t i = 0; i < p.count(); ++i)
    if (p.names[i].rfind(prefix, 0) == 0) p.tensors[i].fill(0.f);
}

}  // namespace

TEST_CASE("student arrays are declared in a fixed documented order") {
  ArchConfig a = tiny_arch();
  Params p = init_student(a, 7);

  const std::vector<std::string> want = {
      "enc.embed.w", "enc.embed.b",
      "enc.blk0.ln1.g", "enc.blk0.ln1.b", "enc.blk0.wq", "enc.blk0.bq",
      "enc.blk0.wk", "enc.blk0.bk", "enc.blk0.wv", "enc.blk0.bv",
      "enc.blk0.wo", "enc.blk0.bo", "enc.blk0.ln2.g", "enc.blk0.ln2.b",
      "enc.blk0.fc1.w", "enc.blk0.fc1.b", "enc.blk0.fc2.w", "enc.blk0.fc2.b",
      "enc.norm.g", "enc.norm.b",
      "proj.blk0.conv.w", "proj.blk0.conv.b", "proj.blk0.ln.g", "proj.blk0.ln.b",
      "pred.blk0.conv.w", "pred.blk0.conv.b", "pred.blk0.ln.g", "pred.blk0.ln.b",
      "rot.fc1.w", "rot.fc1.b", "rot.ln.g", "rot.ln.b", "rot.fc2.w", "rot.fc2.b",
  };
  REQUIRE(p.names == want);

  CHECK(p.at("enc.embed.w").shape == std::vector<int64_t>{3 * 2 * 2, 8});
  CHECK(p.at("enc.blk0.fc1.w").shape == std::vector<int64_t>{8, 16});
  CHECK(p.at("enc.blk0.fc2.w").shape == std::vector<int64_t>{16, 8});
  CHECK(p.at("proj.blk0.conv.w").shape == std::vector<int64_t>{9 * 8, 8});
  CHECK(p.at("rot.fc2.w").shape == std::vector<int64_t>{8, 4});
  CHECK(p.at("rot.fc2.b").shape == std::vector<int64_t>{4});

  SUBCASE("two blocks double the encoder block arrays") {
    ArchConfig two = a;
    two.depth = 2;
    Params p2 = init_student(two, 7);
    CHECK(p2.count() == p.count() + 16);
    CHECK(p2.find("enc.blk1.wq") >= 0);
  }

  SUBCASE("the final norm is optional") {
    ArchConfig nonorm = a;
    nonorm.encoder_norm = false;
    Params p2 = init_student(nonorm, 7);
    CHECK(p2.find("enc.norm.g") == -1);
    CHECK(p2.count() == p.count() - 2);
  }

  SUBCASE("invalid architectures are rejected") {
    ArchConfig bad = a;
    bad.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(init_student(bad, 1), std::invalid_argument);
    bad = a;
    bad.dim = 6;  // not a multiple of 4
    CHECK_THROWS_AS(init_student(bad, 1), std::invalid_argument);
    bad = a;
    bad.depth = 0;
    CHECK_THROWS_AS(init_student(bad, 1), std::invalid_argument);
  }
}

TEST_CASE("initialization is deterministic with documented distributions") {
  ArchConfig a = tiny_arch();
  Params p = init_student(a, 123);
  Params q = init_student(a, 123);
  Params r = init_student(a, 124);

  bool same = true, diff = false;
  for (size_t i = 0; i < p.count(); ++i) {
    same = same && (p.tensors[i].data == q.tensors[i].data);
    diff = diff || (p.tensors[i].data != r.tensors[i].data);
  }
  CHECK(same);
  CHECK(diff);

  // Matrices: truncated normal, std 0.02, clipped at two sigma.
  double sum = 0, sq = 0;
  int64_t n = 0;
  for (size_t i = 0; i < p.count(); ++i) {
    const TensorT<float>& t = p.tensors[i];
    if (t.ndim() == 2) {
      for (float v : t.data) {
        CHECK(std::fabs(v) <= 0.04f + 1e-7f);
        sum += v;
        sq += static_cast<double>(v) * v;
        ++n;
      }
    } else if (p.names[i].size() > 2 && p.names[i].substr(p.names[i].size() - 2) == ".g") {
      for (float v : t.data) CHECK(v == 1.0f);
    } else {
      for (float v : t.data) CHECK(v == 0.0f);
    }
  }
  REQUIRE(n > 500);
  double mean = sum / n;
  double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::fabs(mean) < 0.002);
  CHECK(sd > 0.012);
  CHECK(sd < 0.025);
}

TEST_CASE("params registry checks names and casts losslessly") {
  ParamsT<float> p;
  p.add("a", {2, 3});
  p.add("b", {4});
  CHECK(p.count() == 2);
  CHECK(p.find("a") == 0);
  CHECK(p.find("missing") == -1);
  CHECK_THROWS_WITH_AS(p.at("missing"), doctest::Contains("no array named missing"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(p.add("a", {1}), doctest::Contains("duplicate array a"),
                       std::invalid_argument);

  fill_random(p.at("a").ptr(), 6, 9);
  ParamsT<double> d = p.cast<double>();
  CHECK(d.names == p.names);
  for (int64_t i = 0; i < 6; ++i)
    CHECK(d.at("a")[i] == static_cast<double>(p.at("a")[i]));
}

TEST_CASE("the teacher owns exactly the shared encoder and projector") {
  ArchConfig a = tiny_arch();
  a.depth = 2;
  a.proj_blocks = 2;
  Params s = init_student(a, 5);
  Params t = make_teacher(s);

  CHECK(t.count() == 2 + 16 * 2 + 2 + 4 * 2);
  for (const std::string& n : t.names) {
    bool shared = n.rfind("enc.", 0) == 0 || n.rfind("proj.", 0) == 0;
    CHECK(shared);
  }
  CHECK(t.find("pred.blk0.conv.w") == -1);
  CHECK(t.find("rot.fc1.w") == -1);

  // Same relative order and identical bytes at creation.
  size_t ti = 0;
  for (size_t si = 0; si < s.count(); ++si)
    if (s.names[si].rfind("enc.", 0) == 0 || s.names[si].rfind("proj.", 0) == 0) {
      REQUIRE(ti < t.count());
      CHECK(t.names[ti] == s.names[si]);
      CHECK(t.tensors[ti].data == s.tensors[si].data);
      ++ti;
    }
  CHECK(ti == t.count());
}

TEST_CASE("ema blends every teacher array toward the student") {
  ArchConfig a = tiny_arch();
  Params s = init_student(a, 11);
  Params t = make_teacher(s);

  // Push the student away so the blend is visible.
  for (auto& tensor : s.tensors)
    for (float& v : tensor.data) v += 0.01f;

  Params before = t;
  const double m = 0.9;
  ema_update(t, s, m);
  for (size_t i = 0; i < t.count(); ++i) {
    const TensorT<float>& old = before.tensors[i];
    const TensorT<float>& stu = s.at(t.names[i]);
    // Tolerance covers fused-multiply-add contraction differences only.
    for (int64_t e = 0; e < old.numel(); ++e)
      CHECK(approx(t.tensors[i][e], 0.9 * old[e] + 0.1 * stu[e], 1e-7));
  }

  SUBCASE("m = 1 freezes the teacher, m = 0 copies the student") {
    Params frozen = make_teacher(s);
    Params snapshot = frozen;
    ema_update(frozen, s, 1.0);
    for (size_t i = 0; i < frozen.count(); ++i)
      CHECK(frozen.tensors[i].data == snapshot.tensors[i].data);

    Params copy = make_teacher(s);
    for (auto& tensor : copy.tensors) tensor.fill(5.f);
    ema_update(copy, s, 0.0);
    for (size_t i = 0; i < copy.count(); ++i)
      CHECK(copy.tensors[i].data == s.at(copy.names[i]).data);
  }

  SUBCASE("repeated updates converge geometrically") {
    Params conv = make_teacher(s);
    for (auto& tensor : conv.tensors)
      for (float& v : tensor.data) v += 1.0f;
    double gap0 = std::fabs(conv.tensors[0][0] - s.at(conv.names[0])[0]);
    for (int k = 0; k < 20; ++k) ema_update(conv, s, 0.5);
    double gap = std::fabs(conv.tensors[0][0] - s.at(conv.names[0])[0]);
    CHECK(gap < gap0 * std::pow(0.5, 19));
  }

  SUBCASE("invalid blends are rejected") {
    Params bad = make_teacher(s);
    CHECK_THROWS_AS(ema_update(bad, s, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(ema_update(bad, s, 1.1), std::invalid_argument);
    bad.tensors[0] = TensorT<float>({2, 2});
    CHECK_THROWS_AS(ema_update(bad, s, 0.5), std::invalid_argument);
  }
}

TEST_CASE("momentum rises on a half cosine from m0 to one") {
  const double m0 = 0.996;
  const int64_t T = 1000;
  CHECK(momentum_at(0, T, m0) == m0);
  CHECK(momentum_at(T, T, m0) == 1.0);
  CHECK(approx(momentum_at(T / 2, T, m0), 1.0 - (1.0 - m0) / 2.0, 1e-12));
  CHECK(approx(momentum_at(T / 2, T, m0), 0.998, 1e-12));

  double prev = -1;
  for (int64_t s = 0; s <= T; s += 25) {
    double m = momentum_at(s, T, m0);
    CHECK(m >= prev);
    CHECK(m >= m0 - 1e-12);
    CHECK(m <= 1.0 + 1e-12);
    prev = m;
  }

  CHECK_THROWS_AS(momentum_at(0, 0, m0), std::invalid_argument);
  CHECK_THROWS_AS(momentum_at(-1, T, m0), std::invalid_argument);
  CHECK_THROWS_AS(momentum_at(T + 1, T, m0), std::invalid_argument);
}

TEST_CASE("sincos position table encodes rows and columns separately") {
  const int64_t h = 3, w = 4, D = 8, quarter = D / 4, half = D / 2;
  TensorT<double> pe = sincos_pe<double>(h, w, D);
  REQUIRE(pe.shape == std::vector<int64_t>{h * w, D});

  // Origin row: sines zero, cosines one.
  for (int64_t i = 0; i < quarter; ++i) {
    CHECK(pe[i] == 0.0);
    CHECK(pe[quarter + i] == 1.0);
    CHECK(pe[half + i] == 0.0);
    CHECK(pe[half + quarter + i] == 1.0);
  }

  // Frequencies follow 10000^(-i/quarter): for D=8 they are 1 and 0.01.
  const double* row10 = pe.ptr() + (1 * w + 0) * D;  // y=1, x=0
  CHECK(approx(row10[0], std::sin(1.0), 1e-12));
  CHECK(approx(row10[1], std::sin(0.01), 1e-12));
  CHECK(approx(row10[quarter], std::cos(1.0), 1e-12));
  const double* row01 = pe.ptr() + (0 * w + 1) * D;  // y=0, x=1
  CHECK(approx(row01[half + 0], std::sin(1.0), 1e-12));
  CHECK(approx(row01[half + 1], std::sin(0.01), 1e-12));

  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double* row = pe.ptr() + (y * w + x) * D;
      // First half depends only on y, second half only on x.
      const double* same_y = pe.ptr() + (y * w) * D;
      const double* same_x = pe.ptr() + x * D;
      for (int64_t i = 0; i < half; ++i) CHECK(row[i] == same_y[i]);
      for (int64_t i = half; i < D; ++i) CHECK(row[i] == same_x[i]);
      // Each sin/cos pair lies on the unit circle.
      for (int64_t i = 0; i < quarter; ++i) {
        CHECK(approx(row[i] * row[i] + row[quarter + i] * row[quarter + i], 1.0, 1e-12));
        CHECK(approx(row[half + i] * row[half + i] +
                         row[half + quarter + i] * row[half + quarter + i],
                     1.0, 1e-12));
      }
    }

  CHECK_THROWS_AS(sincos_pe<double>(2, 2, 6), std::invalid_argument);
}

TEST_CASE("encoding a batch equals encoding the items one by one") {
  ArchConfig a = tiny_arch();
  Params p = init_student(a, 21);
  const int64_t S = 8, t = S / a.patch;

  Tensor batch = random_images(3, S, 31);
  Tensor full = encode_map(p, a, batch);
  REQUIRE(full.shape == std::vector<int64_t>{3, a.dim, t, t});
  CHECK(full.all_finite());

  const int64_t item = a.dim * t * t;
  for (int64_t b = 0; b < 3; ++b) {
    Tensor one({1, 3, S, S});
    std::copy(batch.ptr() + b * 3 * S * S, batch.ptr() + (b + 1) * 3 * S * S, one.ptr());
    Tensor enc = encode_map(p, a, one);
    for (int64_t e = 0; e < item; ++e) CHECK(enc[e] == full[b * item + e]);
  }

  SUBCASE("deterministic and input sensitive") {
    Tensor again = encode_map(p, a, batch);
    CHECK(again.data == full.data);
    Tensor other = encode_map(p, a, random_images(3, S, 32));
    CHECK(other.data != full.data);
  }

  SUBCASE("input validation") {
    Tensor flat({2, 3});
    CHECK_THROWS_AS(encode_map(p, a, flat), std::invalid_argument);
    Tensor odd({1, 3, 6, 6});  // 6 % patch(2) == 0 is fine; 7 is not
    CHECK_NOTHROW(encode_map(p, a, odd));
    Tensor bad({1, 3, 7, 7});
    CHECK_THROWS_AS(encode_map(p, a, bad), std::invalid_argument);
  }
}

TEST_CASE("the float encoder agrees with its double instantiation") {
  ArchConfig a = tiny_arch();
  Params p = init_student(a, 41);
  const int64_t B = 2, S = 8, t = S / a.patch;
  Tensor images = random_images(B, S, 42);

  Tensor f = encode_map(p, a, images);

  GraphD g;
  ParamsT<double> pd = p.cast<double>();
  ParamIds ids = bind_params(g, pd, false);
  int rows = encode_rows(g, ids, a, g.input(images.cast<double>(), false), B, S);
  TensorD d = g.value(g.rows_to_nchw(rows, B, t, t));

  REQUIRE(d.shape == f.shape);
  double worst = 0;
  for (int64_t e = 0; e < f.numel(); ++e)
    worst = std::max(worst, std::fabs(static_cast<double>(f[e]) - d[e]));
  CHECK(worst < 1e-3);
  CHECK(worst > 0);  // they are genuinely different precisions
}

TEST_CASE("projector and predictor stacks are residual refinements") {
  ArchConfig a = tiny_arch();
  Params p = init_student(a, 51);
  const int64_t S = 8;
  Tensor images = random_images(2, S, 52);

  Tensor enc = encode_map(p, a, images);
  Tensor proj = forward_map(p, a, images, false);
  Tensor pred = forward_map(p, a, images, true);
  REQUIRE(proj.shape == enc.shape);
  REQUIRE(pred.shape == enc.shape);
  CHECK(proj.data != enc.data);
  CHECK(pred.data != proj.data);

  SUBCASE("zeroed predictor weights make the predictor an exact identity") {
    Params pz = p;
    zero_prefix(pz, "pred.");
    Tensor with = forward_map(pz, a, images, true);
    Tensor without = forward_map(pz, a, images, false);
    CHECK(with.data == without.data);
  }

  SUBCASE("zeroed projector weights make the projector an exact identity") {
    Params pz = p;
    zero_prefix(pz, "proj.");
    Tensor projected = forward_map(pz, a, images, false);
    Tensor encoded = encode_map(pz, a, images);
    CHECK(projected.data == encoded.data);
  }
}

TEST_CASE("rotation logits come from pooled encoder features") {
  ArchConfig a = tiny_arch();
  Params p = init_student(a, 61);
  Tensor images = random_images(3, 8, 62);

  Tensor logits = rot_logits_value(p, a, images);
  REQUIRE(logits.shape == std::vector<int64_t>{3, 4});
  CHECK(logits.all_finite());

  Tensor again = rot_logits_value(p, a, images);
  CHECK(again.data == logits.data);

  // Per-item pathway: batch output equals singleton outputs.
  for (int64_t b = 0; b < 3; ++b) {
    Tensor one({1, 3, 8, 8});
    std::copy(images.ptr() + b * 3 * 64, images.ptr() + (b + 1) * 3 * 64, one.ptr());
    Tensor lone = rot_logits_value(p, a, one);
    for (int64_t c = 0; c < 4; ++c) CHECK(lone[c] == logits[b * 4 + c]);
  }

  CHECK_THROWS_AS(rot_logits_value(p, a, Tensor({2, 2})), std::invalid_argument);
}

TEST_CASE("bound parameters train only when marked trainable") {
  ArchConfig a = tiny_arch();
  Params p = init_student(a, 71);
  ParamsT<double> pd = p.cast<double>();

  GraphD g;
  ParamIds student_ids = bind_params(g, pd, true);
  ParamIds frozen_ids = bind_params(g, pd, false);
  CHECK(student_ids.size() == pd.count());
  CHECK(frozen_ids.size() == pd.count());

  int loss = g.mean_all(student_ids.at("enc.embed.w"));
  g.backward(loss);
  CHECK(g.grad(student_ids.at("enc.embed.w")).numel() ==
        pd.at("enc.embed.w").numel());
  CHECK_THROWS_AS(g.grad(frozen_ids.at("enc.embed.w")), std::logic_error);
}
