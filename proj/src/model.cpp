#include "gtsa/model.hpp"

#include <cmath>

#include "gtsa/rng.hpp"

namespace gtsa {

namespace {

// Array registry shared by init and (via name prefix) the teacher copy.
// Creation order here IS the checkpoint order.
void declare_arrays(ParamsT<float>& p, const ArchConfig& a) {
  const int64_t D = a.dim, P = a.patch, H = a.mlp_ratio * a.dim;
  p.add("enc.embed.w", {3 * P * P, D});
  p.add("enc.embed.b", {D});
  for (int i = 0; i < a.depth; ++i) {
    const std::string b = "enc.blk" + std::to_string(i) + ".";
    p.add(b + "ln1.g", {D});
    p.add(b + "ln1.b", {D});
    p.add(b + "wq", {D, D});
    p.add(b + "bq", {D});
    p.add(b + "wk", {D, D});
    p.add(b + "bk", {D});
    p.add(b + "wv", {D, D});
    p.add(b + "bv", {D});
    p.add(b + "wo", {D, D});
    p.add(b + "bo", {D});
    p.add(b + "ln2.g", {D});
    p.add(b + "ln2.b", {D});
    p.add(b + "fc1.w", {D, H});
    p.add(b + "fc1.b", {H});
    p.add(b + "fc2.w", {H, D});
    p.add(b + "fc2.b", {D});
  }
  if (a.encoder_norm) {
    p.add("enc.norm.g", {D});
    p.add("enc.norm.b", {D});
  }
  auto conv_stack = [&](const std::string& prefix, int blocks) {
    for (int i = 0; i < blocks; ++i) {
      const std::string b = prefix + ".blk" + std::to_string(i) + ".";
      p.add(b + "conv.w", {9 * D, D});
      p.add(b + "conv.b", {D});
      p.add(b + "ln.g", {D});
      p.add(b + "ln.b", {D});
    }
  };
  conv_stack("proj", a.proj_blocks);
  conv_stack("pred", a.pred_blocks);
  p.add("rot.fc1.w", {D, D});
  p.add("rot.fc1.b", {D});
  p.add("rot.ln.g", {D});
  p.add("rot.ln.b", {D});
  p.add("rot.fc2.w", {D, 4});
  p.add("rot.fc2.b", {4});
}

bool is_gain(const std::string& name) {
  return name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
}

}  // namespace

Params init_student(const ArchConfig& a, uint64_t seed) {
  if (a.dim <= 0 || a.depth <= 0 || a.heads <= 0 || a.patch <= 0 || a.mlp_ratio <= 0 ||
      a.proj_blocks <= 0 || a.pred_blocks <= 0)
    throw std::invalid_argument("init_student: non-positive architecture dims");
  if (a.dim % a.heads != 0) throw std::invalid_argument("init_student: dim must divide by heads");
  if (a.dim % 4 != 0) throw std::invalid_argument("init_student: dim must divide by 4 (sincos)");
  Params p;
  declare_arrays(p, a);
  Rng rng(hash_mix(seed, 0x1417u));
  for (size_t i = 0; i < p.count(); ++i) {
    TensorT<float>& t = p.tensors[i];
    if (t.ndim() == 2) {
      for (float& v : t.data) v = static_cast<float>(rng.trunc_normal(0.02));
    } else {
      t.fill(is_gain(p.names[i]) ? 1.f : 0.f);
    }
  }
  return p;
}

Params make_teacher(const Params& student) {
  Params t;
  for (size_t i = 0; i < student.count(); ++i) {
    const std::string& n = student.names[i];
    if (n.rfind("enc.", 0) == 0 || n.rfind("proj.", 0) == 0) {
      t.names.push_back(n);
      t.tensors.push_back(student.tensors[i]);
    }
  }
  return t;
}

void ema_update(Params& teacher, const Params& student, double m) {
  if (m < 0 || m > 1) throw std::invalid_argument("ema_update: m outside [0,1]");
  const float fm = static_cast<float>(m), fs = static_cast<float>(1.0 - m);
  for (size_t i = 0; i < teacher.count(); ++i) {
    const TensorT<float>& s = student.at(teacher.names[i]);
    TensorT<float>& t = teacher.tensors[i];
    if (!t.same_shape(s)) throw std::invalid_argument("ema_update: shape mismatch on " + teacher.names[i]);
    float* tp = t.ptr();
    const float* sp = s.ptr();
    for (int64_t j = 0; j < t.numel(); ++j) tp[j] = fm * tp[j] + fs * sp[j];
  }
}

double momentum_at(int64_t step, int64_t total_steps, double m0) {
  if (total_steps <= 0) throw std::invalid_argument("momentum_at: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("momentum_at: step outside [0, total_steps]");
  const double phase = std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps));
  return 1.0 - (1.0 - m0) * (phase + 1.0) / 2.0;
}

template <typename T>
ParamIds bind_params(Graph<T>& g, const ParamsT<T>& p, bool requires_grad) {
  ParamIds ids;
  for (size_t i = 0; i < p.count(); ++i)
    ids[p.names[i]] = g.input(p.tensors[i], requires_grad);
  return ids;
}

template <typename T>
TensorT<T> sincos_pe(int64_t h, int64_t w, int64_t D) {
  if (D % 4 != 0) throw std::invalid_argument("sincos_pe: D must divide by 4");
  TensorT<T> pe({h * w, D});
  const int64_t half = D / 2, quarter = D / 4;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      T* row = pe.ptr() + (y * w + x) * D;
      for (int64_t i = 0; i < quarter; ++i) {
        const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
        row[i] = static_cast<T>(std::sin(y * omega));
        row[quarter + i] = static_cast<T>(std::cos(y * omega));
        row[half + i] = static_cast<T>(std::sin(x * omega));
        row[half + quarter + i] = static_cast<T>(std::cos(x * omega));
      }
    }
  return pe;
}

template <typename T>
int encode_rows(Graph<T>& g, const ParamIds& ids, const ArchConfig& a, int images,
                int64_t B, int64_t S) {
  if (S % a.patch != 0) throw std::invalid_argument("encode_rows: size not divisible by patch");
  const int64_t t = S / a.patch, N = t * t, D = a.dim, H = a.heads, dh = D / H;

  int x = g.linear(g.extract_patches(images, a.patch), ids.at("enc.embed.w"),
                   ids.at("enc.embed.b"));
  {
    TensorT<T> pe = sincos_pe<T>(t, t, D);
    TensorT<T> tiled({B * N, D});
    for (int64_t b = 0; b < B; ++b)
      std::copy(pe.data.begin(), pe.data.end(), tiled.data.begin() + b * N * D);
    x = g.add(x, g.input(std::move(tiled), false));
  }

  for (int i = 0; i < a.depth; ++i) {
    const std::string blk = "enc.blk" + std::to_string(i) + ".";
    auto id = [&](const char* n) { return ids.at(blk + n); };
    int ln1 = g.layernorm(x, id("ln1.g"), id("ln1.b"));
    int q = g.heads_split(g.linear(ln1, id("wq"), id("bq")), B, N, H);
    int k = g.heads_split(g.linear(ln1, id("wk"), id("bk")), B, N, H);
    int v = g.heads_split(g.linear(ln1, id("wv"), id("bv")), B, N, H);
    int attn = g.softmax(g.scale(g.bmm_nt(q, k, B * H, N, N, dh), 1.0 / std::sqrt(double(dh))));
    int ctx = g.heads_merge(g.bmm_nn(attn, v, B * H, N, N, dh), B, N, H);
    x = g.add(x, g.linear(ctx, id("wo"), id("bo")));
    int ln2 = g.layernorm(x, id("ln2.g"), id("ln2.b"));
    int mlp = g.linear(g.gelu(g.linear(ln2, id("fc1.w"), id("fc1.b"))), id("fc2.w"), id("fc2.b"));
    x = g.add(x, mlp);
  }
  if (ids.count("enc.norm.g")) x = g.layernorm(x, ids.at("enc.norm.g"), ids.at("enc.norm.b"));
  return x;
}

template <typename T>
int conv_stack_rows(Graph<T>& g, const ParamIds& ids, const std::string& prefix, int n_blocks,
                    int x, int64_t B, int64_t h, int64_t w) {
  for (int i = 0; i < n_blocks; ++i) {
    const std::string blk = prefix + ".blk" + std::to_string(i) + ".";
    int y = g.linear(g.im2col3(x, B, h, w), ids.at(blk + "conv.w"), ids.at(blk + "conv.b"));
    y = g.gelu(g.layernorm(y, ids.at(blk + "ln.g"), ids.at(blk + "ln.b")));
    x = g.add(x, y);
  }
  return x;
}

template <typename T>
int rot_logits_rows(Graph<T>& g, const ParamIds& ids, int enc_rows, int64_t B, int64_t N) {
  int v = g.gap_rows(enc_rows, B, N);
  v = g.gelu(g.linear(v, ids.at("rot.fc1.w"), ids.at("rot.fc1.b")));
  v = g.layernorm(v, ids.at("rot.ln.g"), ids.at("rot.ln.b"));
  return g.linear(v, ids.at("rot.fc2.w"), ids.at("rot.fc2.b"));
}

Tensor encode_map(const Params& p, const ArchConfig& arch, const Tensor& images) {
  if (images.ndim() != 4) throw std::invalid_argument("encode_map: expected (B,3,S,S)");
  const int64_t B = images.dim(0), S = images.dim(2);
  Graph<float> g;
  ParamIds ids = bind_params(g, p, false);
  int rows = encode_rows(g, ids, arch, g.input(images, false), B, S);
  const int64_t t = S / arch.patch;
  return g.value(g.rows_to_nchw(rows, B, t, t));
}

Tensor forward_map(const Params& p, const ArchConfig& arch, const Tensor& images,
                   bool with_predictor) {
  if (images.ndim() != 4) throw std::invalid_argument("forward_map: expected (B,3,S,S)");
  const int64_t B = images.dim(0), S = images.dim(2);
  const int64_t t = S / arch.patch;
  Graph<float> g;
  ParamIds ids = bind_params(g, p, false);
  int rows = encode_rows(g, ids, arch, g.input(images, false), B, S);
  rows = conv_stack_rows(g, ids, "proj", arch.proj_blocks, rows, B, t, t);
  if (with_predictor) rows = conv_stack_rows(g, ids, "pred", arch.pred_blocks, rows, B, t, t);
  return g.value(g.rows_to_nchw(rows, B, t, t));
}

Tensor rot_logits_value(const Params& p, const ArchConfig& arch, const Tensor& images) {
  if (images.ndim() != 4) throw std::invalid_argument("rot_logits_value: expected (B,3,S,S)");
  const int64_t B = images.dim(0), S = images.dim(2);
  const int64_t t = S / arch.patch;
  Graph<float> g;
  ParamIds ids = bind_params(g, p, false);
  int rows = encode_rows(g, ids, arch, g.input(images, false), B, S);
  return g.value(rot_logits_rows(g, ids, rows, B, t * t));
}

template ParamIds bind_params<float>(Graph<float>&, const ParamsT<float>&, bool);
template ParamIds bind_params<double>(Graph<double>&, const ParamsT<double>&, bool);
template TensorT<float> sincos_pe<float>(int64_t, int64_t, int64_t);
template TensorT<double> sincos_pe<double>(int64_t, int64_t, int64_t);
template int encode_rows<float>(Graph<float>&, const ParamIds&, const ArchConfig&, int, int64_t, int64_t);
template int encode_rows<double>(Graph<double>&, const ParamIds&, const ArchConfig&, int, int64_t, int64_t);
template int conv_stack_rows<float>(Graph<float>&, const ParamIds&, const std::string&, int, int, int64_t, int64_t, int64_t);
template int conv_stack_rows<double>(Graph<double>&, const ParamIds&, const std::string&, int, int, int64_t, int64_t, int64_t);
template int rot_logits_rows<float>(Graph<float>&, const ParamIds&, int, int64_t, int64_t);
template int rot_logits_rows<double>(Graph<double>&, const ParamIds&, int, int64_t, int64_t);

}  // namespace gtsa
