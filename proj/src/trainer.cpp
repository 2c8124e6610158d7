#include "gtsa/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gtsa/augment.hpp"
#include "gtsa/geometry.hpp"
#include "gtsa/rng.hpp"
#include "gtsa/threading.hpp"

namespace gtsa {

namespace {

constexpr const char* kCkptMagic = "gtsa-checkpoint 1";
constexpr double kPi = 3.141592653589793;

void copy_chw(Tensor& stack, int64_t b, const ImageF& im) {
  const int64_t S = im.w;
  float* out = stack.ptr() + b * 3 * S * S;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) out[(c * S + y) * S + x] = im.px(int(x), int(y))[c];
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void append_f32_le(std::string& out, const float* p, int64_t n) {
  const size_t base = out.size();
  out.resize(base + static_cast<size_t>(n) * 4);
  for (int64_t i = 0; i < n; ++i) {
    uint32_t u;
    std::memcpy(&u, p + i, 4);
    out[base + static_cast<size_t>(i) * 4 + 0] = static_cast<char>(u & 0xff);
    out[base + static_cast<size_t>(i) * 4 + 1] = static_cast<char>((u >> 8) & 0xff);
    out[base + static_cast<size_t>(i) * 4 + 2] = static_cast<char>((u >> 16) & 0xff);
    out[base + static_cast<size_t>(i) * 4 + 3] = static_cast<char>((u >> 24) & 0xff);
  }
}

void read_f32_le(const std::string& blob, size_t off, float* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    const size_t base = off + static_cast<size_t>(i) * 4;
    const uint32_t u = (static_cast<uint32_t>(static_cast<unsigned char>(blob[base])) |
                        (static_cast<uint32_t>(static_cast<unsigned char>(blob[base + 1])) << 8) |
                        (static_cast<uint32_t>(static_cast<unsigned char>(blob[base + 2])) << 16) |
                        (static_cast<uint32_t>(static_cast<unsigned char>(blob[base + 3])) << 24));
    std::memcpy(p + i, &u, 4);
  }
}

struct Section {
  const char* name;
  const Params* params;
};

std::vector<Section> sections_of(const TrainState& st) {
  return {{"student", &st.student},
          {"teacher", &st.teacher},
          {"adam_m", &st.adam_m},
          {"adam_v", &st.adam_v}};
}

struct MutSection {
  const char* name;
  Params* params;
};

std::vector<MutSection> sections_of(TrainState& st) {
  return {{"student", &st.student},
          {"teacher", &st.teacher},
          {"adam_m", &st.adam_m},
          {"adam_v", &st.adam_v}};
}

/// Cursor-based line reader over the in-memory archive.
struct Reader {
  const std::string& buf;
  const std::string& path;
  size_t pos = 0;

  std::string line() {
    const size_t nl = buf.find('\n', pos);
    if (nl == std::string::npos) throw std::runtime_error(path + ": truncated checkpoint");
    std::string r = buf.substr(pos, nl - pos);
    pos = nl + 1;
    return r;
  }
  std::string bytes(size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error(path + ": truncated checkpoint");
    std::string r = buf.substr(pos, n);
    pos += n;
    return r;
  }
};

}  // namespace

TrainState init_state(const TrainConfig& cfg) {
  validate_config(cfg);
  TrainState st;
  st.student = init_student(arch_of(cfg), cfg.seed);
  st.teacher = make_teacher(st.student);
  st.adam_m.names = st.student.names;
  for (const Tensor& t : st.student.tensors) st.adam_m.tensors.push_back(Tensor::zeros_like(t));
  st.adam_v = st.adam_m;
  st.momentum = cfg.m0;
  return st;
}

int64_t plan_total_steps(const TrainConfig& cfg, int64_t n_images) {
  const int64_t per_epoch = n_images / cfg.batch_size;
  if (per_epoch <= 0) throw std::invalid_argument("pretrain: dataset smaller than one batch");
  const int64_t by_epochs = per_epoch * cfg.epochs;
  if (cfg.total_steps > 0) {
    if (cfg.total_steps > by_epochs)
      throw std::invalid_argument("pretrain: total_steps exceeds epochs * steps_per_epoch");
    return cfg.total_steps;
  }
  return by_epochs;
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
  const double peak = cfg.base_lr * cfg.batch_size / 256.0;
  int64_t warm = cfg.warmup_steps >= 0 ? cfg.warmup_steps : total_steps / 10;
  if (warm > total_steps) warm = total_steps;
  if (step < warm) return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (total_steps <= warm) return peak;
  const double prog =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return peak * 0.5 * (1.0 + std::cos(kPi * prog));
}

StepInputs assemble_inputs(const TrainConfig& cfg, const Dataset& data,
                           const std::vector<int64_t>& batch, int64_t epoch,
                           int64_t step_in_epoch) {
  if (batch.empty()) throw std::invalid_argument("assemble_inputs: empty batch");
  const AugmentConfig aug = augment_of(cfg);
  const int G = cfg.n_global, L = cfg.n_local, V = G + L;
  const int64_t B = static_cast<int64_t>(batch.size());

  std::vector<ViewSet> sets(static_cast<size_t>(B));
  parallel_for(0, B, [&](int64_t i) {
    const ImageU8& img = data.images.at(static_cast<size_t>(batch[static_cast<size_t>(i)]));
    const uint64_t s = hash_mix(cfg.seed, static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(step_in_epoch * B + i));
    sets[static_cast<size_t>(i)] = sample_view_set(img, aug, s);
  });

  StepInputs in;
  in.G = G;
  in.L = L;
  in.B = B;
  in.student_views.resize(static_cast<size_t>(V));
  in.teacher_views.resize(static_cast<size_t>(G));
  in.rot_labels.assign(static_cast<size_t>(V),
                       std::vector<int64_t>(static_cast<size_t>(B), 0));
  for (int v = 0; v < V; ++v) {
    const int64_t S = v < G ? cfg.global_size : cfg.local_size;
    Tensor stack({B, 3, S, S});
    for (int64_t b = 0; b < B; ++b) {
      const View& view = sets[static_cast<size_t>(b)].views[static_cast<size_t>(v)];
      copy_chw(stack, b, view.image);
      in.rot_labels[static_cast<size_t>(v)][static_cast<size_t>(b)] = view.params.rot.k;
    }
    in.student_views[static_cast<size_t>(v)] = std::move(stack);
  }
  for (int gi = 0; gi < G; ++gi) {
    const int64_t S = cfg.global_size;
    Tensor stack({B, 3, S, S});
    for (int64_t b = 0; b < B; ++b) {
      const View& view = sets[static_cast<size_t>(b)].views[static_cast<size_t>(gi)];
      copy_chw(stack, b, rotate_image(view.image, view.params.rot.inverse()));
    }
    in.teacher_views[static_cast<size_t>(gi)] = std::move(stack);
  }
  in.regions.assign(static_cast<size_t>(G),
                    std::vector<std::vector<OverlapRegion>>(static_cast<size_t>(V)));
  for (int gi = 0; gi < G; ++gi)
    for (int v = 0; v < V; ++v) {
      if (v == gi) continue;
      std::vector<OverlapRegion> regs(static_cast<size_t>(B));
      for (int64_t b = 0; b < B; ++b) {
        const ViewSet& vs = sets[static_cast<size_t>(b)];
        ViewParams tv = vs.views[static_cast<size_t>(gi)].params;
        tv.rot = RotIndex(0);
        regs[static_cast<size_t>(b)] = overlap_region(
            vs.views[static_cast<size_t>(v)].params, tv, cfg.patch, cfg.patch);
        if (!regs[static_cast<size_t>(b)].valid)
          throw std::runtime_error("assemble_inputs: views without overlap");
      }
      in.regions[static_cast<size_t>(gi)][static_cast<size_t>(v)] = std::move(regs);
    }
  return in;
}

template <typename T>
TotalIds build_total_graph(Graph<T>& g, const ParamIds& ids, const ArchConfig& arch,
                           const TrainConfig& cfg, const StepInputs& in,
                           const std::vector<TensorT<T>>& teacher_maps) {
  const int V = in.G + in.L;
  if (static_cast<int>(in.student_views.size()) != V ||
      static_cast<int>(teacher_maps.size()) != in.G)
    throw std::invalid_argument("build_total_graph: view count mismatch");
  const LossFlags flags{cfg.loss_overlap, cfg.loss_pc, cfg.loss_rp};
  const LossWeights w{cfg.alpha, cfg.beta};

  std::vector<int> srows(static_cast<size_t>(V), -1), smap(static_cast<size_t>(V), -1);
  std::vector<int> ce_ids;
  for (int v = 0; v < V; ++v) {
    const Tensor& im = in.student_views[static_cast<size_t>(v)];
    const int64_t S = im.dim(2), t = S / arch.patch;
    const int img = g.input(im.template cast<T>(), false);
    const int enc = encode_rows(g, ids, arch, img, in.B, S);
    if (flags.rp)
      ce_ids.push_back(g.softmax_ce_mean(rot_logits_rows(g, ids, enc, in.B, t * t),
                                         in.rot_labels[static_cast<size_t>(v)]));
    int x = conv_stack_rows(g, ids, "proj", arch.proj_blocks, enc, in.B, t, t);
    x = conv_stack_rows(g, ids, "pred", arch.pred_blocks, x, in.B, t, t);
    srows[static_cast<size_t>(v)] = x;
    smap[static_cast<size_t>(v)] = g.rows_to_nchw(x, in.B, t, t);
  }

  std::vector<int> tmap(static_cast<size_t>(in.G), -1), trow(static_cast<size_t>(in.G), -1);
  for (int gi = 0; gi < in.G; ++gi) {
    tmap[static_cast<size_t>(gi)] = g.input(teacher_maps[static_cast<size_t>(gi)], false);
    if (flags.pc) trow[static_cast<size_t>(gi)] = g.nchw_to_rows(tmap[static_cast<size_t>(gi)]);
  }

  std::vector<int> ov_ids, pc_ids;
  for (int gi = 0; gi < in.G; ++gi)
    for (int v = 0; v < V; ++v) {
      if (v == gi) continue;
      if (flags.overlap)
        ov_ids.push_back(build_overlap_pair(g, smap[static_cast<size_t>(v)],
                                            tmap[static_cast<size_t>(gi)],
                                            in.regions[static_cast<size_t>(gi)][static_cast<size_t>(v)],
                                            cfg.pool_size));
      if (flags.pc)
        pc_ids.push_back(build_patch_corr_pair(g, srows[static_cast<size_t>(v)],
                                               trow[static_cast<size_t>(gi)], in.B, cfg.match_k));
    }
  return combine_total(g, ov_ids, pc_ids, ce_ids, w, flags);
}

StepMetrics train_step(TrainState& state, const TrainConfig& cfg, const StepInputs& in,
                       int64_t total_steps) {
  if (in.B <= 0) throw std::invalid_argument("train_step: empty batch");
  if (state.step >= total_steps)
    throw std::invalid_argument("train_step: step budget exhausted");
  const ArchConfig arch = arch_of(cfg);

  std::vector<Tensor> tmaps;
  tmaps.reserve(static_cast<size_t>(in.G));
  for (int gi = 0; gi < in.G; ++gi)
    tmaps.push_back(
        forward_map(state.teacher, arch, in.teacher_views[static_cast<size_t>(gi)], false));

  Graph<float> g;
  const ParamIds ids = bind_params(g, state.student, true);
  const TotalIds t = build_total_graph<float>(g, ids, arch, cfg, in, tmaps);

  StepMetrics m;
  m.overlap = g.value(t.overlap)[0];
  m.pc = g.value(t.pc)[0];
  m.rp = g.value(t.rp)[0];
  m.total = g.value(t.total)[0];
  const auto check = [&](double v, const char* name) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite ") + name + " at step " +
                               std::to_string(state.step + 1));
  };
  check(m.overlap, "loss_overlap");
  check(m.pc, "loss_pc");
  check(m.rp, "loss_rp");
  check(m.total, "loss_total");

  g.backward(t.total);

  const size_t n_arrays = state.student.count();
  std::vector<const Tensor*> grads(n_arrays);
  for (size_t i = 0; i < n_arrays; ++i) grads[i] = &g.grad(ids.at(state.student.names[i]));

  double gscale = 1.0;
  if (cfg.clip_norm > 0) {
    double sq = 0;
    for (const Tensor* gr : grads)
      for (const float v : gr->data) sq += static_cast<double>(v) * v;
    const double gn = std::sqrt(sq);
    if (gn > cfg.clip_norm) gscale = cfg.clip_norm / gn;
  }

  const double lr = lr_at(state.step, total_steps, cfg);
  const int64_t tstep = state.step + 1;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(tstep));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(tstep));
  for (size_t i = 0; i < n_arrays; ++i) {
    Tensor& p = state.student.tensors[i];
    Tensor& mm = state.adam_m.tensors[i];
    Tensor& vv = state.adam_v.tensors[i];
    const Tensor& gr = *grads[i];
    // Decoupled weight decay applies to matrices only, never to biases or
    // normalization gains.
    const double wd = p.ndim() >= 2 ? cfg.weight_decay : 0.0;
    for (int64_t j = 0; j < p.numel(); ++j) {
      const double gj = static_cast<double>(gr[j]) * gscale;
      const double mj = b1 * mm[j] + (1 - b1) * gj;
      const double vj = b2 * vv[j] + (1 - b2) * gj * gj;
      mm[j] = static_cast<float>(mj);
      vv[j] = static_cast<float>(vj);
      const double upd = (mj / bc1) / (std::sqrt(vj / bc2) + eps) + wd * p[j];
      p[j] = static_cast<float>(p[j] - lr * upd);
    }
  }

  const double mom = momentum_at(state.step, total_steps, cfg.m0);
  ema_update(state.teacher, state.student, mom);
  state.step += 1;
  state.momentum = mom;
  m.step = state.step;
  m.momentum = mom;
  m.lr = lr;
  return m;
}

TrainState run_pretrain(const TrainConfig& cfg, const Dataset& data, const std::string& out_dir,
                        const TrainState* resume) {
  validate_config(cfg);
  if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
  const int64_t n = static_cast<int64_t>(data.count());
  const int64_t per_epoch = n / cfg.batch_size;
  const int64_t total = plan_total_steps(cfg, n);

  TrainState state = resume ? *resume : init_state(cfg);
  if (resume && state.step != state.epoch * per_epoch)
    throw std::runtime_error("pretrain: resume checkpoint is not at an epoch boundary");
  if (state.step > total) throw std::runtime_error("pretrain: checkpoint beyond step budget");

  std::filesystem::create_directories(out_dir);
  std::ofstream csv(out_dir + "/metrics.csv", std::ios::binary);
  if (!csv) throw std::runtime_error(out_dir + ": cannot write metrics.csv");
  csv << "step,loss_total,loss_overlap,loss_pc,loss_rp,momentum,lr\n";

  for (int64_t epoch = state.epoch; epoch < cfg.epochs && state.step < total; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(hash_mix(cfg.seed, 0x73687566ull, static_cast<uint64_t>(epoch)));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle.below(i + 1))]);

    for (int64_t s = 0; s + cfg.batch_size <= n && state.step < total; s += cfg.batch_size) {
      const std::vector<int64_t> idx(order.begin() + s, order.begin() + s + cfg.batch_size);
      const StepInputs in = assemble_inputs(cfg, data, idx, epoch, s / cfg.batch_size);
      const StepMetrics m = train_step(state, cfg, in, total);
      csv << m.step << ',' << fmt17(m.total) << ',' << fmt17(m.overlap) << ','
          << fmt17(m.pc) << ',' << fmt17(m.rp) << ',' << fmt17(m.momentum) << ','
          << fmt17(m.lr) << '\n';
    }
    state.epoch = epoch + 1;
    if (cfg.ckpt_every > 0 && state.epoch % cfg.ckpt_every == 0 && state.step < total) {
      char name[48];
      std::snprintf(name, sizeof(name), "/ckpt_epoch%04" PRId64 ".gtsa", state.epoch);
      save_checkpoint(state, cfg, out_dir + name);
    }
  }
  csv.close();
  if (!csv) throw std::runtime_error(out_dir + ": failed writing metrics.csv");
  save_checkpoint(state, cfg, out_dir + "/final.gtsa");
  return state;
}

void save_checkpoint(const TrainState& state, const TrainConfig& cfg, const std::string& path) {
  const std::string cfg_text = serialize_config(cfg);
  std::string dir;
  std::string data;
  int64_t count = 0;
  for (const Section& sec : sections_of(state))
    for (size_t i = 0; i < sec.params->count(); ++i) {
      const Tensor& t = sec.params->tensors[i];
      dir += sec.name;
      dir += '.';
      dir += sec.params->names[i];
      dir += " f32 ";
      dir += std::to_string(t.ndim());
      for (int d = 0; d < t.ndim(); ++d) dir += ' ' + std::to_string(t.dim(d));
      dir += ' ' + std::to_string(data.size());
      dir += '\n';
      append_f32_le(data, t.ptr(), t.numel());
      ++count;
    }

  std::string out;
  out += kCkptMagic;
  out += '\n';
  out += "config " + std::to_string(cfg_text.size()) + "\n";
  out += cfg_text;
  out += "step " + std::to_string(state.step) + "\n";
  out += "epoch " + std::to_string(state.epoch) + "\n";
  out += "momentum " + fmt17(state.momentum) + "\n";
  out += "arrays " + std::to_string(count) + "\n";
  out += dir;
  out += "data " + std::to_string(data.size()) + "\n";
  out += data;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.close();
  if (!f) throw std::runtime_error(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open checkpoint");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  Reader r{buf, path};

  if (r.line() != kCkptMagic)
    throw std::runtime_error(path + ": unsupported checkpoint version");

  const auto expect_word = [&](std::istringstream& is, const char* what) {
    std::string w;
    if (!(is >> w)) throw std::runtime_error(path + ": malformed checkpoint (" + what + ")");
    return w;
  };

  Checkpoint ck;
  {
    std::istringstream is(r.line());
    if (expect_word(is, "config") != "config")
      throw std::runtime_error(path + ": malformed checkpoint (config header)");
    size_t n = 0;
    is >> n;
    ck.cfg = parse_config(r.bytes(n));
  }
  ck.state = init_state(ck.cfg);
  {
    std::istringstream is(r.line());
    if (expect_word(is, "step") != "step" || !(is >> ck.state.step))
      throw std::runtime_error(path + ": malformed checkpoint (step)");
  }
  {
    std::istringstream is(r.line());
    if (expect_word(is, "epoch") != "epoch" || !(is >> ck.state.epoch))
      throw std::runtime_error(path + ": malformed checkpoint (epoch)");
  }
  {
    std::istringstream is(r.line());
    std::string v;
    if (expect_word(is, "momentum") != "momentum" || !(is >> v))
      throw std::runtime_error(path + ": malformed checkpoint (momentum)");
    ck.state.momentum = std::strtod(v.c_str(), nullptr);
  }

  int64_t count = 0;
  {
    std::istringstream is(r.line());
    if (expect_word(is, "arrays") != "arrays" || !(is >> count) || count < 0)
      throw std::runtime_error(path + ": malformed checkpoint (arrays)");
  }

  struct Entry {
    std::string name;
    std::vector<int64_t> shape;
    size_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    std::istringstream is(r.line());
    Entry e;
    std::string dtype;
    int ndim = 0;
    if (!(is >> e.name >> dtype >> ndim) || dtype != "f32" || ndim < 1)
      throw std::runtime_error(path + ": malformed array directory entry");
    e.shape.resize(static_cast<size_t>(ndim));
    for (int d = 0; d < ndim; ++d)
      if (!(is >> e.shape[static_cast<size_t>(d)]))
        throw std::runtime_error(path + ": malformed array directory entry");
    if (!(is >> e.offset)) throw std::runtime_error(path + ": malformed array directory entry");
    entries.push_back(std::move(e));
  }

  size_t data_size = 0;
  {
    std::istringstream is(r.line());
    if (expect_word(is, "data") != "data" || !(is >> data_size))
      throw std::runtime_error(path + ": malformed checkpoint (data header)");
  }
  if (buf.size() - r.pos < data_size)
    throw std::runtime_error(path + ": checkpoint data truncated");
  if (buf.size() - r.pos > data_size)
    throw std::runtime_error(path + ": trailing bytes after checkpoint data");
  const size_t data_base = r.pos;

  auto mut = sections_of(ck.state);
  std::vector<std::vector<bool>> filled;
  for (const MutSection& sec : mut)
    filled.emplace_back(sec.params->count(), false);

  for (const Entry& e : entries) {
    const size_t dot = e.name.find('.');
    if (dot == std::string::npos)
      throw std::runtime_error(path + ": unknown array name " + e.name);
    const std::string sec_name = e.name.substr(0, dot);
    const std::string arr_name = e.name.substr(dot + 1);
    bool placed = false;
    for (size_t si = 0; si < mut.size(); ++si) {
      if (sec_name != mut[si].name) continue;
      const int ai = mut[si].params->find(arr_name);
      if (ai < 0) throw std::runtime_error(path + ": unknown array name " + e.name);
      Tensor& t = mut[si].params->tensors[static_cast<size_t>(ai)];
      if (t.shape != e.shape)
        throw std::runtime_error(path + ": shape mismatch for " + e.name + ": file " +
                                 shape_str(e.shape) + " vs " + shape_str(t.shape));
      if (e.offset + static_cast<size_t>(t.numel()) * 4 > data_size)
        throw std::runtime_error(path + ": checkpoint data truncated");
      read_f32_le(buf, data_base + e.offset, t.ptr(), t.numel());
      filled[si][static_cast<size_t>(ai)] = true;
      placed = true;
      break;
    }
    if (!placed) throw std::runtime_error(path + ": unknown array name " + e.name);
  }
  for (size_t si = 0; si < mut.size(); ++si)
    for (size_t ai = 0; ai < filled[si].size(); ++ai)
      if (!filled[si][ai])
        throw std::runtime_error(path + ": missing array " + std::string(mut[si].name) + "." +
                                 mut[si].params->names[ai]);
  return ck;
}

TrainConfig gradcheck_default_config() {
  TrainConfig c;
  c.n_global = 2;
  c.n_local = 2;
  c.global_size = 16;
  c.local_size = 8;
  c.min_image = 8;
  c.patch = 4;
  c.dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.pool_size = 2;
  c.match_k = 4;
  c.batch_size = 2;
  c.image_size = 32;
  c.epochs = 1;
  return c;
}

GradcheckReport gradcheck(const TrainConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  const ArchConfig arch = arch_of(cfg);
  const Dataset data = synth_dataset(hash_mix(seed, 0x67646373ull), cfg.batch_size,
                                     cfg.image_size);
  std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
  std::iota(idx.begin(), idx.end(), 0);
  const StepInputs in = assemble_inputs(cfg, data, idx, 0, 0);

  const Params student_f = init_student(arch, cfg.seed);
  ParamsT<double> student = student_f.cast<double>();
  const Params teacher = make_teacher(student_f);
  std::vector<TensorD> tmaps;
  for (int gi = 0; gi < in.G; ++gi)
    tmaps.push_back(
        forward_map(teacher, arch, in.teacher_views[static_cast<size_t>(gi)], false)
            .cast<double>());

  GraphD ga;
  const ParamIds ids = bind_params(ga, student, true);
  const TotalIds tt = build_total_graph<double>(ga, ids, arch, cfg, in, tmaps);
  ga.backward(tt.total);

  const auto eval = [&](const ParamsT<double>& p) {
    GraphD g;
    const ParamIds pid = bind_params(g, p, false);
    const TotalIds t2 = build_total_graph<double>(g, pid, arch, cfg, in, tmaps);
    return g.value(t2.total)[0];
  };

  const double h = 1e-5;
  const int64_t max_samples = 200;
  GradcheckReport rep;
  Rng pick(hash_mix(seed, 0x70696b31ull));
  ParamsT<double> work = student;
  for (size_t ai = 0; ai < student.count(); ++ai) {
    const TensorD& ana = ga.grad(ids.at(student.names[ai]));
    TensorD& wt = work.tensors[ai];
    const int64_t n = wt.numel();
    std::vector<int64_t> sel(static_cast<size_t>(n));
    std::iota(sel.begin(), sel.end(), 0);
    if (n > max_samples) {
      for (int64_t i = 0; i < max_samples; ++i)
        std::swap(sel[static_cast<size_t>(i)],
                  sel[static_cast<size_t>(i + pick.below(n - i))]);
      sel.resize(static_cast<size_t>(max_samples));
    }
    GradcheckGroup grp{student.names[ai], 0.0, static_cast<int>(sel.size())};
    for (const int64_t j : sel) {
      const double save = wt[j];
      wt[j] = save + h;
      const double lp = eval(work);
      wt[j] = save - h;
      const double lm = eval(work);
      wt[j] = save;
      const double num = (lp - lm) / (2 * h);
      const double a = ana[j];
      // Floor 1e-6: central differences at h=1e-5 carry ~1e-11 of roundoff,
      // so near-zero gradients need an absolute scale or noise dominates.
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6});
      grp.max_rel_err = std::max(grp.max_rel_err, rel);
    }
    rep.max_rel_err = std::max(rep.max_rel_err, grp.max_rel_err);
    rep.groups.push_back(std::move(grp));
  }
  rep.pass = rep.max_rel_err < 1e-4;
  return rep;
}

template TotalIds build_total_graph<float>(Graph<float>&, const ParamIds&, const ArchConfig&,
                                           const TrainConfig&, const StepInputs&,
                                           const std::vector<TensorT<float>>&);
template TotalIds build_total_graph<double>(Graph<double>&, const ParamIds&, const ArchConfig&,
                                            const TrainConfig&, const StepInputs&,
                                            const std::vector<TensorT<double>>&);

}  // namespace gtsa
