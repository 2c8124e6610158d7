#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gtsa/graph.hpp"
#include "gtsa/tensor.hpp"

namespace gtsa {

struct ArchConfig {
  int patch = 8;
  int dim = 64;
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  bool encoder_norm = true;  // final layernorm after the blocks
  int proj_blocks = 2;
  int pred_blocks = 1;
};

/// Named parameter arrays in a fixed creation order; the order is the
/// checkpoint layout, so it must never depend on runtime state.
template <typename T>
struct ParamsT {
  std::vector<std::string> names;
  std::vector<TensorT<T>> tensors;

  int find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }
  TensorT<T>& at(const std::string& name) {
    int i = find(name);
    if (i < 0) throw std::invalid_argument("params: no array named " + name);
    return tensors[static_cast<size_t>(i)];
  }
  const TensorT<T>& at(const std::string& name) const {
    int i = find(name);
    if (i < 0) throw std::invalid_argument("params: no array named " + name);
    return tensors[static_cast<size_t>(i)];
  }
  TensorT<T>& add(const std::string& name, std::vector<int64_t> shape) {
    if (find(name) >= 0) throw std::invalid_argument("params: duplicate array " + name);
    names.push_back(name);
    tensors.emplace_back(std::move(shape));
    return tensors.back();
  }
  size_t count() const { return names.size(); }
  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.all_finite()) return false;
    return true;
  }
  template <typename U>
  ParamsT<U> cast() const {
    ParamsT<U> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

using Params = ParamsT<float>;

/// Student parameters: encoder + projector + predictor + rotation head.
/// Weight matrices are truncated normal (std 0.02), biases zero, layernorm
/// gains one. Deterministic in (arch, seed).
Params init_student(const ArchConfig& arch, uint64_t seed);

/// Teacher = exact copy of the student's shared sub-network (enc.* and
/// proj.*); it owns no predictor and no rotation head.
Params make_teacher(const Params& student);

/// theta_t <- m * theta_t + (1-m) * theta_s on every teacher array. The one
/// EMA code path used by training and by the drift tests.
void ema_update(Params& teacher, const Params& student, double m);

/// Cosine ramp from m0 at step 0 to 1 at total_steps.
double momentum_at(int64_t step, int64_t total_steps, double m0);

using ParamIds = std::unordered_map<std::string, int>;

/// Registers every array as a graph input; requires_grad marks the student.
template <typename T>
ParamIds bind_params(Graph<T>& g, const ParamsT<T>& p, bool requires_grad);

/// 2-D sincos position table (h*w, D), row order (y, x). D % 4 == 0.
template <typename T>
TensorT<T> sincos_pe(int64_t h, int64_t w, int64_t D);

/// ViT trunk on an image batch node (B,3,S,S): patchify -> linear embed ->
/// fixed 2-D sincos positions -> pre-norm attention/MLP blocks -> optional
/// final norm. Returns token rows (B*N, D), N = (S/patch)^2.
template <typename T>
int encode_rows(Graph<T>& g, const ParamIds& ids, const ArchConfig& arch, int images,
                int64_t B, int64_t S);

/// n_blocks residual conv blocks (3x3 conv -> layernorm -> GELU -> +x) under
/// the given name prefix ("proj" or "pred"); spatial size is preserved.
template <typename T>
int conv_stack_rows(Graph<T>& g, const ParamIds& ids, const std::string& prefix, int n_blocks,
                    int x, int64_t B, int64_t h, int64_t w);

/// GAP -> linear(D,D) -> GELU -> layernorm -> linear(D,4) on encoder rows.
template <typename T>
int rot_logits_rows(Graph<T>& g, const ParamIds& ids, int enc_rows, int64_t B, int64_t N);

/// Value-level encoder (the probe contract): images (B,3,S,S) -> (B,D,h,w).
Tensor encode_map(const Params& p, const ArchConfig& arch, const Tensor& images);

/// Full value-level student/teacher pathway output (predictor for the
/// student pathway when with_predictor, projector output otherwise).
Tensor forward_map(const Params& p, const ArchConfig& arch, const Tensor& images,
                   bool with_predictor);

/// Value-level rotation-head logits: images (B,3,S,S) -> (B,4).
Tensor rot_logits_value(const Params& p, const ArchConfig& arch, const Tensor& images);

}  // namespace gtsa
