#pragma once

#include <functional>
#include <vector>

#include "gtsa/tensor.hpp"
#include "gtsa/types.hpp"

namespace gtsa {

/// Guard added to each norm in every cosine-similarity denominator, so a
/// zero vector yields cosine 0 instead of a division error.
inline constexpr double kCosineNormEps = 1e-8;

/// Eagerly evaluated reverse-mode tape. Each op computes its value at
/// creation and records a closure that scatters gradients to its parents;
/// backward() replays the tape in reverse. Instantiated for float (training)
/// and double (finite-difference verification).
///
/// Layout conventions used across ops:
///   rows:  token matrices (B*N, D), row index ordered (batch, y, x)
///   nchw:  feature maps (B, D, h, w)
/// Ids are indices into the tape; values are immutable once created.
template <typename T>
class Graph {
 public:
  using Tn = TensorT<T>;

  /// Leaf tensor. requires_grad marks trainable parameters; everything else
  /// (images, teacher outputs) enters with false and is skipped in backward.
  int input(Tn value, bool requires_grad);

  // ---- dense algebra ----
  int linear(int x, int w, int b);  // (R,K)@(K,C)+b -> (R,C); b = -1 omits the bias
  int add(int a, int b);            // same shape
  int scale(int x, double c);
  int gelu(int x);                            // exact erf form
  int layernorm(int x, int gamma, int beta);  // over the last dim, eps 1e-5
  int softmax(int x);                         // over the last dim, stable
  int softmax_ce_mean(int logits, std::vector<int64_t> labels);  // (B,C) -> (1)

  // ---- batched matmul over P independent planes ----
  // a viewed as P matrices (M,K) stacked along rows; same for b.
  int bmm_nt(int a, int b, int64_t P, int64_t M, int64_t N, int64_t K);  // a(P*M,K) b(P*N,K) -> (P*M,N)
  int bmm_nn(int a, int b, int64_t P, int64_t M, int64_t K, int64_t N);  // a(P*M,K) b(P*K,N) -> (P*M,N)

  // ---- layout permutations ----
  int heads_split(int x, int64_t B, int64_t N, int64_t H);  // (B*N,D) -> (B*H*N, D/H)
  int heads_merge(int x, int64_t B, int64_t N, int64_t H);  // inverse of heads_split
  int rows_to_nchw(int x, int64_t B, int64_t h, int64_t w);
  int nchw_to_rows(int x);
  int extract_patches(int images, int64_t patch);  // (B,3,S,S) -> (B*N, 3*p*p)
  int im2col3(int x, int64_t B, int64_t h, int64_t w);  // rows -> (B*h*w, 9D), zero pad 1

  // ---- geometric ops on (B,D,h,w) maps ----
  int roi_align_batch(int map, std::vector<Rect> rects, int out_h, int out_w);
  int rotate_map_batch(int map, std::vector<int> ks);  // per-item CCW quarter turns

  // ---- reductions and selections ----
  int gap_rows(int x, int64_t B, int64_t N);  // (B*N,D) -> (B,D) spatial mean
  int gather_rows(int x, std::vector<int64_t> idx);
  int cosine_rows(int a, int b);  // (R,D) x (R,D) -> (R), eps 1e-8 on each norm
  int mean_all(int x);            // -> (1)
  int weighted_sum(std::vector<int> xs, std::vector<double> ws);  // scalars -> (1)

  /// Seeds d(loss)=1 and replays the tape. loss must be shape (1).
  void backward(int loss);

  const Tn& value(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }
  const Tn& grad(int id) const;
  bool requires_grad(int id) const { return nodes_.at(static_cast<size_t>(id)).needs_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tn value;
    Tn grad;  // allocated in backward()
    bool needs_grad = false;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;

  int push(Tn value, bool needs_grad, std::function<void()> back);
  Node& node(int id) { return nodes_.at(static_cast<size_t>(id)); }
  Tn& grad_buf(int id) { return nodes_.at(static_cast<size_t>(id)).grad; }
  void check2d(int id, const char* op) const;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace gtsa
