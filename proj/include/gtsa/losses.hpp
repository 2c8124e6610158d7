#pragma once

#include <vector>

#include "gtsa/geometry.hpp"
#include "gtsa/graph.hpp"
#include "gtsa/types.hpp"

namespace gtsa {

/// One retained correspondence: student patch p matched to its most
/// cosine-similar teacher patch pt.
struct MatchPair {
  int64_t p = 0;
  int64_t pt = 0;
  double sim = 0;
};

/// Per-image match list, sorted by similarity descending; ties broken by
/// lower student patch index. At most k entries.
struct MatchSet {
  std::vector<MatchPair> pairs;
  int k = 0;
};

struct LossWeights {
  double alpha = 0.5;  // patch-correspondence weight
  double beta = 0.5;   // rotation-prediction weight
};

/// Term switches for the ablation configurations.
struct LossFlags {
  bool overlap = true;
  bool pc = true;
  bool rp = true;
};

// ---------- value-level losses (direct loops; no tape) ----------

/// -(1/(B*T)) sum_i sum_t cos(Phi(z_i)_t, R(Phi(z~_i))_t), T = out^2.
/// regions holds one OverlapRegion per batch item (all must be valid).
template <typename T>
double overlap_loss(const FeatureMapT<T>& z, const FeatureMapT<T>& zt,
                    const std::vector<OverlapRegion>& regions, int out);

/// Same region applied to every batch item.
template <typename T>
double overlap_loss(const FeatureMapT<T>& z, const FeatureMapT<T>& zt,
                    const OverlapRegion& region, int out);

/// Mean softmax cross-entropy over the batch (log-sum-exp stable form).
template <typename T>
double rotation_loss(const TensorT<T>& logits, const std::vector<int64_t>& labels);

/// For each student patch, the argmax-cosine teacher patch; the K highest-
/// similarity pairs are retained per image. K is clamped to the student
/// patch count.
template <typename T>
std::vector<MatchSet> match_topk(const FeatureMapT<T>& z, const FeatureMapT<T>& zt, int K);

/// -(1/(B*K_eff)) sum over retained pairs of their cosine similarity.
template <typename T>
double patch_corr_loss(const FeatureMapT<T>& z, const FeatureMapT<T>& zt, int K);

struct TotalLoss {
  double total = 0, overlap = 0, pc = 0, rp = 0;
  int n_pairs = 0;  // G*(L+G) - G
  int n_views = 0;  // L + G
};

/// Multi-crop total: (1/(G(L+G)-G)) sum_g sum_{l!=g} l(z_l, z~_g)
///                 + alpha * (same normalizer) sum l_pc
///                 + beta * (1/(L+G)) sum_l l_rp.
/// student_maps: L+G maps, globals first; teacher_maps: G maps;
/// regions[g][l]: per-item OverlapRegions for the (student l, teacher g)
/// pair; rot_logits/rot_labels per view. Disabled terms report 0 and are
/// excluded from the weighted sum.
template <typename T>
TotalLoss total_loss(const std::vector<FeatureMapT<T>>& student_maps,
                     const std::vector<FeatureMapT<T>>& teacher_maps,
                     const std::vector<std::vector<std::vector<OverlapRegion>>>& regions,
                     const std::vector<TensorT<T>>& rot_logits,
                     const std::vector<std::vector<int64_t>>& rot_labels,
                     const LossWeights& w, const LossFlags& flags, int G, int L, int K, int pool);

// ---------- graph builders (the trainer's differentiable path) ----------

/// Overlap-alignment term for one (student view, teacher global) pair on
/// (B,D,h,w) map nodes.
template <typename T>
int build_overlap_pair(Graph<T>& g, int student_map, int teacher_map,
                       const std::vector<OverlapRegion>& regions, int pool);

/// Patch-correspondence term for one pair on token-row nodes (B*Ps, D) and
/// (B*Pt, D). Matching runs on current values; the selected indices enter
/// the tape as constants.
template <typename T>
int build_patch_corr_pair(Graph<T>& g, int student_rows, int teacher_rows, int64_t B, int K);

struct TotalIds {
  int total = -1, overlap = -1, pc = -1, rp = -1;
};

/// Averages the per-pair/per-view scalars and forms the weighted total.
/// Disabled terms become constant-zero nodes.
template <typename T>
TotalIds combine_total(Graph<T>& g, const std::vector<int>& overlap_ids,
                       const std::vector<int>& pc_ids, const std::vector<int>& rp_ids,
                       const LossWeights& w, const LossFlags& flags);

}  // namespace gtsa
