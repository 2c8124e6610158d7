#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gtsa/config.hpp"
#include "gtsa/data.hpp"
#include "gtsa/losses.hpp"
#include "gtsa/model.hpp"

namespace gtsa {

struct StepMetrics {
  int64_t step = 0;  // 1-based index of the completed step
  double total = 0, overlap = 0, pc = 0, rp = 0;
  double momentum = 0, lr = 0;
};

/// Everything the optimizer owns. Checkpoints persist all of it, so a
/// resumed run is bit-identical to an uninterrupted one.
struct TrainState {
  Params student;
  Params teacher;  // encoder + projector only, EMA of the student
  Params adam_m;   // first moments, shaped like the student arrays
  Params adam_v;   // second moments
  int64_t step = 0;   // optimizer steps taken
  int64_t epoch = 0;  // completed epochs
  double momentum = 0;
};

TrainState init_state(const TrainConfig& cfg);

/// cfg.total_steps when set (must not exceed epochs * floor(n/batch)),
/// otherwise epochs * floor(n/batch). Throws when the budget is zero.
int64_t plan_total_steps(const TrainConfig& cfg, int64_t n_images);

/// Peak base_lr * batch_size/256; linear warmup (cfg.warmup_steps, or 10%
/// of total when negative) then cosine decay to zero.
double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg);

/// One step's fully assembled, augmentation-complete inputs. Pure function
/// of (cfg, data, batch indices, epoch, step-in-epoch): per-sample view
/// seeds are hash(seed, epoch, sample position).
struct StepInputs {
  int G = 0, L = 0;
  int64_t B = 0;
  std::vector<Tensor> student_views;  // G+L stacks (B,3,S,S), rotation applied
  std::vector<Tensor> teacher_views;  // G stacks, rotation undone
  std::vector<std::vector<int64_t>> rot_labels;            // [view][item]
  std::vector<std::vector<std::vector<OverlapRegion>>> regions;  // [g][view][item]
};

StepInputs assemble_inputs(const TrainConfig& cfg, const Dataset& data,
                           const std::vector<int64_t>& batch, int64_t epoch,
                           int64_t step_in_epoch);

/// Builds the differentiable total loss on bound student parameters.
/// teacher_maps are constants (stop-gradient): the teacher pathway output
/// per global view. Exposed so gradcheck and tests drive the same graph.
template <typename T>
TotalIds build_total_graph(Graph<T>& g, const ParamIds& ids, const ArchConfig& arch,
                           const TrainConfig& cfg, const StepInputs& in,
                           const std::vector<TensorT<T>>& teacher_maps);

/// Teacher forward, student forward/backward, AdamW update (beta1 0.9,
/// beta2 0.999, eps 1e-8, decoupled weight decay on matrices only, optional
/// global-norm clip), then the EMA teacher update with momentum_at(step).
/// Aborts with the offending term's name on a non-finite loss.
StepMetrics train_step(TrainState& state, const TrainConfig& cfg, const StepInputs& in,
                       int64_t total_steps);

/// Epoch loop with a seeded shuffle per epoch. Writes out_dir/metrics.csv
/// (header step,loss_total,loss_overlap,loss_pc,loss_rp,momentum,lr, one row
/// per step), a checkpoint every cfg.ckpt_every epochs, and final.gtsa.
/// With resume, continues from that state (epoch boundary required) and the
/// csv covers only the resumed steps.
TrainState run_pretrain(const TrainConfig& cfg, const Dataset& data, const std::string& out_dir,
                        const TrainState* resume = nullptr);

/// Single-file archive: text manifest (format version, config text, scalar
/// state, array directory) + raw little-endian f32 data. save -> load ->
/// save is byte-identical.
void save_checkpoint(const TrainState& state, const TrainConfig& cfg, const std::string& path);

struct Checkpoint {
  TrainState state;
  TrainConfig cfg;
};

/// Bit-exact inverse of save_checkpoint. Version mismatch, truncation, and
/// array names unknown to the config's architecture are explicit errors.
Checkpoint load_checkpoint(const std::string& path);

struct GradcheckGroup {
  std::string name;
  double max_rel_err = 0;
  int checked = 0;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  double max_rel_err = 0;
  bool pass = false;  // every group under 1e-4
};

/// Central finite differences (h = 1e-5) against the analytic gradient of
/// the full training loss, in 64-bit, on every trainable array (a fixed-seed
/// subsample of 200 scalars for larger arrays). Teacher arrays do not
/// appear: they are constants.
GradcheckReport gradcheck(const TrainConfig& cfg, uint64_t seed);

/// Small configuration sized for gradcheck (dim 8, depth 1, 4x4 maps).
TrainConfig gradcheck_default_config();

}  // namespace gtsa
