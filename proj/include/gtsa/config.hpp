#pragma once

#include <cstdint>
#include <string>

#include "gtsa/augment.hpp"
#include "gtsa/model.hpp"

namespace gtsa {

/// Every tunable of a training run. Config files are `key = value` lines
/// with `#` comments; keys are exactly the field names below and unknown
/// keys are errors. Defaults are the desk-scale recipe.
struct TrainConfig {
  // views
  int n_global = 2;
  int n_local = 4;
  int global_size = 64;
  int local_size = 32;
  double global_area_min = 0.5;  // >= 0.5 guarantees pairwise global overlap
  double global_area_max = 1.0;
  double local_area_min = 0.05;
  double local_area_max = 0.4;
  int min_image = 32;

  // photometric
  double jitter_strength = 0.5;
  double p_grayscale = 0.2;
  double p_blur_global = 0.5;
  double p_blur_local = 0.1;
  double p_noise = 0.1;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double noise_sigma = 0.02;

  // architecture
  int patch = 8;
  int dim = 64;
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  bool encoder_norm = true;
  int proj_blocks = 2;
  int pred_blocks = 1;
  int pool_size = 4;
  int match_k = 16;

  // loss
  double alpha = 0.5;
  double beta = 0.5;
  bool loss_overlap = true;
  bool loss_pc = true;
  bool loss_rp = true;

  // optimization
  double base_lr = 5e-4;    // scaled by batch_size/256 at runtime
  double weight_decay = 0.04;
  double clip_norm = 0.0;   // 0 disables gradient clipping
  int64_t warmup_steps = -1;  // -1: 10% of total steps
  int epochs = 32;
  int64_t total_steps = 0;  // 0: epochs * floor(n / batch_size)
  int batch_size = 16;
  double m0 = 0.996;

  // run
  int image_size = 64;
  uint64_t seed = 0;
  int ckpt_every = 0;  // epochs between checkpoints; 0 = final only
};

/// Parses `key = value` text. Throws std::invalid_argument naming the first
/// unknown key, malformed line, or violated invariant.
TrainConfig parse_config(const std::string& text);

/// Reads and parses a config file; errors name the path.
TrainConfig load_config_file(const std::string& path);

/// Canonical text form: every key once, fixed order, doubles printed
/// round-trip exactly, so serialize(parse(serialize(c))) == serialize(c).
std::string serialize_config(const TrainConfig& cfg);

/// Throws std::invalid_argument on any violated invariant (non-positive
/// counts, sizes not divisible by patch, dim not divisible by 4 and heads,
/// area fractions out of range, alpha/beta < 0, ...).
void validate_config(const TrainConfig& cfg);

AugmentConfig augment_of(const TrainConfig& cfg);
ArchConfig arch_of(const TrainConfig& cfg);

}  // namespace gtsa
