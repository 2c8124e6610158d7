#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gtsa/config.hpp"
#include "gtsa/data.hpp"
#include "gtsa/model.hpp"

namespace gtsa {

/// Encoder contract the probe measures: float images (B,3,S,S) in [0,1] ->
/// feature map (B,D,h,w). Injectable so baselines and test oracles can be
/// measured without being part of this codebase.
using EncoderFn = std::function<Tensor(const Tensor&)>;

/// The trained encoder (no projector or predictor), as the sensitivity
/// experiment measures it.
EncoderFn student_encoder(Params student, ArchConfig arch);

/// Transform families, in fixed order: the index doubles as the seed stream.
extern const char* const kProbeFamilies[3];  // color_jitter, four_fold_rotation, crop_multicrop

struct ProbeResult {
  std::string family;
  double mean_variance = 0;
  int n_views = 0;
  int n_images = 0;
};

/// Mean output variance under one transform family: per image, n_views views
/// varying ONLY that family (crop_multicrop always emits 2 global + 8 local),
/// encoded and global-average-pooled to one vector each; unbiased per-
/// dimension variance across views, averaged over dimensions and images.
/// With transforms_enabled false every family degenerates to n_views
/// identical views, so the variance is exactly zero. View randomness is
/// keyed hash(seed, family index, image index, view index); when record is
/// given, the per-view ViewParams are appended per image for oracle
/// recomputation. Unknown family names are errors.
ProbeResult sensitivity(const EncoderFn& enc, const Dataset& data, const std::string& family,
                        int n_views, uint64_t seed, const TrainConfig& cfg,
                        bool transforms_enabled = true,
                        std::vector<std::vector<ViewParams>>* record = nullptr);

/// CSV with header family,mean_variance,n_views,n_images.
void write_probe_csv(const std::vector<ProbeResult>& results, const std::string& path);

struct MatchRecord {
  double sx = 0, sy = 0;  // student patch center
  double tx = 0, ty = 0;  // teacher patch center
  double sim = 0;
};

struct MatchExport {
  std::vector<MatchRecord> records;       // centers in source pixels
  std::vector<MatchRecord> view_records;  // same pairs in each view's pixel frame
  ImageF view_s, view_t;                  // the two sampled global views
};

/// Point companions of the rect mapper: crop translation and scaling plus
/// the view's quarter-turn rotation, each exactly invertible.
std::pair<double, double> source_to_view_point(const ViewParams& v, double sx, double sy);
std::pair<double, double> view_to_source_point(const ViewParams& v, double vx, double vy);

/// Samples two global views of the image, runs the student pathway on the
/// first and the teacher pathway on the second (unrotated) view, matches
/// patches top-K, and maps the retained patch centers back to source
/// coordinates. Record count is min(K, student patch count).
MatchExport export_matches(const Params& student, const Params& teacher, const ArchConfig& arch,
                           const TrainConfig& cfg, const ImageU8& image, int K, uint64_t seed);

/// Line-delimited records sx,sy,tx,ty,sim.
void write_match_csv(const MatchExport& m, const std::string& path);

/// Side-by-side views with lines connecting matched patch centers.
ImageU8 render_match_overlay(const MatchExport& m);

/// Fraction of n_views augmented holdout views whose four-fold rotation the
/// student's rotation head classifies correctly.
double rotation_accuracy(const Params& student, const ArchConfig& arch, const TrainConfig& cfg,
                         const Dataset& holdout, int n_views, uint64_t seed);

}  // namespace gtsa
