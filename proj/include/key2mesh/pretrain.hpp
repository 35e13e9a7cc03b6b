#pragma once
// Supervised training of F and H on synthesised pairs.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <vector>

#include "key2mesh/body_model.hpp"
#include "key2mesh/camera.hpp"
#include "key2mesh/datagen.hpp"
#include "key2mesh/metrics.hpp"
#include "key2mesh/network.hpp"

namespace k2m {

struct LossWeights {
  double theta = 100.0;
  double beta = 100.0;
  double kp2d = 50.0;
  double kp3d = 50.0;
};

struct PretrainConfig {
  LossWeights weights;
  double lr = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch = 256;
  std::uint64_t seed = 0;
  AugConfig aug;
  std::size_t eval_every = 500;     // steps; 0 disables periodic evaluation
  double holdout_fraction = 0.05;   // trailing share of mocap indices
  std::size_t eval_max = 1000;      // cap on held-out frames per evaluation
  void validate() const;
};

Json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const Json& j);

struct LossBreakdown {
  double theta = 0.0;
  double beta = 0.0;
  double kp2d = 0.0;
  double kp3d = 0.0;
  double total = 0.0;
};

struct LossVars {
  Var theta;
  Var beta;
  Var kp2d;
  Var kp3d;
  Var total;

  LossBreakdown values() const;
};

/// Weighted sum of the four L1 terms for a pair batch. Rotations are
/// compared as matrix entries, keypoints root-centred, and the 2D term
/// projects the prediction at the true root with the pair's normalisation,
/// masked to visible keypoints.
LossVars pretrain_loss(const BodyModel& model, const FixedCamera& cam, const HeadOutput& pred,
                       const Batch& batch, const LossWeights& w);

struct EvalRecord {
  std::int64_t step = 0;
  double pa_mpjpe_mm = 0.0;
};

struct PretrainResult {
  std::vector<LossBreakdown> history;  // one entry per step
  std::vector<EvalRecord> evals;
  double best_pa_mpjpe_mm = 0.0;
  std::int64_t best_step = -1;
  std::size_t train_size = 0;
  std::size_t holdout_size = 0;
};

/// Indices [0, train) train, [train, N) held out.
std::size_t holdout_start(std::size_t n, double fraction);

/// Fixed held-out pairs (independent of the training stream).
std::vector<TrainingPair> holdout_pairs(const MocapSet& mocap, const BodyModel& model,
                                        const FixedCamera& cam, const PretrainConfig& cfg);

/// Eval-mode metrics of (F, H) on pairs.
MetricsReport evaluate_pairs(Mlp& F, Mlp& H, const BodyModel& model,
                             const std::vector<TrainingPair>& pairs);

/// Metrics of the constant rest-pose predictor (identity rotations, zero shape).
MetricsReport rest_pose_baseline(const BodyModel& model, const std::vector<TrainingPair>& pairs);

struct PretrainOutputs {
  std::filesystem::path out_dir;  // empty: no files written
  std::ostream* log = nullptr;    // JSON lines; overrides out_dir/log.jsonl
  Json config_echo = Json::object();
};

/// Trains `nets` in place (F and H; D untouched).
PretrainResult run_pretrain(Networks& nets, const BodyModel& model, const MocapSet& mocap,
                            const FixedCamera& cam, const PretrainConfig& cfg,
                            const PretrainOutputs& out = {});

}  // namespace k2m
