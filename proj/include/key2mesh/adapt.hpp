#pragma once
// Adversarial adaptation of the feature extractor to unlabeled target
// keypoints: a Wasserstein critic on features, then F updates under the
// target 2D reprojection, critic and feature-regularisation terms.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <vector>

#include "key2mesh/body_model.hpp"
#include "key2mesh/camera.hpp"
#include "key2mesh/datagen.hpp"
#include "key2mesh/metrics.hpp"
#include "key2mesh/network.hpp"
#include "key2mesh/optim.hpp"

namespace k2m {

struct AdaptWeights {
  double kp2d = 10.0;  // w5
  double wd = 0.1;     // w6
  double reg = 20.0;   // w7
};

struct AdaptConfig {
  AdaptWeights weights;
  double gamma = 10.0;
  std::size_t k_critic = 3;
  double lr = 1e-4;
  std::size_t epochs = 5;
  std::size_t batch = 256;  // per domain
  std::uint64_t seed = 0;
  std::size_t select_every = 500;
  AugConfig source_aug;
  double selection_fraction = 0.05;  // held-out target share without a labeled set

  void validate() const;
};

Json to_json(const AdaptConfig& c);
AdaptConfig adapt_config_from_json(const Json& j);

/// mean D(phi_s) - mean D(phi_t). Throws DegenerateBatch on an empty side.
Var wasserstein_estimate(Graph& g, Mlp& D, Var phi_s, Var phi_t);

/// Mean over row pairs of (||grad D(u phi_s + (1 - u) phi_t)|| - 1)^2 with
/// one u ~ U(0, 1) per pair, after shuffling each side independently.
/// Differentiable with respect to D's parameters.
Var gradient_penalty(Graph& g, Mlp& D, const Tensor& phi_s, const Tensor& phi_t, Rng& rng);

struct CriticStats {
  double wd = 0.0;
  double grad_penalty = 0.0;
  double objective = 0.0;  // wd - gamma * grad_penalty, maximised
};

/// One Adam step on D maximising wd - gamma * penalty for fixed features.
/// Throws NonFinite when the objective is not finite.
CriticStats critic_step(Mlp& D, Adam& opt, const Tensor& phi_s, const Tensor& phi_t, double gamma,
                        Rng& rng);

struct DaLossVars {
  Var kp2d;
  Var wd;
  Var reg;
  Var total;
  std::size_t skipped = 0;  // frames with fewer than 2 visible keypoints
};

/// Target losses for F with D, H and F_pt held fixed. Features of both F
/// and F_pt are eval-mode. The 2D term places the un-centred prediction in
/// front of the fixed camera and normalises with each frame's parameters.
DaLossVars da_losses(Graph& g, Mlp& F, Mlp& F_pt, Mlp& H, Mlp& D, const BodyModel& model,
                     const FixedCamera& cam, const Batch& target, const Tensor& phi_s,
                     const AdaptWeights& w);

/// Eval-mode metrics of (F, H) on samples carrying ground truth.
MetricsReport evaluate_samples(Mlp& F, Mlp& H, const BodyModel& model,
                               const std::vector<DetectionSample>& samples);

/// Mean masked 2D reprojection error of (F, H) on target samples.
double mean_target_l2d(Mlp& F, Mlp& H, const BodyModel& model, const FixedCamera& cam,
                       const std::vector<DetectionSample>& samples);

struct AdaptStepLog {
  std::int64_t step = 0;
  double wd_critic = 0.0;
  double grad_penalty = 0.0;
  double kp2d = 0.0;
  double wd_f = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::size_t skipped = 0;
};

struct SelectionRecord {
  std::int64_t step = 0;
  std::string criterion;  // "pa_mpjpe_mm" or "l2d_t"
  double value = 0.0;
  std::filesystem::path checkpoint;
};

struct AdaptResult {
  std::vector<AdaptStepLog> history;
  std::vector<SelectionRecord> selections;
  std::int64_t best_step = -1;
  double best_value = 0.0;
};

struct AdaptOutputs {
  std::filesystem::path out_dir;
  std::ostream* log = nullptr;
  Json config_echo = Json::object();
};

/// Adapts nets.F in place. F_pt is the frozen pre-trained extractor and H
/// must be frozen; D is trained. Source inputs come from `source` through
/// the synthesis pipeline. Without a labeled `selection` set, the trailing
/// selection_fraction of `target` is held out and scored by its 2D error.
AdaptResult run_adapt(Networks& nets, Mlp& F_pt, const BodyModel& model, const FixedCamera& cam,
                      const MocapSet& source, const std::vector<DetectionSample>& target,
                      const std::vector<DetectionSample>* selection, const AdaptConfig& cfg,
                      const AdaptOutputs& out = {});

/// Freezes H and returns the frozen twin of nets.F.
Mlp prepare_adaptation(Networks& nets);

}  // namespace k2m
