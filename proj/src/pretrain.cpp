#include "key2mesh/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "key2mesh/body_ops.hpp"
#include "key2mesh/error.hpp"
#include "key2mesh/optim.hpp"

namespace k2m {
namespace {

constexpr std::uint64_t kHoldoutEpoch = 0xffff'ffff;

Json loss_json(std::int64_t step, const LossBreakdown& l) {
  return {{"step", step},      {"L_theta", l.theta}, {"L_beta", l.beta},
          {"L_2D", l.kp2d},    {"L_3D", l.kp3d},     {"L_total", l.total}};
}

Json aug_json(const AugConfig& a) {
  return {{"yaw_range_deg", a.yaw_range_deg}, {"pitch_range_deg", a.pitch_range_deg},
          {"roll_range_deg", a.roll_range_deg}, {"occlusion", a.occlusion},
          {"jitter_px", a.jitter_px}};
}

AugConfig aug_from_json(const Json& j) {
  AugConfig a;
  a.yaw_range_deg = j.value("yaw_range_deg", a.yaw_range_deg);
  a.pitch_range_deg = j.value("pitch_range_deg", a.pitch_range_deg);
  a.roll_range_deg = j.value("roll_range_deg", a.roll_range_deg);
  a.occlusion = j.value("occlusion", a.occlusion);
  a.jitter_px = j.value("jitter_px", a.jitter_px);
  return a;
}

}  // namespace

void PretrainConfig::validate() const {
  if (weights.theta < 0 || weights.beta < 0 || weights.kp2d < 0 || weights.kp3d < 0) {
    throw Error(ErrorCode::Config, "loss weights must be >= 0");
  }
  if (batch < 2) throw Error(ErrorCode::Config, "batch must be >= 2");
  if (!(lr >= 0.0)) throw Error(ErrorCode::Config, "lr must be >= 0");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw Error(ErrorCode::Config, "holdout_fraction must lie in [0, 1)");
  }
  if (!(aug.occlusion >= 0.0 && aug.occlusion < 1.0)) {
    throw Error(ErrorCode::Config, "occlusion must lie in [0, 1)");
  }
  if (!(aug.jitter_px >= 0.0)) throw Error(ErrorCode::Config, "jitter_px must be >= 0");
}

Json to_json(const PretrainConfig& c) {
  return {{"w1", c.weights.theta},
          {"w2", c.weights.beta},
          {"w3", c.weights.kp2d},
          {"w4", c.weights.kp3d},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"seed", c.seed},
          {"aug", aug_json(c.aug)},
          {"eval_every", c.eval_every},
          {"holdout_fraction", c.holdout_fraction},
          {"eval_max", c.eval_max}};
}

PretrainConfig pretrain_config_from_json(const Json& j) {
  PretrainConfig c;
  try {
    c.weights.theta = j.value("w1", c.weights.theta);
    c.weights.beta = j.value("w2", c.weights.beta);
    c.weights.kp2d = j.value("w3", c.weights.kp2d);
    c.weights.kp3d = j.value("w4", c.weights.kp3d);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.seed = j.value("seed", c.seed);
    if (j.contains("aug")) c.aug = aug_from_json(j.at("aug"));
    c.eval_every = j.value("eval_every", c.eval_every);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
    c.eval_max = j.value("eval_max", c.eval_max);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Config, std::string("pretrain config: ") + e.what());
  }
  c.validate();
  return c;
}

LossBreakdown LossVars::values() const {
  return {theta.value().item(), beta.value().item(), kp2d.value().item(), kp3d.value().item(),
          total.value().item()};
}

LossVars pretrain_loss(const BodyModel& model, const FixedCamera& cam, const HeadOutput& pred,
                       const Batch& batch, const LossWeights& w) {
  LossVars l;
  l.theta = ops::l1_loss(pred.rot, batch.rot);
  l.beta = ops::l1_loss(pred.beta, batch.beta);
  const Var X = ops::body_keypoints(model, pred.rot, pred.beta, true);
  l.kp3d = ops::l1_loss(X, batch.X);
  const Var x = ops::project_normalized(cam, X, batch.root, batch.center, batch.scale,
                                               ops::kLossMinDepth);
  l.kp2d = ops::l1_loss(x, batch.x_clean, &batch.vis);
  l.total = ops::add(ops::add(ops::scale(l.theta, w.theta), ops::scale(l.beta, w.beta)),
                     ops::add(ops::scale(l.kp2d, w.kp2d), ops::scale(l.kp3d, w.kp3d)));
  return l;
}

std::size_t holdout_start(std::size_t n, double fraction) {
  const auto held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  return n - std::min(held, n);
}

std::vector<TrainingPair> holdout_pairs(const MocapSet& mocap, const BodyModel& model,
                                        const FixedCamera& cam, const PretrainConfig& cfg) {
  const std::size_t n = mocap.size();
  const std::size_t start = holdout_start(n, cfg.holdout_fraction);
  const std::size_t stop = std::min(n, start + cfg.eval_max);
  std::vector<TrainingPair> out;
  out.reserve(stop - start);
  for (std::size_t i = start; i < stop; ++i) {
    out.push_back(make_pair_seeded(mocap, i, model, cam, cfg.aug, cfg.seed, kHoldoutEpoch));
  }
  return out;
}

MetricsReport evaluate_pairs(Mlp& F, Mlp& H, const BodyModel& model,
                             const std::vector<TrainingPair>& pairs) {
  if (pairs.empty()) return {};
  const Batch b = make_batch(pairs);
  const Prediction p = predict_chunked(F, H, b.input);
  return evaluate_bodies(model, p.rot, p.beta, b.rot, b.beta);
}

MetricsReport rest_pose_baseline(const BodyModel& model, const std::vector<TrainingPair>& pairs) {
  if (pairs.empty()) return {};
  const Batch b = make_batch(pairs);
  Tensor rot({b.size, 9 * model.num_joints});
  for (std::size_t r = 0; r < b.size; ++r) {
    for (std::size_t j = 0; j < model.num_joints; ++j) {
      const Mat3 id = identity3();
      std::copy(id.begin(), id.end(), rot.data() + r * 9 * model.num_joints + 9 * j);
    }
  }
  return evaluate_bodies(model, rot, Tensor({b.size, kNumBetas}), b.rot, b.beta);
}

PretrainResult run_pretrain(Networks& nets, const BodyModel& model, const MocapSet& mocap,
                            const FixedCamera& cam, const PretrainConfig& cfg,
                            const PretrainOutputs& out) {
  cfg.validate();
  mocap.validate();
  if (nets.config.num_keypoints != model.num_keypoints || nets.config.num_joints != model.num_joints) {
    throw Error(ErrorCode::Dimension, "network and body model disagree on k or K");
  }
  PretrainResult result;
  const std::size_t n_train = holdout_start(mocap.size(), cfg.holdout_fraction);
  if (n_train < 2) throw Error(ErrorCode::Config, "fewer than 2 training poses after holdout");
  result.train_size = n_train;
  const std::vector<TrainingPair> held = holdout_pairs(mocap, model, cam, cfg);
  result.holdout_size = held.size();

  std::ofstream log_file;
  std::ostream* log = out.log;
  if (log == nullptr && !out.out_dir.empty()) {
    std::filesystem::create_directories(out.out_dir);
    log_file.open(out.out_dir / "log.jsonl");
    if (!log_file) throw Error(ErrorCode::Io, "cannot write " + (out.out_dir / "log.jsonl").string());
    log = &log_file;
  }
  auto save = [&](const std::string& name, std::int64_t step) {
    if (out.out_dir.empty()) return std::filesystem::path();
    const auto path = out.out_dir / name;
    save_checkpoint(path, nets, nullptr, out.config_echo, cfg.seed, step);
    return path;
  };

  std::vector<Parameter*> params = nets.F.parameters();
  for (Parameter* p : nets.H.parameters()) params.push_back(p);
  Adam adam(params, AdamConfig{.lr = cfg.lr});

  std::filesystem::path last_good;
  auto evaluate = [&](std::int64_t step) {
    if (held.empty()) return;
    const double pa = evaluate_pairs(nets.F, nets.H, model, held).mean_pa_mpjpe_mm;
    result.evals.push_back({step, pa});
    if (log) *log << Json{{"step", step}, {"pa_mpjpe_mm", pa}}.dump() << '\n';
    last_good = save("last_good.k2mc", step);
    if (result.best_step < 0 || pa < result.best_pa_mpjpe_mm) {
      result.best_pa_mpjpe_mm = pa;
      result.best_step = step;
      save("best.k2mc", step);
    }
  };

  std::vector<std::size_t> order(n_train);
  std::int64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, epoch, 0x5348'5546));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    for (std::size_t start = 0; start + 2 <= n_train; start += cfg.batch) {
      const std::size_t stop = std::min(n_train, start + cfg.batch);
      std::vector<TrainingPair> pairs;
      pairs.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        pairs.push_back(make_pair_seeded(mocap, order[i], model, cam, cfg.aug, cfg.seed, epoch));
      }
      const Batch batch = make_batch(pairs);

      Graph g;
      Rng drop_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step), 0x4452'4f50));
      const Var phi = nets.features(g, g.constant(batch.input), Mode::Train, drop_rng);
      const HeadOutput head = nets.head(g, phi, Mode::Train, drop_rng);
      const LossVars loss = pretrain_loss(model, cam, head, batch, cfg.weights);
      const LossBreakdown lb = loss.values();
      if (!std::isfinite(lb.total)) {
        throw Error(ErrorCode::NonFinite,
                    "non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " +
                        (last_good.empty() ? std::string("none") : last_good.string()));
      }
      result.history.push_back(lb);
      if (log) *log << loss_json(step, lb).dump() << '\n';
      adam.zero_grad();
      g.backward(loss.total);
      adam.step();
      ++step;
      if (cfg.eval_every > 0 && step % static_cast<std::int64_t>(cfg.eval_every) == 0) evaluate(step);
    }
  }
  if (result.evals.empty() || result.evals.back().step != step) evaluate(step);
  save("final.k2mc", step);
  return result;
}

}  // namespace k2m
