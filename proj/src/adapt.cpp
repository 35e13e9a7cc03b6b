#include "key2mesh/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "key2mesh/body_ops.hpp"
#include "key2mesh/error.hpp"
#include "key2mesh/pretrain.hpp"

namespace k2m {
namespace {

Tensor eval_features(Mlp& F, const Tensor& input) {
  Graph g;
  Rng unused(0);
  return F.forward(g, g.constant(input), Mode::Eval, unused).value();
}

struct Decoded {
  Var rot;
  Var beta;
};

Decoded decode_head(Var raw, std::size_t num_joints) {
  return {ops::decode_rot6d(ops::slice_cols(raw, 0, 6 * num_joints)),
          ops::slice_cols(raw, 6 * num_joints, 6 * num_joints + kNumBetas)};
}

// Target 2D term. Frames with fewer than 2 visible keypoints are masked out.
Var target_l2d(const BodyModel& model, const FixedCamera& cam, Var rot, Var beta,
               const Batch& target, std::size_t* skipped) {
  Tensor vis = target.vis;
  Tensor scale = target.scale;
  const std::size_t k = vis.cols();
  std::size_t n_skipped = 0;
  for (std::size_t r = 0; r < target.size; ++r) {
    double visible = 0.0;
    for (std::size_t i = 0; i < k; ++i) visible += vis(r, i);
    if (visible < 2.0 || !(scale[r] > 0.0)) {
      for (std::size_t i = 0; i < k; ++i) vis(r, i) = 0.0;
      scale[r] = 1.0;
      ++n_skipped;
    }
  }
  if (skipped) *skipped = n_skipped;
  const Var X = ops::body_keypoints(model, rot, beta, false);
  const Var x = ops::project_normalized(cam, X, Tensor({target.size, 3}), target.center, scale,
                                        ops::kLossMinDepth);
  return ops::l1_loss(x, target.input, &vis);
}

Json step_json(const AdaptStepLog& s) {
  return {{"step", s.step},   {"L_wd_critic", s.wd_critic}, {"L_grad", s.grad_penalty},
          {"L_2D_t", s.kp2d}, {"L_wd_F", s.wd_f},           {"L_reg", s.reg},
          {"L_DA", s.total},  {"skipped_frames", s.skipped}};
}

}  // namespace

void AdaptConfig::validate() const {
  if (weights.kp2d < 0 || weights.wd < 0 || weights.reg < 0) {
    throw Error(ErrorCode::Config, "adaptation weights must be >= 0");
  }
  if (k_critic < 1) throw Error(ErrorCode::Config, "k_critic must be >= 1");
  if (!(gamma >= 0.0)) throw Error(ErrorCode::Config, "gamma must be >= 0");
  if (!(lr >= 0.0)) throw Error(ErrorCode::Config, "lr must be >= 0");
  if (batch < 2) throw Error(ErrorCode::Config, "batch must be >= 2");
  if (!(selection_fraction >= 0.0 && selection_fraction < 1.0)) {
    throw Error(ErrorCode::Config, "selection_fraction must lie in [0, 1)");
  }
  if (!(source_aug.occlusion >= 0.0 && source_aug.occlusion < 1.0)) {
    throw Error(ErrorCode::Config, "occlusion must lie in [0, 1)");
  }
}

Json to_json(const AdaptConfig& c) {
  return {{"w5", c.weights.kp2d},
          {"w6", c.weights.wd},
          {"w7", c.weights.reg},
          {"gamma", c.gamma},
          {"k_critic", c.k_critic},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"seed", c.seed},
          {"select_every", c.select_every},
          {"selection_fraction", c.selection_fraction},
          {"source_aug",
           {{"yaw_range_deg", c.source_aug.yaw_range_deg},
            {"pitch_range_deg", c.source_aug.pitch_range_deg},
            {"roll_range_deg", c.source_aug.roll_range_deg},
            {"occlusion", c.source_aug.occlusion},
            {"jitter_px", c.source_aug.jitter_px}}}};
}

AdaptConfig adapt_config_from_json(const Json& j) {
  AdaptConfig c;
  try {
    c.weights.kp2d = j.value("w5", c.weights.kp2d);
    c.weights.wd = j.value("w6", c.weights.wd);
    c.weights.reg = j.value("w7", c.weights.reg);
    c.gamma = j.value("gamma", c.gamma);
    c.k_critic = j.value("k_critic", c.k_critic);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.seed = j.value("seed", c.seed);
    c.select_every = j.value("select_every", c.select_every);
    c.selection_fraction = j.value("selection_fraction", c.selection_fraction);
    if (j.contains("source_aug")) {
      const Json& a = j.at("source_aug");
      c.source_aug.yaw_range_deg = a.value("yaw_range_deg", c.source_aug.yaw_range_deg);
      c.source_aug.pitch_range_deg = a.value("pitch_range_deg", c.source_aug.pitch_range_deg);
      c.source_aug.roll_range_deg = a.value("roll_range_deg", c.source_aug.roll_range_deg);
      c.source_aug.occlusion = a.value("occlusion", c.source_aug.occlusion);
      c.source_aug.jitter_px = a.value("jitter_px", c.source_aug.jitter_px);
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Config, std::string("adapt config: ") + e.what());
  }
  c.validate();
  return c;
}

Var wasserstein_estimate(Graph& g, Mlp& D, Var phi_s, Var phi_t) {
  if (phi_s.value().rows() == 0 || phi_t.value().rows() == 0) {
    throw Error(ErrorCode::DegenerateBatch, "wasserstein estimate needs non-empty batches");
  }
  Rng unused(0);
  const Var ds = D.forward(g, phi_s, Mode::Eval, unused);
  const Var dt = D.forward(g, phi_t, Mode::Eval, unused);
  return ops::sub(ops::mean(ds), ops::mean(dt));
}

Var gradient_penalty(Graph& g, Mlp& D, const Tensor& phi_s, const Tensor& phi_t, Rng& rng) {
  if (phi_s.shape() != phi_t.shape() || phi_s.rank() != 2 || phi_s.rows() == 0) {
    throw Error(ErrorCode::Dimension, "gradient penalty needs equal non-empty feature batches, got " +
                                          shape_string(phi_s.shape()) + " and " +
                                          shape_string(phi_t.shape()));
  }
  const std::size_t B = phi_s.rows(), d = phi_s.cols();
  std::vector<std::size_t> order_s(B), order_t(B);
  std::iota(order_s.begin(), order_s.end(), std::size_t{0});
  std::iota(order_t.begin(), order_t.end(), std::size_t{0});
  std::shuffle(order_s.begin(), order_s.end(), rng.engine());
  std::shuffle(order_t.begin(), order_t.end(), rng.engine());
  Tensor mixed({B, d});
  for (std::size_t r = 0; r < B; ++r) {
    const double u = rng.uniform();
    for (std::size_t c = 0; c < d; ++c) {
      mixed(r, c) = u * phi_s(order_s[r], c) + (1.0 - u) * phi_t(order_t[r], c);
    }
  }
  Rng unused(0);
  const Var x = g.leaf(std::move(mixed));
  const Var out = D.forward(g, x, Mode::Eval, unused);
  const Var grad = ops::input_gradient(out, x);
  return ops::mean(ops::square(ops::add_scalar(ops::row_norm(grad), -1.0)));
}

CriticStats critic_step(Mlp& D, Adam& opt, const Tensor& phi_s, const Tensor& phi_t, double gamma,
                        Rng& rng) {
  Graph g;
  const Var wd = wasserstein_estimate(g, D, g.constant(phi_s), g.constant(phi_t));
  const Var gp = gradient_penalty(g, D, phi_s, phi_t, rng);
  // Ascent on wd - gamma * gp as descent on its negation.
  const Var loss = ops::sub(ops::scale(gp, gamma), wd);
  CriticStats s{wd.value().item(), gp.value().item(), -loss.value().item()};
  if (!std::isfinite(s.objective)) {
    throw Error(ErrorCode::NonFinite, "non-finite critic objective (L_wd " + std::to_string(s.wd) +
                                          ", L_grad " + std::to_string(s.grad_penalty) + ")");
  }
  opt.zero_grad();
  g.backward(loss);
  opt.step();
  return s;
}

DaLossVars da_losses(Graph& g, Mlp& F, Mlp& F_pt, Mlp& H, Mlp& D, const BodyModel& model,
                     const FixedCamera& cam, const Batch& target, const Tensor& phi_s,
                     const AdaptWeights& w) {
  if (H.trainable() || F_pt.trainable()) {
    throw Error(ErrorCode::Contract, "H and F_pt must be frozen during adaptation");
  }
  Rng unused(0);
  const Tensor phi_bar = eval_features(F_pt, target.input);
  const Var phi_t = F.forward(g, g.constant(target.input), Mode::Eval, unused);
  DaLossVars l;
  l.reg = ops::mean(ops::row_norm(ops::sub(phi_t, g.constant(phi_bar))));
  const Var raw = H.forward(g, phi_t, Mode::Eval, unused);
  const Decoded pred = decode_head(raw, model.num_joints);
  l.kp2d = target_l2d(model, cam, pred.rot, pred.beta, target, &l.skipped);
  // D's parameters enter as constants so only F receives gradient.
  const bool d_trainable = D.trainable();
  D.set_trainable(false);
  l.wd = wasserstein_estimate(g, D, g.constant(phi_s), phi_t);
  D.set_trainable(d_trainable);
  l.total = ops::add(ops::add(ops::scale(l.kp2d, w.kp2d), ops::scale(l.wd, w.wd)),
                     ops::scale(l.reg, w.reg));
  return l;
}

MetricsReport evaluate_samples(Mlp& F, Mlp& H, const BodyModel& model,
                               const std::vector<DetectionSample>& samples) {
  std::vector<DetectionSample> labeled;
  for (const DetectionSample& s : samples) {
    if (s.has_ground_truth) labeled.push_back(s);
  }
  if (labeled.empty()) throw Error(ErrorCode::Validation, "no samples with ground truth");
  const Batch b = make_batch(labeled);
  const Prediction p = predict_chunked(F, H, b.input);
  const std::size_t K = model.num_joints;
  Tensor gt_rot({labeled.size(), 9 * K});
  Tensor gt_beta({labeled.size(), kNumBetas});
  for (std::size_t r = 0; r < labeled.size(); ++r) {
    const std::vector<double> rot = pose_to_matrices(labeled[r].theta.span(), K);
    std::copy(rot.begin(), rot.end(), gt_rot.data() + r * 9 * K);
    std::copy(labeled[r].beta.data(), labeled[r].beta.data() + kNumBetas,
              gt_beta.data() + r * kNumBetas);
  }
  return evaluate_bodies(model, p.rot, p.beta, gt_rot, gt_beta);
}

double mean_target_l2d(Mlp& F, Mlp& H, const BodyModel& model, const FixedCamera& cam,
                       const std::vector<DetectionSample>& samples) {
  if (samples.empty()) throw Error(ErrorCode::DegenerateBatch, "no target samples");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t start = 0; start < samples.size(); start += 512) {
    const std::size_t stop = std::min(samples.size(), start + 512);
    const Batch b = make_batch(std::span(samples).subspan(start, stop - start));
    const Prediction p = predict(F, H, b.input);
    Graph g;
    const Var l = target_l2d(model, cam, g.constant(p.rot), g.constant(p.beta), b, nullptr);
    total += l.value().item() * static_cast<double>(b.size);
    n += b.size;
  }
  return total / static_cast<double>(n);
}

Mlp prepare_adaptation(Networks& nets) {
  nets.H.set_trainable(false);
  nets.F.set_trainable(true);
  nets.D.set_trainable(true);
  return nets.F.clone_frozen("F_pt");
}

AdaptResult run_adapt(Networks& nets, Mlp& F_pt, const BodyModel& model, const FixedCamera& cam,
                      const MocapSet& source, const std::vector<DetectionSample>& target,
                      const std::vector<DetectionSample>* selection, const AdaptConfig& cfg,
                      const AdaptOutputs& out) {
  cfg.validate();
  source.validate();
  if (F_pt.trainable() || nets.H.trainable()) {
    throw Error(ErrorCode::Contract, "F_pt and H must be frozen before adaptation");
  }
  if (nets.config.num_keypoints != model.num_keypoints || nets.config.num_joints != model.num_joints) {
    throw Error(ErrorCode::Dimension, "network and body model disagree on k or K");
  }
  if (source.size() == 0) throw Error(ErrorCode::Validation, "empty source mocap");

  // Selection: labeled set by PA-MPJPE, otherwise a held-out target slice by 2D error.
  std::vector<DetectionSample> train_target;
  std::vector<DetectionSample> held;
  const bool labeled = selection != nullptr && !selection->empty();
  if (labeled) {
    train_target = target;
  } else {
    const std::size_t start = holdout_start(target.size(), cfg.selection_fraction);
    train_target.assign(target.begin(), target.begin() + static_cast<std::ptrdiff_t>(start));
    held.assign(target.begin() + static_cast<std::ptrdiff_t>(start), target.end());
  }
  if (train_target.size() < 2) throw Error(ErrorCode::Validation, "fewer than 2 target frames");

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
    save_checkpoint(path, nets, &F_pt, out.config_echo, cfg.seed, step);
    return path;
  };

  Adam opt_f(nets.F.parameters(), AdamConfig{.lr = cfg.lr});
  Adam opt_d(nets.D.parameters(), AdamConfig{.lr = cfg.lr});
  const bool train_critic = cfg.weights.wd > 0.0;

  AdaptResult result;
  std::filesystem::path last_good;
  auto select = [&](std::int64_t step) {
    SelectionRecord rec;
    rec.step = step;
    if (labeled) {
      rec.criterion = "pa_mpjpe_mm";
      rec.value = evaluate_samples(nets.F, nets.H, model, *selection).mean_pa_mpjpe_mm;
    } else if (!held.empty()) {
      rec.criterion = "l2d_t";
      rec.value = mean_target_l2d(nets.F, nets.H, model, cam, held);
    } else {
      return;
    }
    last_good = save("last_good.k2mc", step);
    if (result.best_step < 0 || rec.value < result.best_value) {
      result.best_step = step;
      result.best_value = rec.value;
      rec.checkpoint = save("best.k2mc", step);
    }
    if (log) {
      *log << Json{{"step", step},
                   {"criterion", rec.criterion},
                   {"value", rec.value},
                   {"checkpoint", rec.checkpoint.string()}}
                  .dump()
           << '\n';
    }
    result.selections.push_back(rec);
  };
  select(0);

  const std::size_t n_target = train_target.size();
  const std::size_t n_source = source.size();
  std::vector<std::size_t> t_order(n_target), s_order(n_source);
  std::size_t s_pos = n_source;  // forces a source reshuffle on first use
  std::uint64_t s_round = 0;
  std::int64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(t_order.begin(), t_order.end(), std::size_t{0});
    Rng t_rng(derive_seed(cfg.seed, epoch, 0x5441'5247));
    std::shuffle(t_order.begin(), t_order.end(), t_rng.engine());
    for (std::size_t start = 0; start + 2 <= n_target; start += cfg.batch) {
      const std::size_t stop = std::min(n_target, start + cfg.batch);
      const std::size_t B = stop - start;
      std::vector<DetectionSample> tb;
      tb.reserve(B);
      for (std::size_t i = start; i < stop; ++i) tb.push_back(train_target[t_order[i]]);
      std::vector<TrainingPair> sb;
      sb.reserve(B);
      for (std::size_t i = 0; i < B; ++i) {
        if (s_pos == n_source) {
          std::iota(s_order.begin(), s_order.end(), std::size_t{0});
          Rng s_rng(derive_seed(cfg.seed, s_round, 0x5352'4345));
          std::shuffle(s_order.begin(), s_order.end(), s_rng.engine());
          s_pos = 0;
          ++s_round;
        }
        sb.push_back(make_pair_seeded(source, s_order[s_pos++], model, cam, cfg.source_aug,
                                      cfg.seed, s_round));
      }
      const Batch target_batch = make_batch(tb);
      const Batch source_batch = make_batch(sb);
      const Tensor phi_s = eval_features(F_pt, source_batch.input);

      AdaptStepLog entry;
      entry.step = step;
      if (train_critic) {
        const Tensor phi_t = eval_features(nets.F, target_batch.input);
        Rng gp_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step), 0x4752'4144));
        for (std::size_t c = 0; c < cfg.k_critic; ++c) {
          const CriticStats cs = critic_step(nets.D, opt_d, phi_s, phi_t, cfg.gamma, gp_rng);
          entry.wd_critic = cs.wd;
          entry.grad_penalty = cs.grad_penalty;
        }
      }

      Graph g;
      const DaLossVars l =
          da_losses(g, nets.F, F_pt, nets.H, nets.D, model, cam, target_batch, phi_s, cfg.weights);
      entry.kp2d = l.kp2d.value().item();
      entry.wd_f = l.wd.value().item();
      entry.reg = l.reg.value().item();
      entry.total = l.total.value().item();
      entry.skipped = l.skipped;
      if (!std::isfinite(entry.total)) {
        throw Error(ErrorCode::NonFinite,
                    "non-finite adaptation loss at step " + std::to_string(step) +
                        "; last good checkpoint: " +
                        (last_good.empty() ? std::string("none") : last_good.string()));
      }
      opt_f.zero_grad();
      g.backward(l.total);
      opt_f.step();
      result.history.push_back(entry);
      if (log) *log << step_json(entry).dump() << '\n';
      ++step;
      if (cfg.select_every > 0 && step % static_cast<std::int64_t>(cfg.select_every) == 0) {
        select(step);
      }
    }
  }
  if (result.selections.empty() || result.selections.back().step != step) select(step);
  save("final.k2mc", step);
  return result;
}

}  // namespace k2m
