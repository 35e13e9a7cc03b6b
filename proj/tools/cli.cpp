#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "key2mesh/adapt.hpp"
#include "key2mesh/body_model.hpp"
#include "key2mesh/config.hpp"
#include "key2mesh/dataio.hpp"
#include "key2mesh/error.hpp"
#include "key2mesh/parallel.hpp"
#include "key2mesh/pretrain.hpp"
#include "key2mesh/simd/kernels.hpp"

namespace k2m {
namespace {

struct Common {
  std::string config_path;
  bool print_config = false;
  std::size_t threads = 0;
};

// Errors raised while reading inputs map to exit 2; the rest to exit 3.
bool is_validation(ErrorCode code) {
  switch (code) {
    case ErrorCode::Validation:
    case ErrorCode::Config:
    case ErrorCode::Parse:
    case ErrorCode::Io:
    case ErrorCode::BadMagic:
    case ErrorCode::Truncated:
    case ErrorCode::Dimension:
    case ErrorCode::Invariant:
      return true;
    default:
      return false;
  }
}

std::string pick(const std::string& flag, const std::string& fallback, const char* what) {
  const std::string& v = flag.empty() ? fallback : flag;
  if (v.empty()) throw Error(ErrorCode::Validation, std::string("missing ") + what);
  return v;
}

void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::Io, std::string(what) + " not found: " + path);
  }
}

void write_json(const std::filesystem::path& path, const Json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Networks nets_from(Checkpoint& c) { return std::move(c.nets); }

Tensor rows_to_axis_angle(const Tensor& rot, std::size_t K) {
  Tensor out({rot.rows(), K, 3});
  for (std::size_t r = 0; r < rot.rows(); ++r) {
    for (std::size_t j = 0; j < K; ++j) {
      Mat3 m;
      std::copy(rot.data() + r * 9 * K + 9 * j, rot.data() + r * 9 * K + 9 * j + 9, m.begin());
      const Vec3 a = matrix_to_axis_angle(m);
      for (int c = 0; c < 3; ++c) out[(r * K + j) * 3 + c] = a[c];
    }
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      const long v = std::stol(item);
      if (v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Error(ErrorCode::Validation, "bad batch size '" + item + "'");
    }
  }
  if (out.empty()) throw Error(ErrorCode::Validation, "no batch sizes given");
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Key2Mesh desk-scale pipeline"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "Run config JSON (defaults when omitted)");
  app.add_flag("--print-config", common.print_config, "Print the effective config and exit");
  app.add_option("--threads", common.threads, "Worker threads for evaluation (0: K2M_THREADS or 1)");

  // make-toy-model
  auto* c_toy = app.add_subcommand("make-toy-model", "Write a synthetic body model");
  long toy_seed = -1, toy_V = -1, toy_K = -1, toy_k = -1;
  std::string toy_out;
  c_toy->add_option("--seed", toy_seed);
  c_toy->add_option("--V", toy_V);
  c_toy->add_option("--K", toy_K);
  c_toy->add_option("--k", toy_k);
  c_toy->add_option("--out", toy_out)->required();

  // synth-mocap
  auto* c_mocap = app.add_subcommand("synth-mocap", "Sample synthetic poses and shapes");
  long mocap_seed = -1, mocap_n = -1;
  std::string mocap_model, mocap_out;
  c_mocap->add_option("--seed", mocap_seed);
  c_mocap->add_option("--n", mocap_n);
  c_mocap->add_option("--model", mocap_model);
  c_mocap->add_option("--out", mocap_out)->required();

  // make-target
  auto* c_target = app.add_subcommand("make-target", "Synthesise target-domain detections");
  std::string tg_mocap, tg_model, tg_out;
  long tg_begin = 0, tg_end = -1;
  bool tg_gt = false;
  c_target->add_option("--mocap", tg_mocap);
  c_target->add_option("--model", tg_model);
  c_target->add_option("--begin", tg_begin);
  c_target->add_option("--end", tg_end);
  c_target->add_flag("--with-ground-truth", tg_gt);
  c_target->add_option("--out", tg_out)->required();

  // pretrain
  auto* c_pre = app.add_subcommand("pretrain", "Supervised training on synthetic pairs");
  std::string pre_model, pre_mocap, pre_out;
  c_pre->add_option("--model", pre_model);
  c_pre->add_option("--mocap", pre_mocap);
  c_pre->add_option("--out-dir", pre_out)->required();

  // adapt
  auto* c_adapt = app.add_subcommand("adapt", "Domain adaptation on unlabeled detections");
  std::string ad_ckpt, ad_target, ad_out, ad_sel, ad_model, ad_mocap;
  c_adapt->add_option("--checkpoint", ad_ckpt);
  c_adapt->add_option("--target", ad_target);
  c_adapt->add_option("--selection-set", ad_sel);
  c_adapt->add_option("--model", ad_model);
  c_adapt->add_option("--mocap", ad_mocap, "Source mocap for the synthetic source stream");
  c_adapt->add_option("--out-dir", ad_out)->required();

  // eval
  auto* c_eval = app.add_subcommand("eval", "Metrics against ground-truth bodies");
  std::string ev_ckpt, ev_model, ev_det, ev_synth, ev_report;
  c_eval->add_option("--checkpoint", ev_ckpt);
  c_eval->add_option("--model", ev_model);
  auto* ev_det_opt = c_eval->add_option("--detections", ev_det);
  auto* ev_synth_opt = c_eval->add_option("--synthetic-target", ev_synth,
                                          "Mocap file rendered through the target pipeline");
  ev_det_opt->excludes(ev_synth_opt);
  c_eval->add_option("--report", ev_report);

  // infer
  auto* c_infer = app.add_subcommand("infer", "Predict bodies for detections");
  std::string in_ckpt, in_model, in_det, in_out;
  bool in_fit = false;
  c_infer->add_option("--checkpoint", in_ckpt);
  c_infer->add_option("--model", in_model);
  c_infer->add_option("--detections", in_det);
  c_infer->add_option("--out-meshes", in_out)->required();
  c_infer->add_flag("--fit-translation", in_fit);

  // export-features
  auto* c_feat = app.add_subcommand("export-features", "Write eval-mode features");
  std::string ft_ckpt, ft_det, ft_which = "adapted", ft_out;
  c_feat->add_option("--checkpoint", ft_ckpt);
  c_feat->add_option("--detections", ft_det);
  c_feat->add_option("--which", ft_which)->check(CLI::IsMember({"adapted", "pretrained"}));
  c_feat->add_option("--out", ft_out)->required();

  // bench
  auto* c_bench = app.add_subcommand("bench", "Single-forward latency of F+H");
  std::string bn_ckpt, bn_sizes = "1,512";
  long bn_iters = 1000, bn_warmup = 20;
  c_bench->add_option("--checkpoint", bn_ckpt, "Default: full-size network (k=25, K=24, d=1024)");
  c_bench->add_option("--batch-sizes", bn_sizes);
  c_bench->add_option("--iterations", bn_iters);
  c_bench->add_option("--warmup", bn_warmup);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    RunConfig cfg = load_run_config(common.config_path);
    if (common.threads > 0) cfg.threads = common.threads;
    set_num_threads(cfg.threads);
    if (common.print_config) {
      std::cout << to_json(cfg).dump(2) << '\n';
      return kExitOk;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return kExitValidation;
    }
    const Json echo = to_json(cfg);
    const DetectionFilter& filter = cfg.target.filter;

    if (c_toy->parsed()) {
      const auto u = [](long v, std::size_t d) { return v < 0 ? d : static_cast<std::size_t>(v); };
      const BodyModel m = make_toy_model(toy_seed < 0 ? cfg.toy_model.seed : toy_seed,
                                         u(toy_V, cfg.toy_model.num_vertices),
                                         u(toy_K, cfg.toy_model.num_joints),
                                         u(toy_k, cfg.toy_model.num_keypoints));
      save_model(m, toy_out);
      std::cout << "wrote " << toy_out << " (V=" << m.num_vertices << ", K=" << m.num_joints
                << ", k=" << m.num_keypoints << ")\n";
      return kExitOk;
    }

    if (c_mocap->parsed()) {
      const std::string model_path = pick(mocap_model, cfg.paths.model, "--model");
      require_file(model_path, "model");
      const BodyModel model = load_model(model_path);
      if (mocap_n == 0) throw Error(ErrorCode::Validation, "--n must be >= 1");
      const MocapSet set =
          synth_mocap(mocap_seed < 0 ? cfg.seed : static_cast<std::uint64_t>(mocap_seed),
                      mocap_n < 0 ? cfg.mocap.n : static_cast<std::size_t>(mocap_n), model,
                      cfg.mocap.pose_spread, cfg.camera);
      save_mocap(set, mocap_out);
      std::cout << "wrote " << mocap_out << " (N=" << set.size() << ")\n";
      return kExitOk;
    }

    if (c_target->parsed()) {
      const std::string model_path = pick(tg_model, cfg.paths.model, "--model");
      const std::string mocap_path = pick(tg_mocap, cfg.paths.mocap, "--mocap");
      require_file(model_path, "model");
      require_file(mocap_path, "mocap");
      const BodyModel model = load_model(model_path);
      const MocapSet mocap = load_mocap(mocap_path);
      const std::size_t end = tg_end < 0 ? mocap.size() : static_cast<std::size_t>(tg_end);
      if (tg_begin < 0 || static_cast<std::size_t>(tg_begin) >= end) {
        throw Error(ErrorCode::Validation, "empty frame range");
      }
      std::vector<DetectionSample> samples;
      for (std::size_t i = static_cast<std::size_t>(tg_begin); i < std::min(end, mocap.size()); ++i) {
        samples.push_back(make_detection_sample(mocap, i, model, cfg.camera, cfg.target.aug, cfg.seed));
      }
      const KeypointMap map = KeypointMap::from_spec(cfg.target.keypoint_map, model.num_keypoints);
      write_detections(tg_out, samples, map, tg_gt);
      std::cout << "wrote " << tg_out << " (" << samples.size() << " frames)\n";
      return kExitOk;
    }

    if (c_pre->parsed()) {
      const std::string model_path = pick(pre_model, cfg.paths.model, "--model");
      const std::string mocap_path = pick(pre_mocap, cfg.paths.mocap, "--mocap");
      require_file(model_path, "model");
      require_file(mocap_path, "mocap");
      const BodyModel model = load_model(model_path);
      const MocapSet mocap = load_mocap(mocap_path);
      NetConfig nc = cfg.network;
      nc.num_keypoints = model.num_keypoints;
      nc.num_joints = model.num_joints;
      Networks nets = init_networks(nc, cfg.seed);
      const std::filesystem::path out_dir = pre_out;
      std::filesystem::create_directories(out_dir);
      write_json(out_dir / "config.json", echo);
      PretrainResult r;
      try {
        r = run_pretrain(nets, model, mocap, cfg.camera, cfg.pretrain,
                         PretrainOutputs{.out_dir = out_dir, .config_echo = echo});
      } catch (const Error& e) {
        std::cerr << "pretrain aborted: " << e.what() << "\nlog: " << (out_dir / "log.jsonl").string()
                  << '\n';
        return kExitRuntime;
      }
      const Json summary = {{"steps", r.history.size()},
                            {"initial_L_total", r.history.empty() ? 0.0 : r.history.front().total},
                            {"final_L_total", r.history.empty() ? 0.0 : r.history.back().total},
                            {"best_step", r.best_step},
                            {"best_pa_mpjpe_mm", r.best_pa_mpjpe_mm},
                            {"train_size", r.train_size},
                            {"holdout_size", r.holdout_size}};
      write_json(out_dir / "summary.json", summary);
      std::cout << summary.dump() << '\n';
      return kExitOk;
    }

    if (c_adapt->parsed()) {
      const std::string ckpt_path = pick(ad_ckpt, cfg.paths.checkpoint, "--checkpoint");
      const std::string target_path = pick(ad_target, cfg.paths.target, "--target");
      const std::string model_path = pick(ad_model, cfg.paths.model, "--model");
      const std::string mocap_path = pick(ad_mocap, cfg.paths.mocap, "--mocap");
      for (const auto& [p, what] : {std::pair{ckpt_path, "checkpoint"}, {target_path, "target"},
                                    {model_path, "model"}, {mocap_path, "mocap"}}) {
        require_file(p, what);
      }
      const BodyModel model = load_model(model_path);
      const MocapSet mocap = load_mocap(mocap_path);
      Checkpoint ck = load_checkpoint(ckpt_path);
      Networks nets = nets_from(ck);
      const KeypointMap map = KeypointMap::from_spec(cfg.target.keypoint_map, model.num_keypoints);
      const DetectionSet target = load_detections(target_path, map, filter);
      if (target.frames.empty()) throw Error(ErrorCode::Validation, "no target frames after filtering");
      DetectionSet selection;
      const std::string sel_path = ad_sel.empty() ? cfg.paths.selection : ad_sel;
      if (!sel_path.empty()) {
        require_file(sel_path, "selection set");
        selection = load_detections(sel_path, map, filter);
      }
      Mlp F_pt = prepare_adaptation(nets);
      const std::filesystem::path out_dir = ad_out;
      std::filesystem::create_directories(out_dir);
      write_json(out_dir / "config.json", echo);
      AdaptResult r;
      try {
        r = run_adapt(nets, F_pt, model, cfg.camera, mocap, target.frames,
                      selection.frames.empty() ? nullptr : &selection.frames, cfg.adapt,
                      AdaptOutputs{.out_dir = out_dir, .config_echo = echo});
      } catch (const Error& e) {
        std::cerr << "adapt aborted: " << e.what() << "\nlog: " << (out_dir / "log.jsonl").string()
                  << '\n';
        return kExitRuntime;
      }
      const Json summary = {{"steps", r.history.size()},
                            {"target_frames", target.frames.size()},
                            {"target_skipped", target.skipped},
                            {"best_step", r.best_step},
                            {"best_value", r.best_value},
                            {"criterion", r.selections.empty() ? "" : r.selections.back().criterion}};
      write_json(out_dir / "summary.json", summary);
      std::cout << summary.dump() << '\n';
      return kExitOk;
    }

    if (c_eval->parsed()) {
      const std::string ckpt_path = pick(ev_ckpt, cfg.paths.checkpoint, "--checkpoint");
      const std::string model_path = pick(ev_model, cfg.paths.model, "--model");
      require_file(ckpt_path, "checkpoint");
      require_file(model_path, "model");
      const BodyModel model = load_model(model_path);
      Checkpoint ck = load_checkpoint(ckpt_path);
      DetectionSet set;
      if (!ev_synth.empty()) {
        require_file(ev_synth, "mocap");
        const MocapSet mocap = load_mocap(ev_synth);
        set = synth_target(mocap, 0, mocap.size(), model, cfg.camera, cfg.target.aug, cfg.seed, filter);
      } else {
        const std::string det_path = pick(ev_det, cfg.paths.target, "--detections");
        require_file(det_path, "detections");
        set = load_detections(det_path,
                              KeypointMap::from_spec(cfg.target.keypoint_map, model.num_keypoints),
                              filter);
      }
      MetricsReport report = evaluate_samples(ck.nets.F, ck.nets.H, model, set.frames);
      report.n_skipped += set.skipped;
      const Json j = report.to_json(echo, cfg.metrics.per_frame);
      if (!ev_report.empty()) write_json(ev_report, j);
      std::cout << Json{{"n_frames", report.n_frames},
                        {"n_skipped", report.n_skipped},
                        {"pa_mpjpe_mm", report.mean_pa_mpjpe_mm},
                        {"mpjpe_mm", report.mean_mpjpe_mm},
                        {"pve_mm", report.mean_pve_mm}}
                       .dump()
                << '\n';
      return kExitOk;
    }

    if (c_infer->parsed()) {
      const std::string ckpt_path = pick(in_ckpt, cfg.paths.checkpoint, "--checkpoint");
      const std::string model_path = pick(in_model, cfg.paths.model, "--model");
      const std::string det_path = pick(in_det, cfg.paths.target, "--detections");
      require_file(ckpt_path, "checkpoint");
      require_file(model_path, "model");
      require_file(det_path, "detections");
      const BodyModel model = load_model(model_path);
      Checkpoint ck = load_checkpoint(ckpt_path);
      const DetectionSet set = load_detections(
          det_path, KeypointMap::from_spec(cfg.target.keypoint_map, model.num_keypoints), filter);
      if (set.frames.empty()) throw Error(ErrorCode::Validation, "no frames after filtering");
      const std::size_t N = set.frames.size(), V = model.num_vertices, K = model.num_joints;
      const Batch b = make_batch(set.frames);
      const Prediction p = predict_chunked(ck.nets.F, ck.nets.H, b.input);
      Tensor vertices({N, V, 3});
      Tensor translation({N, 3});
      Tensor frames({N});
      std::vector<std::string> fit_errors(N);
      parallel_for(N, [&](std::size_t n) {
        const auto row = [&](const Tensor& t) {
          return std::span<const double>(t.data() + n * t.cols(), t.cols());
        };
        const SkinResult s = skin(model, row(p.rot), row(p.beta));
        std::copy(s.vertices.data(), s.vertices.data() + 3 * V, vertices.data() + n * 3 * V);
        frames[n] = static_cast<double>(set.frames[n].frame);
        if (!in_fit) return;
        const Tensor X = regress_keypoints(s.vertices, model.keypoint_regressor);
        try {
          const TranslationFit fit =
              fit_translation(X, set.frames[n].keypoints_px, set.frames[n].vis.span(), cfg.camera);
          for (int c = 0; c < 3; ++c) translation(n, c) = fit.translation[c];
        } catch (const Error& e) {
          fit_errors[n] = e.what();
          for (int c = 0; c < 3; ++c) translation(n, c) = std::numeric_limits<double>::quiet_NaN();
        }
      });
      TensorArchive ar;
      ar.put("frame", frames);
      ar.put("theta", rows_to_axis_angle(p.rot, K));
      ar.put("rot", p.rot);
      ar.put("beta", p.beta);
      ar.put("vertices", vertices, DType::F32);
      if (in_fit) ar.put("translation", translation);
      ar.meta() = {{"version", 1}, {"config", echo}, {"checkpoint", ckpt_path}, {"n_frames", N},
                   {"skipped", set.skipped}};
      std::size_t failed = 0;
      for (std::size_t n = 0; n < N; ++n) {
        if (!fit_errors[n].empty()) {
          ++failed;
          std::cerr << "frame " << set.frames[n].frame << ": translation fit failed: " << fit_errors[n]
                    << '\n';
        }
      }
      ar.save(in_out, "K2MO");
      std::cout << "wrote " << in_out << " (" << N << " frames, " << set.skipped << " skipped"
                << (in_fit ? ", " + std::to_string(failed) + " fits failed" : std::string()) << ")\n";
      return kExitOk;
    }

    if (c_feat->parsed()) {
      const std::string ckpt_path = pick(ft_ckpt, cfg.paths.checkpoint, "--checkpoint");
      const std::string det_path = pick(ft_det, cfg.paths.target, "--detections");
      require_file(ckpt_path, "checkpoint");
      require_file(det_path, "detections");
      Checkpoint ck = load_checkpoint(ckpt_path);
      if (ft_which == "adapted" && !ck.has_frozen) {
        throw Error(ErrorCode::Validation, "checkpoint holds no adapted extractor (pre-training output)");
      }
      Mlp& F = (ft_which == "pretrained" && ck.has_frozen) ? ck.F_pt : ck.nets.F;
      const DetectionSet set = load_detections(
          det_path, KeypointMap::from_spec(cfg.target.keypoint_map, ck.config.num_keypoints), filter);
      if (set.frames.empty()) throw Error(ErrorCode::Validation, "no frames after filtering");
      const Batch b = make_batch(set.frames);
      const Prediction p = predict_chunked(F, ck.nets.H, b.input);
      export_features(ft_out, p.features, ft_which, echo);
      std::cout << "wrote " << ft_out << " (" << p.features.rows() << " x " << p.features.cols()
                << ")\n";
      return kExitOk;
    }

    if (c_bench->parsed()) {
      if (bn_iters < 1000) throw Error(ErrorCode::Validation, "--iterations must be >= 1000");
      Networks nets;
      if (!bn_ckpt.empty()) {
        require_file(bn_ckpt, "checkpoint");
        nets = std::move(load_checkpoint(bn_ckpt).nets);
      } else {
        NetConfig full;
        full.num_keypoints = 25;
        full.num_joints = 24;
        full.width = 1024;
        nets = init_networks(full, cfg.seed);
      }
      const std::vector<std::size_t> sizes = parse_sizes(bn_sizes);
      std::cout << "isa " << simd::isa_name(simd::kernels().isa) << ", k=" << nets.config.num_keypoints
                << ", K=" << nets.config.num_joints << ", d=" << nets.config.width << '\n';
      Rng rng(derive_seed(cfg.seed, 0x4245'4e43));
      Json results = Json::array();
      for (std::size_t B : sizes) {
        Tensor input({B, nets.config.input_width()});
        for (double& v : input.span()) v = rng.uniform(-1.0, 1.0);
        for (long i = 0; i < bn_warmup; ++i) predict(nets.F, nets.H, input);
        std::vector<double> ms;
        ms.reserve(static_cast<std::size_t>(bn_iters));
        for (long i = 0; i < bn_iters; ++i) {
          const auto t0 = std::chrono::steady_clock::now();
          const Prediction p = predict(nets.F, nets.H, input);
          const auto t1 = std::chrono::steady_clock::now();
          ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        double mean = 0.0;
        for (double v : ms) mean += v;
        mean /= static_cast<double>(ms.size());
        const double med = median(ms);
        const char* ref = B == 1 ? "3.4 ms" : B == 512 ? "3.6 ms" : "n/a";
        std::printf("batch %zu: mean %.3f ms, median %.3f ms over %ld iterations (reference %s)\n", B,
                    mean, med, bn_iters, ref);
        results.push_back({{"batch", B}, {"mean_ms", mean}, {"median_ms", med}, {"iterations", bn_iters}});
      }
      std::cout << Json{{"bench", results}}.dump() << '\n';
      return kExitOk;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return is_validation(e.code()) ? kExitValidation : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace k2m
