#include "key2mesh/metrics.hpp"

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "key2mesh/error.hpp"
#include "key2mesh/parallel.hpp"

namespace k2m {
namespace {

using Mat3X = Eigen::Matrix<double, 3, Eigen::Dynamic>;

void check_points(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.dim(1) != 3 || a.shape() != b.shape()) {
    throw Error(ErrorCode::Dimension, std::string(what) + ": " + shape_string(a.shape()) + " vs " +
                                          shape_string(b.shape()));
  }
}

Mat3X to_eigen(const Tensor& P) {
  Mat3X m(3, P.dim(0));
  for (std::size_t i = 0; i < P.dim(0); ++i) {
    for (int c = 0; c < 3; ++c) m(c, static_cast<Eigen::Index>(i)) = P(i, c);
  }
  return m;
}

double mean_distance_mm(const Tensor& a, const Tensor& b, const Vec3& ra, const Vec3& rb) {
  double total = 0.0;
  const std::size_t n = a.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = (a(i, c) - ra[c]) - (b(i, c) - rb[c]);
      d2 += d * d;
    }
    total += std::sqrt(d2);
  }
  return 1000.0 * total / static_cast<double>(n);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

Similarity procrustes_align(const Tensor& P, const Tensor& Q) {
  check_points(P, Q, "procrustes_align");
  const std::size_t k = P.dim(0);
  if (k < 3) throw Error(ErrorCode::Degenerate, "procrustes needs >= 3 points, got " + std::to_string(k));
  const Mat3X p = to_eigen(P), q = to_eigen(Q);
  const Eigen::Vector3d mp = p.rowwise().mean(), mq = q.rowwise().mean();
  const Mat3X pc = p.colwise() - mp, qc = q.colwise() - mq;
  const double var_p = pc.squaredNorm();
  if (!(var_p > 1e-24)) throw Error(ErrorCode::Degenerate, "source points have zero spread");
  const Eigen::Matrix3d cov = qc * pc.transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) S(2, 2) = -1.0;
  const Eigen::Matrix3d R = svd.matrixU() * S * svd.matrixV().transpose();
  const double s = (svd.singularValues().asDiagonal() * S).trace() / var_p;
  const Eigen::Vector3d t = mq - s * R * mp;

  Similarity out;
  out.scale = s;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out.rotation[3 * r + c] = R(r, c);
    out.translation[r] = t(r);
  }
  return out;
}

Tensor apply_similarity(const Tensor& P, const Similarity& sim) {
  Tensor out = P;
  for (std::size_t i = 0; i < P.dim(0); ++i) {
    const Vec3 r = apply3(sim.rotation, {P(i, 0), P(i, 1), P(i, 2)});
    for (int c = 0; c < 3; ++c) out(i, c) = sim.scale * r[c] + sim.translation[c];
  }
  return out;
}

double pa_mpjpe(const Tensor& pred, const Tensor& gt) {
  const Tensor aligned = apply_similarity(pred, procrustes_align(pred, gt));
  return mean_distance_mm(aligned, gt, {}, {});
}

double mpjpe(const Tensor& pred, const Tensor& gt, std::size_t root) {
  check_points(pred, gt, "mpjpe");
  if (root >= pred.dim(0)) throw Error(ErrorCode::Dimension, "mpjpe root index out of range");
  return mean_distance_mm(pred, gt, {pred(root, 0), pred(root, 1), pred(root, 2)},
                          {gt(root, 0), gt(root, 1), gt(root, 2)});
}

double mpjpe(const Tensor& pred, const Tensor& gt, const Vec3& pred_root, const Vec3& gt_root) {
  check_points(pred, gt, "mpjpe");
  return mean_distance_mm(pred, gt, pred_root, gt_root);
}

double pve(const Tensor& pred, const Tensor& gt, const Vec3& pred_root, const Vec3& gt_root) {
  check_points(pred, gt, "pve");
  return mean_distance_mm(pred, gt, pred_root, gt_root);
}

void MetricsReport::add(double pa, double mp, double pv) {
  pa_mpjpe_mm.push_back(pa);
  mpjpe_mm.push_back(mp);
  pve_mm.push_back(pv);
}

void MetricsReport::finalize() {
  n_frames = pa_mpjpe_mm.size();
  mean_pa_mpjpe_mm = mean_of(pa_mpjpe_mm);
  mean_mpjpe_mm = mean_of(mpjpe_mm);
  mean_pve_mm = mean_of(pve_mm);
}

Json MetricsReport::to_json(const Json& config_echo, bool per_frame) const {
  Json j = {{"config", config_echo},
            {"n_frames", n_frames},
            {"n_skipped", n_skipped},
            {"pa_mpjpe_mm", mean_pa_mpjpe_mm},
            {"mpjpe_mm", mean_mpjpe_mm},
            {"pve_mm", mean_pve_mm}};
  if (per_frame) {
    j["per_frame"] = {{"pa_mpjpe_mm", pa_mpjpe_mm}, {"mpjpe_mm", mpjpe_mm}, {"pve_mm", pve_mm}};
  }
  return j;
}

MetricsReport evaluate_bodies(const BodyModel& model, const Tensor& pred_rot, const Tensor& pred_beta,
                              const Tensor& gt_rot, const Tensor& gt_beta) {
  const std::size_t N = pred_rot.rows(), K = model.num_joints;
  if (pred_rot.shape() != gt_rot.shape() || pred_rot.cols() != 9 * K ||
      pred_beta.shape() != gt_beta.shape() || pred_beta.rows() != N) {
    throw Error(ErrorCode::Dimension, "evaluate_bodies: inconsistent prediction/ground-truth shapes");
  }
  std::vector<double> pa(N), mp(N), pv(N);
  parallel_for(N, [&](std::size_t n) {
    auto row = [&](const Tensor& t) {
      return std::span<const double>(t.data() + n * t.cols(), t.cols());
    };
    const SkinResult sp = skin(model, row(pred_rot), row(pred_beta));
    const SkinResult sg = skin(model, row(gt_rot), row(gt_beta));
    const Tensor Xp = regress_keypoints(sp.vertices, model.keypoint_regressor);
    const Tensor Xg = regress_keypoints(sg.vertices, model.keypoint_regressor);
    const Vec3 rp{sp.joints(0, 0), sp.joints(0, 1), sp.joints(0, 2)};
    const Vec3 rg{sg.joints(0, 0), sg.joints(0, 1), sg.joints(0, 2)};
    pa[n] = pa_mpjpe(Xp, Xg);
    mp[n] = mpjpe(Xp, Xg, rp, rg);
    pv[n] = pve(sp.vertices, sg.vertices, rp, rg);
  });
  MetricsReport report;
  for (std::size_t n = 0; n < N; ++n) report.add(pa[n], mp[n], pv[n]);
  report.finalize();
  return report;
}

}  // namespace k2m
