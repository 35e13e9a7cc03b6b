#include "key2mesh/body_ops.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "key2mesh/error.hpp"

namespace k2m::ops {
namespace {

void require_rows(const Tensor& t, std::size_t rows, std::size_t cols, const char* what) {
  if (t.rank() != 2 || t.dim(0) != rows || t.dim(1) != cols) {
    throw Error(ErrorCode::Dimension, std::string(what) + " expects [" + std::to_string(rows) +
                                          " x " + std::to_string(cols) + "], got " +
                                          shape_string(t.shape()));
  }
}

}  // namespace

Var decode_rot6d(Var r6) {
  const Tensor& rv = r6.value();
  if (rv.rank() != 2 || rv.dim(1) % 6 != 0) {
    throw Error(ErrorCode::Dimension, "decode_rot6d expects [B x 6K], got " + shape_string(rv.shape()));
  }
  const std::size_t B = rv.dim(0), K = rv.dim(1) / 6;
  Tensor out({B, 9 * K});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < K; ++j) {
      const std::span<const double, 6> r(rv.data() + b * 6 * K + 6 * j, 6);
      try {
        const Mat3 m = rot6d_to_matrix(r);
        std::copy(m.begin(), m.end(), out.data() + b * 9 * K + 9 * j);
      } catch (const Error& e) {
        throw Error(ErrorCode::Degenerate, "row " + std::to_string(b) + " joint " +
                                               std::to_string(j) + ": " + e.what());
      }
    }
  }
  return r6.graph().record(OpKind::Custom, {r6}, std::move(out), [K](Graph& g, std::size_t self) {
    const std::size_t in = g.inputs_of(self)[0];
    Tensor* dr = g.grad_slot(in);
    if (dr == nullptr) return;
    const Tensor& rv = g.value_of(in);
    const Tensor& dm = g.grad_of(self);
    for (std::size_t b = 0; b < rv.dim(0); ++b) {
      for (std::size_t j = 0; j < K; ++j) {
        const std::size_t o6 = b * 6 * K + 6 * j, o9 = b * 9 * K + 9 * j;
        rot6d_to_matrix_vjp(std::span<const double, 6>(rv.data() + o6, 6),
                            std::span<const double, 9>(dm.data() + o9, 9),
                            std::span<double, 6>(dr->data() + o6, 6));
      }
    }
  });
}

Var body_keypoints(const BodyModel& model, Var rot, Var beta, bool root_centered) {
  const std::size_t B = rot.value().rows(), K = model.num_joints, k = model.num_keypoints;
  const std::size_t V = model.num_vertices;
  require_rows(rot.value(), B, 9 * K, "body_keypoints rot");
  require_rows(beta.value(), B, kNumBetas, "body_keypoints beta");
  auto fwd = std::make_shared<std::vector<SkinResult>>(B);
  Tensor out({B, 3 * k});
  for (std::size_t b = 0; b < B; ++b) {
    (*fwd)[b] = skin(model, std::span<const double>(rot.value().data() + b * 9 * K, 9 * K),
                     std::span<const double>(beta.value().data() + b * kNumBetas, kNumBetas));
    const SkinResult& s = (*fwd)[b];
    const Tensor X = regress_keypoints(s.vertices, model.keypoint_regressor);
    for (std::size_t i = 0; i < k; ++i) {
      for (int c = 0; c < 3; ++c) {
        out(b, 3 * i + c) = X(i, c) - (root_centered ? s.joints(0, c) : 0.0);
      }
    }
  }
  return rot.graph().record(
      OpKind::Custom, {rot, beta}, std::move(out),
      [&model, fwd, root_centered, K, k, V](Graph& g, std::size_t self) {
        const std::size_t rot_id = g.inputs_of(self)[0], beta_id = g.inputs_of(self)[1];
        Tensor* drot = g.grad_slot(rot_id);
        Tensor* dbeta = g.grad_slot(beta_id);
        const Tensor& dX = g.grad_of(self);
        const Tensor& rv = g.value_of(rot_id);
        const Tensor& W = model.keypoint_regressor;
        std::vector<double> dverts(3 * V), djoints(3 * K);
        for (std::size_t b = 0; b < fwd->size(); ++b) {
          std::fill(dverts.begin(), dverts.end(), 0.0);
          std::fill(djoints.begin(), djoints.end(), 0.0);
          for (std::size_t i = 0; i < k; ++i) {
            const double* d = dX.data() + b * 3 * k + 3 * i;
            for (std::size_t v = 0; v < V; ++v) {
              const double w = W(i, v);
              if (w == 0.0) continue;
              for (int c = 0; c < 3; ++c) dverts[3 * v + c] += w * d[c];
            }
            if (root_centered) {
              for (int c = 0; c < 3; ++c) djoints[c] -= d[c];
            }
          }
          std::span<double> dr = drot ? std::span<double>(drot->data() + b * 9 * K, 9 * K)
                                      : std::span<double>();
          std::span<double> dbt = dbeta ? std::span<double>(dbeta->data() + b * kNumBetas, kNumBetas)
                                        : std::span<double>();
          std::vector<double> scratch_r, scratch_b;
          if (dr.empty()) {
            scratch_r.assign(9 * K, 0.0);
            dr = scratch_r;
          }
          if (dbt.empty()) {
            scratch_b.assign(kNumBetas, 0.0);
            dbt = scratch_b;
          }
          skin_vjp(model, std::span<const double>(rv.data() + b * 9 * K, 9 * K), (*fwd)[b], dverts,
                   root_centered ? std::span<const double>(djoints) : std::span<const double>(), dr,
                   dbt);
        }
      });
}

Var project_normalized(const FixedCamera& cam, Var X, const Tensor& offset, const Tensor& center,
                       const Tensor& scale, double min_depth) {
  const Tensor& xv = X.value();
  if (xv.rank() != 2 || xv.dim(1) % 3 != 0) {
    throw Error(ErrorCode::Dimension, "project_normalized expects [B x 3k], got " +
                                          shape_string(xv.shape()));
  }
  const std::size_t B = xv.dim(0), k = xv.dim(1) / 3;
  require_rows(offset, B, 3, "project_normalized offset");
  require_rows(center, B, 2, "project_normalized center");
  if (scale.size() != B) throw Error(ErrorCode::Dimension, "project_normalized scale size");
  // Camera-space points, kept for the backward pass.
  auto cp = std::make_shared<std::vector<double>>(B * 3 * k);
  Tensor out({B, 2 * k});
  std::string behind;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < k; ++i) {
      Vec3 p{xv(b, 3 * i) + offset(b, 0), xv(b, 3 * i + 1) + offset(b, 1),
             xv(b, 3 * i + 2) + offset(b, 2)};
      p = apply3(cam.rotation, p);
      for (int c = 0; c < 3; ++c) p[c] += cam.translation[c];
      if (min_depth > 0.0 && !(p[2] >= min_depth)) p[2] = -min_depth;  // floored, marked by sign
      if (!(std::abs(p[2]) > kMinDepth)) {
        behind += (behind.empty() ? "" : ", ") + std::to_string(b) + ":" + std::to_string(i);
        continue;
      }
      std::copy(p.begin(), p.end(), cp->data() + b * 3 * k + 3 * i);
      const double z = std::abs(p[2]);
      out(b, 2 * i) = (cam.focal * p[0] / z + cam.cx - center(b, 0)) / scale[b];
      out(b, 2 * i + 1) = (cam.focal * p[1] / z + cam.cy - center(b, 1)) / scale[b];
    }
  }
  if (!behind.empty()) throw Error(ErrorCode::BehindCamera, "row:keypoint [" + behind + "]");
  return X.graph().record(
      OpKind::Custom, {X}, std::move(out),
      [cp, scale, R = cam.rotation, f = cam.focal, k](Graph& g, std::size_t self) {
        Tensor* dx = g.grad_slot(g.inputs_of(self)[0]);
        if (dx == nullptr) return;
        const Tensor& dy = g.grad_of(self);
        const std::size_t B = dy.dim(0);
        for (std::size_t b = 0; b < B; ++b) {
          const double s = f / scale[b];
          for (std::size_t i = 0; i < k; ++i) {
            const double* p = cp->data() + b * 3 * k + 3 * i;
            const double gu = dy(b, 2 * i) * s, gv = dy(b, 2 * i + 1) * s;
            const double iz = 1.0 / std::abs(p[2]);
            // d(camera point); a floored depth passes no gradient
            const Vec3 dp{gu * iz, gv * iz, p[2] < 0 ? 0.0 : -(gu * p[0] + gv * p[1]) * iz * iz};
            // world = R^T camera
            for (int c = 0; c < 3; ++c) {
              (*dx)(b, 3 * i + c) += R[0 * 3 + c] * dp[0] + R[1 * 3 + c] * dp[1] + R[2 * 3 + c] * dp[2];
            }
          }
        }
      });
}

}  // namespace k2m::ops
