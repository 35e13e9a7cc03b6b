#include "key2mesh/graph.hpp"

#include <cmath>
#include <map>

#include "key2mesh/error.hpp"
#include "key2mesh/simd/kernels.hpp"

namespace k2m {

using simd::Trans;

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Affine: return "affine";
    case OpKind::MatmulNT: return "matmul_nt";
    case OpKind::Prelu: return "prelu";
    case OpKind::PreluGrad: return "prelu_grad";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Square: return "square";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Dropout: return "dropout";
    case OpKind::L1Loss: return "l1_loss";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::RowNorm: return "row_norm";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::Custom: return "custom";
  }
  return "unknown";
}

const Tensor& Var::value() const { return graph_->value(*this); }

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(Parameter& p) {
  Node n;
  n.bound = &p.value;
  n.requires_grad = p.trainable;
  n.param = p.trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(OpKind kind, const std::vector<Var>& inputs, Tensor value, BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.graph() != this) throw Error(ErrorCode::Contract, "input from a different graph");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.grad.empty() ? Tensor(n.val().shape(), 0.0) : n.grad;
}

Tensor* Graph::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.val().shape(), 0.0);
  return &n.grad;
}

void Graph::backward(Var output) {
  if (backward_done_) throw Error(ErrorCode::Contract, "backward() called twice on one graph");
  if (value(output).size() != 1) {
    throw Error(ErrorCode::Contract,
                "backward from non-scalar output " + shape_string(value(output).shape()));
  }
  backward_done_ = true;
  Tensor* seed = grad_slot(output.id());
  if (seed == nullptr) return;
  seed->fill(1.0);
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      if (n.param->grad.size() != n.grad.size()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

namespace ops {
namespace {

void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

void same_size(const Tensor& a, const Tensor& b, const char* op) {
  require(a.size() == b.size(), ErrorCode::Dimension,
          std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

double slope_at(const Tensor& a, std::size_t col) { return a.size() == 1 ? a[0] : a[col]; }

void check_slopes(const Tensor& x, const Tensor& a, const char* op) {
  require(a.size() == 1 || a.size() == x.cols(), ErrorCode::Dimension,
          std::string(op) + ": slope count " + std::to_string(a.size()) + " for width " +
              std::to_string(x.cols()));
}

}  // namespace

Var affine(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require(xv.rank() == 2 && wv.rank() == 2, ErrorCode::Dimension, "affine expects matrices");
  const std::size_t batch = xv.dim(0), n = xv.dim(1), m = wv.dim(1);
  require(wv.dim(0) == n, ErrorCode::Dimension,
          "affine: x " + shape_string(xv.shape()) + " vs W " + shape_string(wv.shape()));
  require(bv.size() == m, ErrorCode::Dimension, "affine: bias length " + std::to_string(bv.size()));

  Tensor y({batch, m});
  simd::kernels().gemm(Trans::No, Trans::No, batch, m, n, 1.0, xv.data(), n, wv.data(), m, 0.0,
                       y.data(), m);
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t c = 0; c < m; ++c) y(r, c) += bv[c];
  }
  return x.graph().record(OpKind::Affine, {x, w, b}, std::move(y), [](Graph& g, std::size_t self) {
    const auto& in = g.inputs_of(self);
    const Tensor& dy = g.grad_of(self);
    const Tensor& xv = g.value_of(in[0]);
    const Tensor& wv = g.value_of(in[1]);
    const std::size_t batch = xv.dim(0), n = xv.dim(1), m = wv.dim(1);
    if (Tensor* dx = g.grad_slot(in[0])) {
      simd::kernels().gemm(Trans::No, Trans::Yes, batch, n, m, 1.0, dy.data(), m, wv.data(), m,
                           1.0, dx->data(), n);
    }
    if (Tensor* dw = g.grad_slot(in[1])) {
      simd::kernels().gemm(Trans::Yes, Trans::No, n, m, batch, 1.0, xv.data(), n, dy.data(), m,
                           1.0, dw->data(), m);
    }
    if (Tensor* db = g.grad_slot(in[2])) {
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t c = 0; c < m; ++c) (*db)[c] += dy(r, c);
      }
    }
  });
}

Var matmul_nt(Var g_in, Var w) {
  const Tensor& gv = g_in.value();
  const Tensor& wv = w.value();
  require(gv.rank() == 2 && wv.rank() == 2 && gv.dim(1) == wv.dim(1), ErrorCode::Dimension,
          "matmul_nt: " + shape_string(gv.shape()) + " vs " + shape_string(wv.shape()));
  const std::size_t batch = gv.dim(0), m = gv.dim(1), n = wv.dim(0);
  Tensor y({batch, n});
  simd::kernels().gemm(Trans::No, Trans::Yes, batch, n, m, 1.0, gv.data(), m, wv.data(), m, 0.0,
                       y.data(), n);
  return g_in.graph().record(OpKind::MatmulNT, {g_in, w}, std::move(y),
                             [](Graph& g, std::size_t self) {
    const auto& in = g.inputs_of(self);
    const Tensor& dy = g.grad_of(self);
    const Tensor& gv = g.value_of(in[0]);
    const Tensor& wv = g.value_of(in[1]);
    const std::size_t batch = gv.dim(0), m = gv.dim(1), n = wv.dim(0);
    if (Tensor* dg = g.grad_slot(in[0])) {
      simd::kernels().gemm(Trans::No, Trans::No, batch, m, n, 1.0, dy.data(), n, wv.data(), m,
                           1.0, dg->data(), m);
    }
    if (Tensor* dw = g.grad_slot(in[1])) {
      simd::kernels().gemm(Trans::Yes, Trans::No, n, m, batch, 1.0, dy.data(), n, gv.data(), m,
                           1.0, dw->data(), m);
    }
  });
}

Var prelu(Var x, Var a) {
  const Tensor& xv = x.value();
  const Tensor& av = a.value();
  check_slopes(xv, av, "prelu");
  Tensor y(xv.shape());
  const std::size_t cols = xv.cols();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    y[i] = v > 0.0 ? v : slope_at(av, i % cols) * v;
  }
  return x.graph().record(OpKind::Prelu, {x, a}, std::move(y), [](Graph& g, std::size_t self) {
    const auto& in = g.inputs_of(self);
    const Tensor& dy = g.grad_of(self);
    const Tensor& xv = g.value_of(in[0]);
    const Tensor& av = g.value_of(in[1]);
    const std::size_t cols = xv.cols();
    if (Tensor* dx = g.grad_slot(in[0])) {
      for (std::size_t i = 0; i < xv.size(); ++i) {
        (*dx)[i] += xv[i] > 0.0 ? dy[i] : slope_at(av, i % cols) * dy[i];
      }
    }
    if (Tensor* da = g.grad_slot(in[1])) {
      for (std::size_t i = 0; i < xv.size(); ++i) {
        if (xv[i] <= 0.0) (*da)[av.size() == 1 ? 0 : i % cols] += dy[i] * xv[i];
      }
    }
  });
}

Var prelu_grad(Var gy, Var x, Var a) {
  const Tensor& gv = gy.value();
  const Tensor& xv = x.value();
  const Tensor& av = a.value();
  same_size(gv, xv, "prelu_grad");
  check_slopes(xv, av, "prelu_grad");
  Tensor y(xv.shape());
  const std::size_t cols = xv.cols();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    y[i] = xv[i] > 0.0 ? gv[i] : slope_at(av, i % cols) * gv[i];
  }
  return gy.graph().record(OpKind::PreluGrad, {gy, x, a}, std::move(y),
                           [](Graph& g, std::size_t self) {
    const auto& in = g.inputs_of(self);
    const Tensor& dy = g.grad_of(self);
    const Tensor& gv = g.value_of(in[0]);
    const Tensor& xv = g.value_of(in[1]);
    const Tensor& av = g.value_of(in[2]);
    const std::size_t cols = xv.cols();
    if (Tensor* dg = g.grad_slot(in[0])) {
      for (std::size_t i = 0; i < xv.size(); ++i) {
        (*dg)[i] += xv[i] > 0.0 ? dy[i] : slope_at(av, i % cols) * dy[i];
      }
    }
    if (Tensor* da = g.grad_slot(in[2])) {
      for (std::size_t i = 0; i < xv.size(); ++i) {
        if (xv[i] <= 0.0) (*da)[av.size() == 1 ? 0 : i % cols] += dy[i] * gv[i];
      }
    }
  });
}

Var add(Var a, Var b) {
  same_size(a.value(), b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  return a.graph().record(OpKind::Add, {a, b}, std::move(y), [](Graph& g, std::size_t self) {
    const auto& in = g.inputs_of(self);
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_slot(in[0])) *da += dy;
    if (Tensor* db = g.grad_slot(in[1])) *db += dy;
  });
}

Var sub(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  same_size(av, bv, "sub");
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.graph().record(OpKind::Sub, {a, b}, std::move(y), [](Graph& g, std::size_t self) {
    const auto& in = g.inputs_of(self);
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_slot(in[0])) *da += dy;
    if (Tensor* db = g.grad_slot(in[1])) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] -= dy[i];
    }
  });
}

Var scale(Var x, double c) {
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c;
  return x.graph().record(OpKind::Scale, {x}, std::move(y), [c](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* dx = g.grad_slot(g.inputs_of(self)[0])) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += c * dy[i];
    }
  });
}

Var add_scalar(Var x, double c) {
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += c;
  return x.graph().record(OpKind::AddScalar, {x}, std::move(y), [](Graph& g, std::size_t self) {
    if (Tensor* dx = g.grad_slot(g.inputs_of(self)[0])) *dx += g.grad_of(self);
  });
}

Var square(Var x) {
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= y[i];
  return x.graph().record(OpKind::Square, {x}, std::move(y), [](Graph& g, std::size_t self) {
    const std::size_t in = g.inputs_of(self)[0];
    const Tensor& dy = g.grad_of(self);
    const Tensor& xv = g.value_of(in);
    if (Tensor* dx = g.grad_slot(in)) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += 2.0 * xv[i] * dy[i];
    }
  });
}

Var batch_norm(Var x, Var gamma, Var beta, RunningStats& running, Mode mode, double momentum,
               double eps) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, ErrorCode::Dimension, "batch_norm expects [B x n]");
  const std::size_t batch = xv.dim(0), n = xv.dim(1);
  require(gamma.value().size() == n && beta.value().size() == n, ErrorCode::Dimension,
          "batch_norm: affine parameters do not match width " + std::to_string(n));
  require(running.mean.size() == n && running.var.size() == n, ErrorCode::Dimension,
          "batch_norm: running statistics do not match width " + std::to_string(n));
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();

  Tensor mean({n}), inv_std({n});
  if (mode == Mode::Train) {
    require(batch >= 2, ErrorCode::DegenerateBatch,
            "batch_norm in train mode needs at least 2 rows, got " + std::to_string(batch));
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t c = 0; c < n; ++c) mean[c] += xv(r, c);
    }
    for (std::size_t c = 0; c < n; ++c) mean[c] /= static_cast<double>(batch);
    Tensor var({n});
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double d = xv(r, c) - mean[c];
        var[c] += d * d;
      }
    }
    const double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
    for (std::size_t c = 0; c < n; ++c) {
      var[c] /= static_cast<double>(batch);
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
      running.mean[c] = (1.0 - momentum) * running.mean[c] + momentum * mean[c];
      running.var[c] = (1.0 - momentum) * running.var[c] + momentum * var[c] * unbias;
    }
  } else {
    for (std::size_t c = 0; c < n; ++c) {
      mean[c] = running.mean[c];
      inv_std[c] = 1.0 / std::sqrt(running.var[c] + eps);
    }
  }

  Tensor xhat(xv.shape()), y(xv.shape());
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mean[c]) * inv_std[c];
      y(r, c) = gv[c] * xhat(r, c) + bv[c];
    }
  }
  const bool train = mode == Mode::Train;
  return x.graph().record(
      OpKind::BatchNorm, {x, gamma, beta}, std::move(y),
      [xhat = std::move(xhat), inv_std = std::move(inv_std), train](Graph& g, std::size_t self) {
        const auto& in = g.inputs_of(self);
        const Tensor& dy = g.grad_of(self);
        const Tensor& gv = g.value_of(in[1]);
        const std::size_t batch = dy.dim(0), n = dy.dim(1);
        Tensor sum_dy({n}), sum_dy_xhat({n});
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t c = 0; c < n; ++c) {
            sum_dy[c] += dy(r, c);
            sum_dy_xhat[c] += dy(r, c) * xhat(r, c);
          }
        }
        if (Tensor* dgamma = g.grad_slot(in[1])) *dgamma += sum_dy_xhat;
        if (Tensor* dbeta = g.grad_slot(in[2])) *dbeta += sum_dy;
        if (Tensor* dx = g.grad_slot(in[0])) {
          const double inv_b = 1.0 / static_cast<double>(batch);
          for (std::size_t r = 0; r < batch; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
              const double scale = gv[c] * inv_std[c];
              if (train) {
                (*dx)(r, c) += scale * (dy(r, c) - inv_b * sum_dy[c] -
                                        xhat(r, c) * inv_b * sum_dy_xhat[c]);
              } else {
                (*dx)(r, c) += scale * dy(r, c);
              }
            }
          }
        }
      });
}

Var dropout(Var x, double p, Mode mode, Rng& rng) {
  require(p >= 0.0 && p < 1.0, ErrorCode::InvalidProbability,
          "dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  const Tensor& xv = x.value();
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(xv.shape());
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    y[i] = xv[i] * mask[i];
  }
  return x.graph().record(OpKind::Dropout, {x}, std::move(y),
                          [mask = std::move(mask)](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* dx = g.grad_slot(g.inputs_of(self)[0])) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * mask[i];
    }
  });
}

Var l1_loss(Var pred, const Tensor& target, const Tensor* mask) {
  const Tensor& pv = pred.value();
  same_size(pv, target, "l1_loss");
  std::size_t group = 1;
  if (mask != nullptr) {
    require(!mask->empty() && pv.size() % mask->size() == 0, ErrorCode::Dimension,
            "l1_loss: mask of size " + std::to_string(mask->size()) +
                " does not broadcast over " + std::to_string(pv.size()));
    group = pv.size() / mask->size();
  }
  Tensor weights(pv.shape(), 1.0);
  double count = static_cast<double>(pv.size());
  if (mask != nullptr) {
    count = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      weights[i] = (*mask)[i / group];
      count += weights[i];
    }
  }
  double total = 0.0;
  Tensor sign(pv.shape());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = pv[i] - target[i];
    total += weights[i] * std::abs(d);
    sign[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
  }
  const double inv = count > 0.0 ? 1.0 / count : 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) sign[i] *= weights[i] * inv;
  return pred.graph().record(OpKind::L1Loss, {pred}, Tensor::scalar(total * inv),
                             [sign = std::move(sign)](Graph& g, std::size_t self) {
    const double dy = g.grad_of(self)[0];
    if (Tensor* dx = g.grad_slot(g.inputs_of(self)[0])) {
      for (std::size_t i = 0; i < sign.size(); ++i) (*dx)[i] += dy * sign[i];
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().span()) s += v;
  return x.graph().record(OpKind::Sum, {x}, Tensor::scalar(s), [](Graph& g, std::size_t self) {
    const double dy = g.grad_of(self)[0];
    if (Tensor* dx = g.grad_slot(g.inputs_of(self)[0])) {
      for (double& v : dx->span()) v += dy;
    }
  });
}

Var mean(Var x) {
  const Tensor& xv = x.value();
  require(!xv.empty(), ErrorCode::Dimension, "mean of empty tensor");
  double s = 0.0;
  for (double v : xv.span()) s += v;
  const double inv = 1.0 / static_cast<double>(xv.size());
  return x.graph().record(OpKind::Mean, {x}, Tensor::scalar(s * inv),
                          [inv](Graph& g, std::size_t self) {
    const double dy = g.grad_of(self)[0] * inv;
    if (Tensor* dx = g.grad_slot(g.inputs_of(self)[0])) {
      for (double& v : dx->span()) v += dy;
    }
  });
}

Var row_norm(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, ErrorCode::Dimension, "row_norm expects [B x n]");
  const std::size_t batch = xv.dim(0), n = xv.dim(1);
  Tensor y({batch, 1});
  for (std::size_t r = 0; r < batch; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += xv(r, c) * xv(r, c);
    y[r] = std::sqrt(s);
  }
  return x.graph().record(OpKind::RowNorm, {x}, std::move(y), [](Graph& g, std::size_t self) {
    const std::size_t in = g.inputs_of(self)[0];
    const Tensor& dy = g.grad_of(self);
    const Tensor& norms = g.value_of(self);
    const Tensor& xv = g.value_of(in);
    if (Tensor* dx = g.grad_slot(in)) {
      const std::size_t n = xv.dim(1);
      for (std::size_t r = 0; r < xv.dim(0); ++r) {
        if (norms[r] == 0.0) continue;
        const double s = dy[r] / norms[r];
        for (std::size_t c = 0; c < n; ++c) (*dx)(r, c) += s * xv(r, c);
      }
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2 && begin <= end && end <= xv.dim(1), ErrorCode::Dimension,
          "slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
              shape_string(xv.shape()));
  const std::size_t batch = xv.dim(0), width = end - begin;
  Tensor y({batch, width});
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t c = 0; c < width; ++c) y(r, c) = xv(r, begin + c);
  }
  return x.graph().record(OpKind::SliceCols, {x}, std::move(y),
                          [begin](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* dx = g.grad_slot(g.inputs_of(self)[0])) {
      for (std::size_t r = 0; r < dy.dim(0); ++r) {
        for (std::size_t c = 0; c < dy.dim(1); ++c) (*dx)(r, begin + c) += dy(r, c);
      }
    }
  });
}

Var input_gradient(Var output, Var input) {
  Graph& g = output.graph();
  require(&input.graph() == &g, ErrorCode::Contract, "input_gradient across graphs");
  require(input.id() < output.id(), ErrorCode::Contract, "input must precede output");

  const std::size_t lo = input.id(), hi = output.id();
  std::vector<char> depends(hi - lo + 1, 0);
  depends[0] = 1;
  for (std::size_t id = lo + 1; id <= hi; ++id) {
    for (std::size_t in : g.inputs_of(id)) {
      if (in >= lo && depends[in - lo]) depends[id - lo] = 1;
    }
  }
  auto dep = [&](std::size_t id) { return id >= lo && id <= hi && depends[id - lo]; };

  std::map<std::size_t, Var> grads;
  auto accumulate = [&](std::size_t id, Var contribution) {
    auto it = grads.find(id);
    if (it == grads.end()) {
      grads.emplace(id, contribution);
    } else {
      it->second = add(it->second, contribution);
    }
  };
  grads.emplace(hi, g.constant(Tensor(g.value_of(hi).shape(), 1.0)));

  for (std::size_t id = hi; id > lo; --id) {
    if (!dep(id)) continue;
    auto it = grads.find(id);
    if (it == grads.end()) continue;
    const Var gy = it->second;
    const auto in = g.inputs_of(id);
    switch (g.kind_of(id)) {
      case OpKind::Affine:
        if (dep(in[0])) accumulate(in[0], matmul_nt(gy, g.var(in[1])));
        if (dep(in[1]) || dep(in[2])) {
          throw Error(ErrorCode::SecondOrderUnsupported, "affine weights depend on the input");
        }
        break;
      case OpKind::Prelu:
        if (dep(in[1])) {
          throw Error(ErrorCode::SecondOrderUnsupported, "prelu slope depends on the input");
        }
        accumulate(in[0], prelu_grad(gy, g.var(in[0]), g.var(in[1])));
        break;
      case OpKind::Add:
        if (dep(in[0])) accumulate(in[0], gy);
        if (dep(in[1])) accumulate(in[1], gy);
        break;
      default:
        throw Error(ErrorCode::SecondOrderUnsupported,
                    std::string("op '") + op_kind_name(g.kind_of(id)) +
                        "' in gradient-penalty subgraph");
    }
  }
  auto it = grads.find(lo);
  if (it == grads.end()) return g.constant(Tensor(input.value().shape(), 0.0));
  return it->second;
}

}  // namespace ops
}  // namespace k2m
