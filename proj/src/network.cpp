#include "key2mesh/network.hpp"

#include <cmath>
#include <string>

#include "key2mesh/body_ops.hpp"
#include "key2mesh/error.hpp"

namespace k2m {
namespace {

Parameter make_param(const std::string& name, Shape shape, double fill) {
  Parameter p;
  p.name = name;
  p.value = Tensor(std::move(shape), fill);
  p.zero_grad();
  return p;
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void kaiming_uniform(Parameter& p, std::uint64_t seed) {
  const double fan_in = static_cast<double>(p.value.dim(0));
  const double bound = std::sqrt(6.0 / fan_in);
  Rng rng(derive_seed(seed, name_hash(p.name)));
  for (double& w : p.value.span()) w = rng.uniform(-bound, bound);
}

void put_param(TensorArchive& ar, const std::string& prefix, const Parameter& p) {
  ar.put(prefix + "." + p.name, p.value);
}

void get_param(const TensorArchive& ar, const std::string& prefix, Parameter& p) {
  const std::string key = prefix + "." + p.name;
  const Tensor& t = ar.get(key);
  if (t.shape() != p.value.shape()) {
    throw Error(ErrorCode::Dimension, "checkpoint tensor '" + key + "' has shape " +
                                          shape_string(t.shape()) + ", expected " +
                                          shape_string(p.value.shape()));
  }
  p.value = t;
  p.zero_grad();
}

}  // namespace

Json to_json(const NetConfig& c) {
  return {{"num_keypoints", c.num_keypoints}, {"num_joints", c.num_joints},
          {"width", c.width},                 {"feature_blocks", c.feature_blocks},
          {"head_blocks", c.head_blocks},     {"critic_blocks", c.critic_blocks},
          {"dropout", c.dropout},             {"prelu_init", c.prelu_init},
          {"head_final_gain", c.head_final_gain}};
}

NetConfig net_config_from_json(const Json& j) {
  NetConfig c;
  try {
    c.num_keypoints = j.value("num_keypoints", c.num_keypoints);
    c.num_joints = j.value("num_joints", c.num_joints);
    c.width = j.value("width", c.width);
    c.feature_blocks = j.value("feature_blocks", c.feature_blocks);
    c.head_blocks = j.value("head_blocks", c.head_blocks);
    c.critic_blocks = j.value("critic_blocks", c.critic_blocks);
    c.dropout = j.value("dropout", c.dropout);
    c.prelu_init = j.value("prelu_init", c.prelu_init);
    c.head_final_gain = j.value("head_final_gain", c.head_final_gain);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Config, std::string("network config: ") + e.what());
  }
  return c;
}

Mlp::Mlp(std::string name, std::size_t in, std::size_t width, std::size_t blocks, bool normalize,
         double dropout, std::size_t out, double prelu_init)
    : name_(std::move(name)), in_(in), width_(width), dropout_(dropout) {
  if (in == 0 || width == 0 || blocks == 0) {
    throw Error(ErrorCode::Config, "network '" + name_ + "' needs positive widths and >= 1 block");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw Error(ErrorCode::InvalidProbability, "dropout " + std::to_string(dropout));
  }
  std::size_t prev = in;
  for (std::size_t i = 0; i < blocks; ++i) {
    const std::string tag = "block" + std::to_string(i) + ".";
    Block b;
    b.weight = make_param(tag + "weight", {prev, width}, 0.0);
    b.bias = make_param(tag + "bias", {width}, 0.0);
    b.gamma = make_param(tag + "bn_gamma", {width}, 1.0);
    b.shift = make_param(tag + "bn_beta", {width}, 0.0);
    b.slope = make_param(tag + "prelu", {width}, prelu_init);
    b.stats.mean = Tensor({width}, 0.0);
    b.stats.var = Tensor({width}, 1.0);
    b.normalize = normalize;
    b.skip = prev == width;
    blocks_.push_back(std::move(b));
    prev = width;
  }
  if (out > 0) {
    has_final_ = true;
    final_w_ = make_param("final.weight", {width, out}, 0.0);
    final_b_ = make_param("final.bias", {out}, 0.0);
  }
}

std::size_t Mlp::out_width() const { return has_final_ ? final_b_.value.size() : width_; }

Var Mlp::forward(Graph& g, Var x, Mode mode, Rng& rng) {
  if (x.value().rank() != 2 || x.value().dim(1) != in_) {
    throw Error(ErrorCode::Dimension, "network '" + name_ + "' expects width " +
                                          std::to_string(in_) + ", got " +
                                          shape_string(x.value().shape()));
  }
  Var h = x;
  for (Block& b : blocks_) {
    Var y = ops::affine(h, g.param(b.weight), g.param(b.bias));
    if (b.normalize) y = ops::batch_norm(y, g.param(b.gamma), g.param(b.shift), b.stats, mode);
    y = ops::prelu(y, g.param(b.slope));
    y = ops::dropout(y, dropout_, mode, rng);
    h = b.skip ? ops::add(y, h) : y;
  }
  if (has_final_) h = ops::affine(h, g.param(final_w_), g.param(final_b_));
  return h;
}

std::vector<Parameter*> Mlp::parameters() {
  std::vector<Parameter*> out;
  for (Block& b : blocks_) {
    out.push_back(&b.weight);
    out.push_back(&b.bias);
    if (b.normalize) {
      out.push_back(&b.gamma);
      out.push_back(&b.shift);
    }
    out.push_back(&b.slope);
  }
  if (has_final_) {
    out.push_back(&final_w_);
    out.push_back(&final_b_);
  }
  return out;
}

std::vector<const Parameter*> Mlp::parameters() const {
  std::vector<const Parameter*> out;
  for (Parameter* p : const_cast<Mlp*>(this)->parameters()) out.push_back(p);
  return out;
}

void Mlp::set_trainable(bool trainable) {
  for (Parameter* p : parameters()) p->trainable = trainable;
}

bool Mlp::trainable() const {
  for (const Parameter* p : parameters()) {
    if (p->trainable) return true;
  }
  return false;
}

void Mlp::init(std::uint64_t seed, double prelu_init) {
  const std::uint64_t s = derive_seed(seed, name_hash(name_));
  for (Block& b : blocks_) {
    kaiming_uniform(b.weight, s);
    b.bias.value.fill(0.0);
    b.gamma.value.fill(1.0);
    b.shift.value.fill(0.0);
    b.slope.value.fill(prelu_init);
    b.stats.mean.fill(0.0);
    b.stats.var.fill(1.0);
  }
  if (has_final_) {
    kaiming_uniform(final_w_, s);
    final_b_.value.fill(0.0);
  }
}

Mlp Mlp::clone_frozen(const std::string& name) const {
  Mlp out;
  out.name_ = name;
  out.in_ = in_;
  out.width_ = width_;
  out.dropout_ = dropout_;
  out.blocks_ = blocks_;
  out.has_final_ = has_final_;
  out.final_w_ = final_w_;
  out.final_b_ = final_b_;
  out.set_trainable(false);
  return out;
}

void Mlp::save_to(TensorArchive& ar, const std::string& prefix) const {
  for (const Block& b : blocks_) {
    put_param(ar, prefix, b.weight);
    put_param(ar, prefix, b.bias);
    put_param(ar, prefix, b.slope);
    if (b.normalize) {
      put_param(ar, prefix, b.gamma);
      put_param(ar, prefix, b.shift);
      const std::string tag = b.weight.name.substr(0, b.weight.name.find('.'));
      ar.put(prefix + "." + tag + ".bn_running_mean", b.stats.mean);
      ar.put(prefix + "." + tag + ".bn_running_var", b.stats.var);
    }
  }
  if (has_final_) {
    put_param(ar, prefix, final_w_);
    put_param(ar, prefix, final_b_);
  }
}

void Mlp::load_from(const TensorArchive& ar, const std::string& prefix) {
  for (Block& b : blocks_) {
    get_param(ar, prefix, b.weight);
    get_param(ar, prefix, b.bias);
    get_param(ar, prefix, b.slope);
    if (b.normalize) {
      get_param(ar, prefix, b.gamma);
      get_param(ar, prefix, b.shift);
      const std::string tag = b.weight.name.substr(0, b.weight.name.find('.'));
      b.stats.mean = ar.get(prefix + "." + tag + ".bn_running_mean");
      b.stats.var = ar.get(prefix + "." + tag + ".bn_running_var");
    }
  }
  if (has_final_) {
    get_param(ar, prefix, final_w_);
    get_param(ar, prefix, final_b_);
  }
}

HeadOutput Networks::head(Graph& g, Var phi, Mode mode, Rng& rng) {
  HeadOutput out;
  const std::size_t K = config.num_joints;
  out.raw = H.forward(g, phi, mode, rng);
  out.rot = ops::decode_rot6d(ops::slice_cols(out.raw, 0, 6 * K));
  out.beta = ops::slice_cols(out.raw, 6 * K, 6 * K + kNumBetas);
  return out;
}

namespace {

Networks build_networks(const NetConfig& c) {
  if (c.num_keypoints == 0 || c.num_joints == 0) {
    throw Error(ErrorCode::Config, "network needs k > 0 and K > 0");
  }
  Networks n;
  n.config = c;
  n.F = Mlp("F", c.input_width(), c.width, c.feature_blocks, true, c.dropout, 0, c.prelu_init);
  n.H = Mlp("H", c.width, c.width, c.head_blocks, true, c.dropout, c.head_width(), c.prelu_init);
  n.D = Mlp("D", c.width, c.width, c.critic_blocks, false, 0.0, 1, c.prelu_init);
  return n;
}

}  // namespace

Networks init_networks(const NetConfig& config, std::uint64_t seed) {
  Networks n = build_networks(config);
  n.F.init(seed, config.prelu_init);
  n.H.init(seed, config.prelu_init);
  n.D.init(seed, config.prelu_init);
  for (double& w : n.H.final_weight().value.span()) w *= config.head_final_gain;
  Tensor& bias = n.H.final_bias().value;
  for (std::size_t j = 0; j < config.num_joints; ++j) {
    bias[6 * j + 0] = 1.0;
    bias[6 * j + 4] = 1.0;
  }
  return n;
}

Prediction predict(Mlp& F, Mlp& H, const Tensor& input) {
  Graph g;
  Rng unused(0);
  Var x = g.constant(input);
  Var phi = F.forward(g, x, Mode::Eval, unused);
  Var raw = H.forward(g, phi, Mode::Eval, unused);
  const std::size_t K = (H.out_width() - kNumBetas) / 6;
  Var rot = ops::decode_rot6d(ops::slice_cols(raw, 0, 6 * K));
  Var beta = ops::slice_cols(raw, 6 * K, 6 * K + kNumBetas);
  return {phi.value(), rot.value(), beta.value()};
}

Prediction predict_chunked(Mlp& F, Mlp& H, const Tensor& input, std::size_t chunk) {
  const std::size_t B = input.rows(), w = input.cols();
  if (B <= chunk) return predict(F, H, input);
  Prediction out;
  for (std::size_t start = 0; start < B; start += chunk) {
    const std::size_t n = std::min(chunk, B - start);
    Tensor part({n, w}, std::vector<double>(input.data() + start * w, input.data() + (start + n) * w));
    Prediction p = predict(F, H, part);
    if (start == 0) {
      out.features = Tensor({B, p.features.cols()});
      out.rot = Tensor({B, p.rot.cols()});
      out.beta = Tensor({B, p.beta.cols()});
    }
    std::copy(p.features.data(), p.features.data() + p.features.size(),
              out.features.data() + start * p.features.cols());
    std::copy(p.rot.data(), p.rot.data() + p.rot.size(), out.rot.data() + start * p.rot.cols());
    std::copy(p.beta.data(), p.beta.data() + p.beta.size(), out.beta.data() + start * p.beta.cols());
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Networks& nets, const Mlp* F_pt,
                     const Json& run_config, std::uint64_t seed, std::int64_t step) {
  TensorArchive ar;
  nets.F.save_to(ar, "F");
  nets.H.save_to(ar, "H");
  nets.D.save_to(ar, "D");
  if (F_pt != nullptr) F_pt->save_to(ar, "F_pt");
  ar.meta()["version"] = 1;
  ar.meta()["network"] = to_json(nets.config);
  ar.meta()["config"] = run_config;
  ar.meta()["seed"] = seed;
  ar.meta()["step"] = step;
  ar.meta()["has_frozen"] = F_pt != nullptr;
  ar.save(path, "K2MC");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorArchive ar = TensorArchive::load(path, "K2MC");
  Checkpoint c;
  try {
    if (ar.meta().at("version").get<int>() != 1) {
      throw Error(ErrorCode::Parse, "unsupported checkpoint version");
    }
    c.config = net_config_from_json(ar.meta().at("network"));
    c.run_config = ar.meta().value("config", Json::object());
    c.seed = ar.meta().value("seed", std::uint64_t{0});
    c.step = ar.meta().value("step", std::int64_t{0});
    c.has_frozen = ar.meta().value("has_frozen", false);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("checkpoint header: ") + e.what());
  }
  c.nets = build_networks(c.config);
  c.nets.F.load_from(ar, "F");
  c.nets.H.load_from(ar, "H");
  c.nets.D.load_from(ar, "D");
  if (c.has_frozen) {
    c.F_pt = c.nets.F.clone_frozen("F_pt");
    c.F_pt.load_from(ar, "F_pt");
    c.F_pt.set_trainable(false);
  }
  return c;
}

}  // namespace k2m
