#pragma once
// Feature extractor F, SMPL head H and domain critic D as block MLPs:
// affine -> [batch norm] -> PReLU -> dropout, with an identity skip around
// every block whose input and output widths match.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "key2mesh/archive.hpp"
#include "key2mesh/body_model.hpp"
#include "key2mesh/graph.hpp"

namespace k2m {

struct NetConfig {
  std::size_t num_keypoints = 12;  // k
  std::size_t num_joints = 16;     // K
  std::size_t width = 1024;        // d
  std::size_t feature_blocks = 5;
  std::size_t head_blocks = 2;
  std::size_t critic_blocks = 2;
  double dropout = 0.2;
  double prelu_init = 0.25;
  double head_final_gain = 1.0;  // multiplies the Kaiming bound of H's output layer

  std::size_t input_width() const { return 2 * num_keypoints; }
  std::size_t head_width() const { return 6 * num_joints + kNumBetas; }
};

Json to_json(const NetConfig& c);
NetConfig net_config_from_json(const Json& j);

struct Block {
  Parameter weight;  // in x out
  Parameter bias;    // out
  Parameter gamma;   // out, unused without normalisation
  Parameter shift;   // out
  Parameter slope;   // out
  RunningStats stats;
  bool normalize = true;
  bool skip = false;
};

/// Stack of blocks plus an optional final affine layer.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, std::size_t in, std::size_t width, std::size_t blocks, bool normalize,
      double dropout, std::size_t out, double prelu_init);

  // Parameters are referenced by address from graphs and optimisers.
  Mlp(const Mlp&) = delete;
  Mlp& operator=(const Mlp&) = delete;
  Mlp(Mlp&&) = default;
  Mlp& operator=(Mlp&&) = default;

  /// Train mode updates batch-norm running statistics and draws dropout
  /// masks from `rng`; eval mode is pure.
  Var forward(Graph& g, Var x, Mode mode, Rng& rng);

  const std::string& name() const { return name_; }
  std::size_t in_width() const { return in_; }
  std::size_t out_width() const;
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  bool has_final() const { return has_final_; }
  Parameter& final_weight() { return final_w_; }
  Parameter& final_bias() { return final_b_; }
  double dropout() const { return dropout_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  void set_trainable(bool trainable);
  bool trainable() const;

  /// Kaiming-uniform weights (|w| <= sqrt(6 / fan_in)), zero biases,
  /// unit batch-norm scale, PReLU slopes at prelu_init, running stats (0, 1).
  void init(std::uint64_t seed, double prelu_init);

  /// Deep copy flagged non-trainable under a new name.
  Mlp clone_frozen(const std::string& name) const;

  /// Archive entries are "<prefix>.<param>" plus running statistics.
  void save_to(TensorArchive& ar, const std::string& prefix) const;
  void load_from(const TensorArchive& ar, const std::string& prefix);

 private:
  std::string name_;
  std::size_t in_ = 0;
  std::size_t width_ = 0;
  double dropout_ = 0.0;
  std::vector<Block> blocks_;
  bool has_final_ = false;
  Parameter final_w_;
  Parameter final_b_;
};

/// Graph values of one head evaluation.
struct HeadOutput {
  Var raw;   // B x (6K + 10)
  Var rot;   // B x 9K decoded rotations
  Var beta;  // B x 10
};

struct Networks {
  NetConfig config;
  Mlp F;
  Mlp H;
  Mlp D;

  Var features(Graph& g, Var x, Mode mode, Rng& rng) { return F.forward(g, x, mode, rng); }
  HeadOutput head(Graph& g, Var phi, Mode mode, Rng& rng);
  Var critic(Graph& g, Var phi, Rng& rng) { return D.forward(g, phi, Mode::Eval, rng); }
};

/// Deterministic per seed. The head's final bias decodes zero features to
/// identity rotations and zero shape.
Networks init_networks(const NetConfig& config, std::uint64_t seed);

/// Evaluation-mode feature/head pass outside of any training graph.
struct Prediction {
  Tensor features;  // B x d
  Tensor rot;       // B x 9K
  Tensor beta;      // B x 10
};
Prediction predict(Mlp& F, Mlp& H, const Tensor& input);

/// Batched evaluation in chunks of `chunk` rows.
Prediction predict_chunked(Mlp& F, Mlp& H, const Tensor& input, std::size_t chunk = 512);

/// Checkpoint: networks plus optional frozen pre-trained twin and metadata.
struct Checkpoint {
  NetConfig config;
  Networks nets;
  bool has_frozen = false;
  Mlp F_pt;
  Json run_config = Json::object();
  std::uint64_t seed = 0;
  std::int64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Networks& nets, const Mlp* F_pt,
                     const Json& run_config, std::uint64_t seed, std::int64_t step);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace k2m
