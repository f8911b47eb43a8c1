#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "stgcn/autodiff.hpp"
#include "stgcn/graph_spectral.hpp"
#include "stgcn/parameter.hpp"

namespace stgcn {

enum class Label : std::uint8_t { Stable = 0, Unstable = 1 };

const char* label_name(Label label);

/// Physical input channels, in storage order.
enum class Channel : std::size_t { V = 0, P = 1, Q = 2 };
inline constexpr std::array<Channel, 3> kChannels{Channel::V, Channel::P, Channel::Q};
const char* channel_name(Channel c);

/// One post-fault case: N snapshots of n buses per channel.
struct SvsSample {
  Tensor V;  // [N, n] voltage magnitude, p.u.
  Tensor P;  // [N, n] active injection, p.u.
  Tensor Q;  // [N, n] reactive injection, p.u.
  Label label = Label::Stable;

  std::size_t steps() const { return V.shape().at(0); }
  std::size_t buses() const { return V.shape().at(1); }
  const Tensor& channel(Channel c) const;
  /// Throws DimensionMismatch / NonFiniteValue when invariants fail.
  void validate() const;
};

struct ModelConfig {
  int cheb_order = 2;   // K
  int blocks = 5;       // L_c
  int hidden = 8;       // H, features per channel
  int kernel_t = 3;     // temporal kernel length, odd
  double dropout = 0.1;
  std::size_t window = 25;  // N
  std::size_t buses = 10;   // n

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Per-channel input standardization fitted on a training set.
struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> scale{1.0, 1.0, 1.0};

  static NormStats fit(const std::vector<SvsSample>& samples);
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Every learnable tensor of the network in a fixed order: for each block
/// and channel {theta, tkernel, norm_scale, norm_shift}, then psi_P, psi_Q,
/// psi_V and the assignment matrix Sb.
class ModelParams {
 public:
  static constexpr std::size_t kPerChannel = 4;

  ModelParams() = default;
  static ModelParams initialize(const ModelConfig& cfg, std::uint64_t seed);
  /// Scalar count implied by a configuration.
  static std::size_t expected_scalar_count(const ModelConfig& cfg);

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  void zero_grads();

  static std::string theta_name(int block, Channel c);
  static std::string tkernel_name(int block, Channel c);
  static std::string norm_scale_name(int block, Channel c);
  static std::string norm_shift_name(int block, Channel c);

  static std::size_t theta_index(int block, Channel c) { return slot(block, c); }
  static std::size_t tkernel_index(int block, Channel c) { return slot(block, c) + 1; }
  static std::size_t norm_scale_index(int block, Channel c) { return slot(block, c) + 2; }
  static std::size_t norm_shift_index(int block, Channel c) { return slot(block, c) + 3; }
  static std::size_t psi_index(const ModelConfig& cfg, Channel c);
  static std::size_t sb_index(const ModelConfig& cfg);

  /// Builds an empty layout with the given names/shapes; used when loading.
  static ModelParams from_parameters(std::vector<Parameter> params);

 private:
  static std::size_t slot(int block, Channel c) {
    return (static_cast<std::size_t>(block) * 3 + static_cast<std::size_t>(c)) * kPerChannel;
  }

  std::vector<Parameter> params_;
};

/// Differentiable views of ModelParams for one forward pass.
struct BoundParams {
  std::vector<ad::Var> vars;
  const ad::Var& operator[](std::size_t i) const { return vars[i]; }
};

/// Leaves accumulate into each Parameter's own grad.
BoundParams bind(ModelParams& params);
/// Leaves accumulate into `sinks` (one tensor per parameter, shaped alike).
BoundParams bind(const ModelParams& params, std::vector<Tensor>& sinks);
/// Constants: no gradient tracking.
BoundParams bind_constant(const ModelParams& params);

/// Per-channel model inputs, standardized, shaped [B, N, n, 1].
struct Batch {
  std::array<Tensor, 3> inputs;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

Batch make_batch(const std::vector<const SvsSample*>& samples, const NormStats& norm);

struct AssessmentResult {
  std::array<double, 2> probs{0.5, 0.5};  // (stable, unstable)
  Label predicted = Label::Stable;
  std::vector<double> influence;  // S per bus
  std::vector<double> node_repr;  // Snode per bus
};

/// Stable wins ties.
Label predict_from_probs(double p_stable, double p_unstable);

using ChannelTensors = std::array<ad::Var, 3>;

/// Pre-activation graph convolution sum_i T_i X_t theta[i] for X[B,N,n,Cin],
/// theta[(K+1),Cin,F] -> [B,N,n,F].
ad::Var graph_conv_linear(const ad::Var& x, const ChebFilterBank& bank, const ad::Var& theta);
/// graph_conv_linear followed by GLU over the doubled feature axis.
ad::Var graph_conv(const ad::Var& x, const ChebFilterBank& bank, const ad::Var& theta);
/// Same-padded temporal convolution x[B,N,n,H] with kernel[kt,H,2H], then GLU.
ad::Var temporal_conv(const ad::Var& x, const ad::Var& kernel);

struct BlockParams {
  std::array<ad::Var, 3> theta, tkernel, norm_scale, norm_shift;
};
BlockParams block_params(const BoundParams& bound, int block);

inline constexpr double kLayerNormEps = 1e-5;

/// graph conv -> temporal conv -> layer norm over features -> dropout, per channel.
ChannelTensors st_block(const ChannelTensors& x, const ChebFilterBank& bank, const BlockParams& p,
                        double dropout, bool training, Rng& rng);
/// Elementwise sum of the per-block outputs, per channel.
ChannelTensors fuse_blocks(const std::vector<ChannelTensors>& outputs);
/// |LayerNorm_buses(psi_P p + psi_Q q + psi_V v)| with each channel averaged
/// over time and features; fused tensors [B,N,n,H] -> [B,n].
ad::Var node_layer(const ChannelTensors& fused, const ad::Var& psi_p, const ad::Var& psi_q, const ad::Var& psi_v);

struct SystemOutput {
  ad::Var logits;     // [B,2]
  ad::Var probs;      // [B,2]
  ad::Var influence;  // [n], softmax(Sb)^T column 0 minus column 1
};
SystemOutput system_layer(const ad::Var& snode, const ad::Var& sb);

struct ForwardResult {
  ad::Var logits;
  ad::Var probs;
  ad::Var snode;
  ad::Var influence;
  ChannelTensors fused;
  std::vector<ChannelTensors> block_outputs;

  AssessmentResult assessment(std::size_t row) const;
};

/// The full network bound to one topology.
class Stgcn {
 public:
  Stgcn(ModelConfig cfg, const Topology& topology);
  Stgcn(ModelConfig cfg, ChebFilterBank bank);

  const ModelConfig& config() const { return cfg_; }
  const ChebFilterBank& bank() const { return bank_; }

  ForwardResult forward(const Batch& batch, const BoundParams& params, bool training, Rng& rng) const;
  /// Mean cross-entropy of the forward logits against the batch labels.
  static ad::Var loss(const ForwardResult& out, const Batch& batch);

  /// Inference on a single case.
  AssessmentResult assess(const SvsSample& sample, const ModelParams& params, const NormStats& norm) const;

 private:
  void check_batch(const Batch& batch) const;

  ModelConfig cfg_;
  ChebFilterBank bank_;
};

}  // namespace stgcn
