#include "stgcn/model.hpp"

#include <cmath>

#include "stgcn/errors.hpp"

namespace stgcn {

const char* label_name(Label label) { return label == Label::Stable ? "stable" : "unstable"; }

const char* channel_name(Channel c) {
  switch (c) {
    case Channel::V:
      return "V";
    case Channel::P:
      return "P";
    case Channel::Q:
      return "Q";
  }
  return "?";
}

const Tensor& SvsSample::channel(Channel c) const {
  switch (c) {
    case Channel::V:
      return V;
    case Channel::P:
      return P;
    case Channel::Q:
      return Q;
  }
  throw DimensionMismatch("unknown channel");
}

void SvsSample::validate() const {
  if (V.rank() != 2) throw DimensionMismatch("sample V must be [N, n], got " + shape_str(V.shape()));
  if (P.shape() != V.shape() || Q.shape() != V.shape()) {
    throw DimensionMismatch("sample channels differ: V " + shape_str(V.shape()) + " P " + shape_str(P.shape()) +
                            " Q " + shape_str(Q.shape()));
  }
  if (V.shape()[0] < 2) throw DimensionMismatch("sample needs at least two snapshots");
  if (V.shape()[1] < 1) throw DimensionMismatch("sample has no buses");
  for (auto c : kChannels) {
    if (!channel(c).all_finite()) throw NonFiniteValue(std::string("sample channel ") + channel_name(c));
  }
}

void ModelConfig::validate() const {
  if (cheb_order < 1) throw InvalidConfig("Chebyshev order K must be >= 1");
  if (blocks < 1) throw InvalidConfig("block count must be >= 1");
  if (hidden < 1) throw InvalidConfig("hidden width must be >= 1");
  if (kernel_t < 1 || kernel_t % 2 == 0) throw InvalidConfig("temporal kernel length must be odd");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidConfig("dropout rate must lie in [0, 1)");
  if (window < 2) throw InvalidConfig("window must hold at least two snapshots");
  if (buses < 1) throw InvalidConfig("bus count must be >= 1");
}

NormStats NormStats::fit(const std::vector<SvsSample>& samples) {
  NormStats s;
  if (samples.empty()) return s;
  for (auto c : kChannels) {
    const auto ci = static_cast<std::size_t>(c);
    double sum = 0.0, sq = 0.0, count = 0.0;
    for (const auto& smp : samples) {
      for (double v : smp.channel(c).data()) {
        sum += v;
        sq += v * v;
        count += 1.0;
      }
    }
    const double mean = sum / count;
    const double var = std::max(sq / count - mean * mean, 0.0);
    s.mean[ci] = mean;
    s.scale[ci] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Parameters

std::string ModelParams::theta_name(int block, Channel c) {
  return "block" + std::to_string(block) + "." + channel_name(c) + ".theta";
}
std::string ModelParams::tkernel_name(int block, Channel c) {
  return "block" + std::to_string(block) + "." + channel_name(c) + ".tkernel";
}
std::string ModelParams::norm_scale_name(int block, Channel c) {
  return "block" + std::to_string(block) + "." + channel_name(c) + ".norm_scale";
}
std::string ModelParams::norm_shift_name(int block, Channel c) {
  return "block" + std::to_string(block) + "." + channel_name(c) + ".norm_shift";
}

std::size_t ModelParams::psi_index(const ModelConfig& cfg, Channel c) {
  const std::size_t base = static_cast<std::size_t>(cfg.blocks) * 3 * kPerChannel;
  switch (c) {
    case Channel::P:
      return base;
    case Channel::Q:
      return base + 1;
    case Channel::V:
      return base + 2;
  }
  return base;
}

std::size_t ModelParams::sb_index(const ModelConfig& cfg) {
  return static_cast<std::size_t>(cfg.blocks) * 3 * kPerChannel + 3;
}

namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace

ModelParams ModelParams::initialize(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto k1 = static_cast<std::size_t>(cfg.cheb_order + 1);
  const auto h = static_cast<std::size_t>(cfg.hidden);
  const auto kt = static_cast<std::size_t>(cfg.kernel_t);
  ModelParams mp;
  for (int j = 0; j < cfg.blocks; ++j) {
    const std::size_t cin = j == 0 ? 1 : h;
    for (auto c : kChannels) {
      mp.params_.emplace_back(theta_name(j, c), glorot({k1, cin, 2 * h}, k1 * cin, 2 * h, rng));
      mp.params_.emplace_back(tkernel_name(j, c), glorot({kt, h, 2 * h}, kt * h, 2 * h, rng));
      mp.params_.emplace_back(norm_scale_name(j, c), glorot({h}, h, h, rng));
      mp.params_.emplace_back(norm_shift_name(j, c), glorot({h}, h, h, rng));
    }
  }
  mp.params_.emplace_back("node.psi_P", Tensor::scalar(1.0 / 3.0));
  mp.params_.emplace_back("node.psi_Q", Tensor::scalar(1.0 / 3.0));
  mp.params_.emplace_back("node.psi_V", Tensor::scalar(1.0 / 3.0));
  mp.params_.emplace_back("system.Sb", Tensor({2, cfg.buses}, 0.0));
  return mp;
}

std::size_t ModelParams::expected_scalar_count(const ModelConfig& cfg) {
  const auto k1 = static_cast<std::size_t>(cfg.cheb_order + 1);
  const auto h = static_cast<std::size_t>(cfg.hidden);
  const auto kt = static_cast<std::size_t>(cfg.kernel_t);
  std::size_t total = 0;
  for (int j = 0; j < cfg.blocks; ++j) {
    const std::size_t cin = j == 0 ? 1 : h;
    total += 3 * (k1 * cin * 2 * h + kt * h * 2 * h + 2 * h);
  }
  return total + 3 + 2 * cfg.buses;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.size();
  return total;
}

std::size_t ModelParams::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw InvalidConfig("no parameter named " + std::string(name));
}

Parameter& ModelParams::get(std::string_view name) { return params_[index_of(name)]; }
const Parameter& ModelParams::get(std::string_view name) const { return params_[index_of(name)]; }

void ModelParams::zero_grads() {
  for (auto& p : params_) p.zero_grad();
}

ModelParams ModelParams::from_parameters(std::vector<Parameter> params) {
  ModelParams mp;
  mp.params_ = std::move(params);
  return mp;
}

BoundParams bind(ModelParams& params) {
  BoundParams b;
  for (auto& p : params.all()) b.vars.push_back(ad::Var::leaf(p.value, &p.grad));
  return b;
}

BoundParams bind(const ModelParams& params, std::vector<Tensor>& sinks) {
  if (sinks.size() != params.size()) throw ShapeMismatch("gradient sink count mismatch");
  BoundParams b;
  for (std::size_t i = 0; i < params.size(); ++i) b.vars.push_back(ad::Var::leaf(params.all()[i].value, &sinks[i]));
  return b;
}

BoundParams bind_constant(const ModelParams& params) {
  BoundParams b;
  for (const auto& p : params.all()) b.vars.push_back(ad::Var::constant(p.value));
  return b;
}

Batch make_batch(const std::vector<const SvsSample*>& samples, const NormStats& norm) {
  if (samples.empty()) throw EmptyDataset("empty batch");
  const std::size_t steps = samples.front()->steps();
  const std::size_t buses = samples.front()->buses();
  const std::size_t per = steps * buses;
  Batch batch;
  for (auto c : kChannels) {
    const auto ci = static_cast<std::size_t>(c);
    Tensor t({samples.size(), steps, buses, 1});
    for (std::size_t b = 0; b < samples.size(); ++b) {
      const auto& src = samples[b]->channel(c);
      if (src.shape() != Shape{steps, buses}) throw DimensionMismatch("batch samples differ in shape");
      for (std::size_t k = 0; k < per; ++k) t[b * per + k] = (src[k] - norm.mean[ci]) / norm.scale[ci];
    }
    batch.inputs[ci] = std::move(t);
  }
  for (const auto* s : samples) batch.labels.push_back(static_cast<int>(s->label));
  return batch;
}

Label predict_from_probs(double p_stable, double p_unstable) {
  return p_stable >= p_unstable ? Label::Stable : Label::Unstable;
}

// ---------------------------------------------------------------------------
// Layers

ad::Var graph_conv_linear(const ad::Var& x, const ChebFilterBank& bank, const ad::Var& theta) {
  const auto& xs = x.shape();
  const auto& ts = theta.shape();
  if (xs.size() != 4) throw ShapeMismatch("graph_conv: input must be [B,N,n,C], got " + shape_str(xs));
  if (bank.size() != xs[2]) {
    throw TopologyMismatch("filter bank has " + std::to_string(bank.size()) + " buses, input has " +
                           std::to_string(xs[2]));
  }
  const auto k1 = static_cast<std::size_t>(bank.order() + 1);
  if (ts.size() != 3 || ts[0] != k1 || ts[1] != xs[3]) {
    throw ShapeMismatch("graph_conv: theta " + shape_str(ts) + " for order " + std::to_string(bank.order()) +
                        " and input " + shape_str(xs));
  }
  std::vector<ad::Var> terms;
  terms.reserve(k1);
  terms.push_back(x);  // T_0 = I
  for (std::size_t i = 1; i < k1; ++i) terms.push_back(ad::sparse_dense_matmul(bank.shared_term(i), x));
  auto stacked = k1 == 1 ? x : ad::concat(terms, -1);  // [B,N,n,(K+1)C], order-major
  return ad::matmul(stacked, ad::reshape(theta, {k1 * ts[1], ts[2]}));
}

ad::Var graph_conv(const ad::Var& x, const ChebFilterBank& bank, const ad::Var& theta) {
  return ad::glu(graph_conv_linear(x, bank, theta));
}

ad::Var temporal_conv(const ad::Var& x, const ad::Var& kernel) {
  return ad::glu(ad::conv1d_same(x, kernel));
}

BlockParams block_params(const BoundParams& bound, int block) {
  BlockParams p;
  for (auto c : kChannels) {
    const auto ci = static_cast<std::size_t>(c);
    p.theta[ci] = bound[ModelParams::theta_index(block, c)];
    p.tkernel[ci] = bound[ModelParams::tkernel_index(block, c)];
    p.norm_scale[ci] = bound[ModelParams::norm_scale_index(block, c)];
    p.norm_shift[ci] = bound[ModelParams::norm_shift_index(block, c)];
  }
  return p;
}

ChannelTensors st_block(const ChannelTensors& x, const ChebFilterBank& bank, const BlockParams& p, double dropout,
                        bool training, Rng& rng) {
  ChannelTensors out;
  for (std::size_t c = 0; c < 3; ++c) {
    auto h = graph_conv(x[c], bank, p.theta[c]);
    h = temporal_conv(h, p.tkernel[c]);
    h = ad::scale_shift(ad::layer_norm(h, -1, kLayerNormEps), p.norm_scale[c], p.norm_shift[c]);
    out[c] = ad::dropout(h, dropout, training, rng);
  }
  return out;
}

ChannelTensors fuse_blocks(const std::vector<ChannelTensors>& outputs) {
  if (outputs.empty()) throw ShapeMismatch("fuse_blocks needs at least one block output");
  ChannelTensors fused = outputs.front();
  for (std::size_t j = 1; j < outputs.size(); ++j) {
    for (std::size_t c = 0; c < 3; ++c) fused[c] = ad::add(fused[c], outputs[j][c]);
  }
  return fused;
}

ad::Var node_layer(const ChannelTensors& fused, const ad::Var& psi_p, const ad::Var& psi_q, const ad::Var& psi_v) {
  auto reduce = [](const ad::Var& t) {
    if (t.shape().size() != 4) throw ShapeMismatch("node_layer expects [B,N,n,H], got " + shape_str(t.shape()));
    return ad::mean_over_axis(ad::mean_over_axis(t, 3), 1);  // [B, n]
  };
  const auto v = reduce(fused[static_cast<std::size_t>(Channel::V)]);
  const auto p = reduce(fused[static_cast<std::size_t>(Channel::P)]);
  const auto q = reduce(fused[static_cast<std::size_t>(Channel::Q)]);
  const auto s = ad::add(ad::add(ad::scale_by(p, psi_p), ad::scale_by(q, psi_q)), ad::scale_by(v, psi_v));
  return ad::abs_forward(ad::layer_norm(s, -1, kLayerNormEps));
}

SystemOutput system_layer(const ad::Var& snode, const ad::Var& sb) {
  const auto& ss = snode.shape();
  if (ss.size() != 2 || sb.shape() != Shape{2, ss[1]}) {
    throw ShapeMismatch("system_layer: Snode " + shape_str(ss) + " with Sb " + shape_str(sb.shape()));
  }
  const std::size_t n = ss[1];
  const auto assign = ad::softmax(sb, 0);  // [2, n], columns sum to 1
  SystemOutput out;
  out.logits = ad::matmul(snode, ad::transpose(assign));
  out.probs = ad::softmax(out.logits, 1);
  out.influence = ad::reshape(ad::add(ad::slice(assign, 0, 0, 1), ad::scalar_mul(ad::slice(assign, 0, 1, 2), -1.0)), {n});
  return out;
}

AssessmentResult ForwardResult::assessment(std::size_t row) const {
  AssessmentResult r;
  const auto& pv = probs.value();
  r.probs = {pv[row * 2], pv[row * 2 + 1]};
  r.predicted = predict_from_probs(r.probs[0], r.probs[1]);
  r.influence = influence.value().values();
  const std::size_t n = snode.shape()[1];
  const auto& sv = snode.value();
  r.node_repr.assign(sv.data().begin() + static_cast<long>(row * n), sv.data().begin() + static_cast<long>((row + 1) * n));
  return r;
}

// ---------------------------------------------------------------------------
// Network

Stgcn::Stgcn(ModelConfig cfg, const Topology& topology)
    : Stgcn(cfg, build_cheb_bank(build_laplacian(topology), cfg.cheb_order)) {}

Stgcn::Stgcn(ModelConfig cfg, ChebFilterBank bank) : cfg_(cfg), bank_(std::move(bank)) {
  cfg_.validate();
  if (bank_.order() != cfg_.cheb_order) throw InvalidConfig("filter bank order differs from config");
  if (bank_.size() != cfg_.buses) {
    throw TopologyMismatch("topology has " + std::to_string(bank_.size()) + " buses, model expects " +
                           std::to_string(cfg_.buses));
  }
}

void Stgcn::check_batch(const Batch& batch) const {
  for (const auto& t : batch.inputs) {
    if (t.rank() != 4 || t.shape()[1] != cfg_.window || t.shape()[2] != cfg_.buses || t.shape()[3] != 1) {
      throw DimensionMismatch("batch input " + shape_str(t.shape()) + " does not match model window " +
                              std::to_string(cfg_.window) + " x buses " + std::to_string(cfg_.buses));
    }
  }
}

ForwardResult Stgcn::forward(const Batch& batch, const BoundParams& params, bool training, Rng& rng) const {
  check_batch(batch);
  ForwardResult out;
  ChannelTensors x;
  for (std::size_t c = 0; c < 3; ++c) x[c] = ad::Var::constant(batch.inputs[c]);
  for (int j = 0; j < cfg_.blocks; ++j) {
    x = st_block(x, bank_, block_params(params, j), cfg_.dropout, training, rng);
    out.block_outputs.push_back(x);
  }
  out.fused = fuse_blocks(out.block_outputs);
  out.snode = node_layer(out.fused, params[ModelParams::psi_index(cfg_, Channel::P)],
                         params[ModelParams::psi_index(cfg_, Channel::Q)],
                         params[ModelParams::psi_index(cfg_, Channel::V)]);
  auto sys = system_layer(out.snode, params[ModelParams::sb_index(cfg_)]);
  out.logits = sys.logits;
  out.probs = sys.probs;
  out.influence = sys.influence;
  return out;
}

ad::Var Stgcn::loss(const ForwardResult& out, const Batch& batch) { return ad::cross_entropy(out.logits, batch.labels); }

AssessmentResult Stgcn::assess(const SvsSample& sample, const ModelParams& params, const NormStats& norm) const {
  sample.validate();
  if (sample.buses() != cfg_.buses) {
    throw TopologyMismatch("sample has " + std::to_string(sample.buses()) + " buses, model expects " +
                           std::to_string(cfg_.buses));
  }
  Rng unused(0);
  const auto batch = make_batch({&sample}, norm);
  return forward(batch, bind_constant(params), false, unused).assessment(0);
}

}  // namespace stgcn
