#include "stgcn/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>

#include "stgcn/errors.hpp"
#include "stgcn/rng.hpp"

namespace stgcn {

namespace {

constexpr std::uint64_t kBaseTag = 0x6261736500000000ULL;
constexpr std::uint64_t kNoiseTag = 0x6e6f697365000000ULL;

bool connected_without(const Topology& topo, std::size_t skip_i, std::size_t skip_j) {
  const std::size_t n = topo.size();
  const auto adj = topo.neighbors();
  std::vector<char> seen(n, 0);
  std::vector<std::size_t> stack{0};
  seen[0] = 1;
  std::size_t count = 1;
  while (!stack.empty()) {
    const auto u = stack.back();
    stack.pop_back();
    for (auto v : adj[u]) {
      if ((u == skip_i && v == skip_j) || (u == skip_j && v == skip_i)) continue;
      if (!seen[v]) {
        seen[v] = 1;
        ++count;
        stack.push_back(v);
      }
    }
  }
  return count == n;
}

std::size_t component_count(const Topology& topo) {
  const auto adj = topo.neighbors();
  std::vector<char> seen(topo.size(), 0);
  std::size_t comps = 0;
  for (std::size_t s = 0; s < topo.size(); ++s) {
    if (seen[s]) continue;
    ++comps;
    std::vector<std::size_t> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (auto v : adj[u]) {
        if (!seen[v]) {
          seen[v] = 1;
          stack.push_back(v);
        }
      }
    }
  }
  return comps;
}

}  // namespace

TopologyKind parse_topology_kind(const std::string& name) {
  if (name == "ring") return TopologyKind::Ring;
  if (name == "ring-chords") return TopologyKind::RingChords;
  if (name == "tree") return TopologyKind::RandomTree;
  if (name == "grid") return TopologyKind::Grid;
  throw InvalidConfig("unknown topology generator '" + name + "' (ring, ring-chords, tree, grid)");
}

std::string topology_kind_name(TopologyKind kind) {
  switch (kind) {
    case TopologyKind::Ring:
      return "ring";
    case TopologyKind::RingChords:
      return "ring-chords";
    case TopologyKind::RandomTree:
      return "tree";
    case TopologyKind::Grid:
      return "grid";
  }
  return "?";
}

Topology generate_topology(TopologyKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw InvalidConfig("a generated topology needs at least two buses");
  if ((kind == TopologyKind::Ring || kind == TopologyKind::RingChords) && n < 3) {
    throw InvalidConfig("a ring needs at least three buses");
  }
  Rng rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> lines;
  switch (kind) {
    case TopologyKind::Ring:
    case TopologyKind::RingChords:
      for (std::size_t i = 0; i < n; ++i) lines.emplace_back(i, (i + 1) % n);
      if (kind == TopologyKind::RingChords && n >= 6) {
        for (std::size_t k = 0; k < n / 4; ++k) {
          const std::size_t a = (3 * k) % n;
          const std::size_t b = (a + n / 2) % n;
          const auto key = std::minmax(a, b);
          const bool dup = std::any_of(lines.begin(), lines.end(), [&](const auto& l) {
            return std::minmax(l.first, l.second) == key;
          });
          if (!dup) lines.emplace_back(a, b);
        }
      }
      break;
    case TopologyKind::RandomTree:
      for (std::size_t i = 1; i < n; ++i) lines.emplace_back(rng.index(i), i);
      break;
    case TopologyKind::Grid: {
      const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
      for (std::size_t i = 0; i < n; ++i) {
        if ((i + 1) % cols != 0 && i + 1 < n) lines.emplace_back(i, i + 1);
        if (i + cols < n) lines.emplace_back(i, i + cols);
      }
      break;
    }
  }

  // Series admittance y = 1 / (r + jx) per line, assembled into Y.
  Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (const auto& [a, b] : lines) {
    const double x = rng.uniform(0.05, 0.25);
    const double r = x * rng.uniform(0.1, 0.3);
    const std::complex<double> yl = 1.0 / std::complex<double>(r, x);
    const auto ia = static_cast<Eigen::Index>(a), ib = static_cast<Eigen::Index>(b);
    y(ia, ib) -= yl;
    y(ib, ia) -= yl;
    y(ia, ia) += yl;
    y(ib, ib) += yl;
  }
  return Topology::from_admittance_magnitudes(y);
}

std::size_t ScenarioConfig::window_steps() const {
  return static_cast<std::size_t>(std::llround(window_seconds * sample_rate));
}

std::size_t ScenarioConfig::label_steps() const {
  return static_cast<std::size_t>(std::llround(label_window_seconds * sample_rate));
}

void ScenarioConfig::validate(std::size_t buses) const {
  if (!(sample_rate > 0.0)) throw InvalidConfig("sample rate must be positive");
  if (fault_bus && *fault_bus >= buses) throw InvalidConfig("fault bus outside the topology");
  if (planted_bus && *planted_bus >= buses) throw InvalidConfig("planted bus outside the topology");
  if (planted_bus && buses < 2) throw InvalidConfig("planted experiments need at least two buses");
  if (planted_bus) {
    for (double m : motor_ratios) {
      if (!(m * severity_max > model.collapse_threshold * (1.0 + 1e-9))) {
        throw InvalidConfig("planted experiments need severity_max * motor ratio above the collapse threshold");
      }
    }
  }
  if (!(severity_min >= 0.0 && severity_max <= 1.0 && severity_min <= severity_max)) {
    throw InvalidConfig("severity range must satisfy 0 <= min <= max <= 1");
  }
  if (motor_ratios.empty()) throw InvalidConfig("at least one motor ratio is required");
  for (double m : motor_ratios) {
    if (!(m >= 0.0 && m < 1.0)) throw InvalidConfig("motor ratios must lie in [0, 1)");
  }
  if (window_steps() < 2) throw InvalidConfig("window must hold at least two snapshots");
  if (label_window_seconds < window_seconds) throw InvalidConfig("label window shorter than model window");
}

OperatingPoint operating_point(std::size_t buses, std::uint64_t seed) {
  auto rng = Rng::derive(seed, {kBaseTag});
  OperatingPoint op;
  for (std::size_t i = 0; i < buses; ++i) {
    op.p0.push_back(rng.uniform(0.2, 1.0));
    op.q0.push_back(rng.uniform(0.05, 0.3));
  }
  return op;
}

Trajectory simulate_case(const Topology& topology, const ScenarioConfig& cfg, const OperatingPoint& op,
                         const CaseSpec& spec, std::size_t steps) {
  const std::size_t n = topology.size();
  const auto& m = cfg.model;
  const auto hops = topology.hop_distances(spec.fault_bus);
  Trajectory tr{Tensor({steps, n}), Tensor({steps, n}), Tensor({steps, n})};
  for (std::size_t i = 0; i < n; ++i) {
    const double local = hops[i] == std::numeric_limits<std::size_t>::max()
                             ? 0.0
                             : spec.severity * spec.motor_ratio * std::pow(m.rho, static_cast<double>(hops[i]));
    const bool collapse = local > m.collapse_threshold;
    const double v_dip = 1.0 - local;
    for (std::size_t k = 0; k < steps; ++k) {
      const double t = static_cast<double>(k) / cfg.sample_rate;
      const double v = collapse ? m.v_low + (v_dip - m.v_low) * std::exp(-t / m.tau_collapse)
                                : 1.0 - local * std::exp(-t / m.tau);
      tr.V[k * n + i] = v;
      tr.P[k * n + i] = op.p0[i] * v * v;
      tr.Q[k * n + i] = op.q0[i] + m.kappa * spec.motor_ratio * (1.0 - v);
    }
  }
  return tr;
}

Label label_trajectory(const Tensor& voltages, double sample_rate, const TrajectoryModel& model) {
  const std::size_t steps = voltages.shape().at(0);
  const std::size_t n = voltages.shape().at(1);
  const double dt = 1.0 / sample_rate;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t run = 0;
    for (std::size_t k = 0; k < steps; ++k) {
      if (voltages[k * n + i] < model.low_voltage) {
        ++run;
        if (static_cast<double>(run) * dt > model.max_low_seconds) return Label::Unstable;
      } else {
        run = 0;
      }
    }
  }
  return Label::Stable;
}

std::size_t LabeledDataset::unstable_count() const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.label == Label::Unstable; }));
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& indices) const {
  LabeledDataset out;
  out.topology = topology;
  out.config = config;
  out.snr_db = snr_db;
  out.noise_seed = noise_seed;
  out.topology_changes = topology_changes;
  for (auto i : indices) {
    out.samples.push_back(samples.at(i));
    if (i < provenance.size()) out.provenance.push_back(provenance[i]);
  }
  return out;
}

LabeledDataset generate(const ScenarioConfig& cfg, const Topology& topology, std::size_t count) {
  const std::size_t n = topology.size();
  cfg.validate(n);
  const auto op = operating_point(n, cfg.operating_point_seed);
  const std::size_t window = cfg.window_steps();
  const std::size_t label_steps = std::max(cfg.label_steps(), window);

  LabeledDataset ds;
  ds.topology = topology;
  ds.config = cfg;
  ds.samples.reserve(count);
  ds.provenance.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    auto rng = Rng::derive(cfg.seed, {c});
    CaseSpec spec;
    spec.motor_ratio = cfg.motor_ratios[rng.index(cfg.motor_ratios.size())];
    double sev_hi = cfg.severity_max;
    double sev_lo_floor = 0.0;
    if (cfg.planted_bus) {
      if (rng.uniform() < 0.5) {
        spec.fault_bus = *cfg.planted_bus;
        sev_lo_floor = cfg.model.collapse_threshold / spec.motor_ratio * (1.0 + 1e-9);
      } else {
        spec.fault_bus = rng.index(n - 1);
        if (spec.fault_bus >= *cfg.planted_bus) ++spec.fault_bus;
        if (spec.motor_ratio > 0.0) {
          sev_hi = std::min(sev_hi, 0.95 * cfg.model.collapse_threshold / spec.motor_ratio);
        }
      }
    } else {
      spec.fault_bus = cfg.fault_bus ? *cfg.fault_bus : rng.index(n);
    }
    const double sev_lo = std::min(std::max(cfg.severity_min, sev_lo_floor), sev_hi);
    spec.severity = rng.uniform(sev_lo, sev_hi);

    auto tr = simulate_case(topology, cfg, op, spec, label_steps);
    SvsSample s;
    s.label = label_trajectory(tr.V, cfg.sample_rate, cfg.model);
    const std::size_t keep = window * n;
    s.V = Tensor({window, n}, std::vector<double>(tr.V.data().begin(), tr.V.data().begin() + static_cast<long>(keep)));
    s.P = Tensor({window, n}, std::vector<double>(tr.P.data().begin(), tr.P.data().begin() + static_cast<long>(keep)));
    s.Q = Tensor({window, n}, std::vector<double>(tr.Q.data().begin(), tr.Q.data().begin() + static_cast<long>(keep)));
    ds.samples.push_back(std::move(s));
    ds.provenance.push_back(spec);
  }
  return ds;
}

LabeledDataset add_noise(const LabeledDataset& dataset, double snr_db, std::uint64_t seed) {
  LabeledDataset out = dataset;
  if (std::isinf(snr_db) && snr_db > 0) return out;
  if (!std::isfinite(snr_db)) throw InvalidConfig("SNR must be finite or +inf");
  out.snr_db = snr_db;
  out.noise_seed = seed;
  for (auto c : kChannels) {
    double power = 0.0, count = 0.0;
    for (const auto& s : dataset.samples) {
      for (double v : s.channel(c).data()) {
        power += v * v;
        count += 1.0;
      }
    }
    if (count == 0.0) continue;
    power /= count;
    const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
    for (std::size_t k = 0; k < out.samples.size(); ++k) {
      auto rng = Rng::derive(seed, {kNoiseTag, static_cast<std::uint64_t>(c), k});
      auto& s = out.samples[k];
      Tensor& t = c == Channel::V ? s.V : (c == Channel::P ? s.P : s.Q);
      for (auto& v : t.data()) v += sigma * rng.normal();
    }
  }
  return out;
}

double measured_snr_db(const LabeledDataset& clean, const LabeledDataset& noisy, Channel channel) {
  double signal = 0.0, noise = 0.0;
  for (std::size_t k = 0; k < clean.samples.size(); ++k) {
    const auto& a = clean.samples[k].channel(channel);
    const auto& b = noisy.samples.at(k).channel(channel);
    for (std::size_t i = 0; i < a.size(); ++i) {
      signal += a[i] * a[i];
      noise += (b[i] - a[i]) * (b[i] - a[i]);
    }
  }
  return 10.0 * std::log10(signal / noise);
}

Topology perturb_topology(const Topology& topology, int changes, std::uint64_t seed) {
  if (changes < 0) throw InvalidConfig("topology change count must be >= 0");
  auto edges = topology.edges();
  if (static_cast<std::size_t>(changes) > edges.size()) {
    throw Infeasible("requested " + std::to_string(changes) + " topology changes but only " +
                     std::to_string(edges.size()) + " edges exist");
  }
  if (changes == 0) return topology;
  Rng rng(seed);
  std::vector<std::size_t> order(edges.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  Topology current = topology;
  const std::size_t comps = component_count(topology);
  for (int c = 0; c < changes; ++c) {
    const Edge target = edges[order[static_cast<std::size_t>(c)]];
    // Removing a bridge would split the grid; halve its weight instead.
    bool bridge;
    if (comps == 1) {
      bridge = !connected_without(current, target.i, target.j);
    } else {
      std::vector<Edge> trial;
      for (const auto& e : current.edges()) {
        if (!(e.i == target.i && e.j == target.j)) trial.push_back(e);
      }
      bool isolated = false;
      std::vector<double> deg(current.size(), 0.0);
      for (const auto& e : trial) deg[e.i] += e.weight, deg[e.j] += e.weight;
      for (double d : deg) isolated = isolated || !(d > 0.0);
      bridge = isolated || component_count(Topology::from_edges(current.size(), trial)) > comps;
    }
    std::vector<Edge> next;
    for (const auto& e : current.edges()) {
      if (e.i == target.i && e.j == target.j) {
        if (bridge) next.push_back({e.i, e.j, e.weight * 0.5});
      } else {
        next.push_back(e);
      }
    }
    current = Topology::from_edges(current.size(), next);
  }
  return current;
}

}  // namespace stgcn
