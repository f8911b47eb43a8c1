#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stgcn/graph_spectral.hpp"
#include "stgcn/model.hpp"

namespace stgcn {

enum class TopologyKind { Ring, RingChords, RandomTree, Grid };

TopologyKind parse_topology_kind(const std::string& name);
std::string topology_kind_name(TopologyKind kind);

/// Synthetic grid: random line impedances turned into a node admittance
/// matrix, whose off-diagonal magnitudes become the edge weights.
Topology generate_topology(TopologyKind kind, std::size_t n, std::uint64_t seed);

/// Constants of the closed-form post-fault trajectory model.
struct TrajectoryModel {
  double rho = 0.6;                 // severity decay per hop
  double collapse_threshold = 0.55; // local severity above which a bus collapses
  double v_low = 0.6;               // collapsed settling voltage
  double tau = 0.8;                 // recovery time constant, s
  double tau_collapse = 0.5;        // collapse time constant, s
  double kappa = 1.5;               // motor reactive demand gain
  double low_voltage = 0.8;         // practical-criterion voltage threshold
  double max_low_seconds = 1.0;     // allowed time below low_voltage

  friend bool operator==(const TrajectoryModel&, const TrajectoryModel&) = default;
};

struct ScenarioConfig {
  std::optional<std::size_t> fault_bus;  // random per case when unset
  /// When set, the label is decided by this bus: half of the cases fault here
  /// with a severity that always collapses, the rest fault elsewhere with
  /// severity capped below collapse.
  std::optional<std::size_t> planted_bus;
  double severity_min = 0.0;
  double severity_max = 1.0;
  std::vector<double> motor_ratios{0.3, 0.5, 0.7, 0.9};
  double sample_rate = 25.0;        // Hz
  double window_seconds = 1.0;      // emitted to the model
  double label_window_seconds = 10.0;
  std::uint64_t seed = 0;
  std::uint64_t operating_point_seed = 1;  // base injections P0, Q0
  TrajectoryModel model;

  std::size_t window_steps() const;
  std::size_t label_steps() const;
  void validate(std::size_t buses) const;
};

/// Provenance of one generated case.
struct CaseSpec {
  std::size_t fault_bus = 0;
  double severity = 0.0;
  double motor_ratio = 0.0;
};

struct OperatingPoint {
  std::vector<double> p0;
  std::vector<double> q0;
};

OperatingPoint operating_point(std::size_t buses, std::uint64_t seed);

/// Full-length trajectories, each [steps, n].
struct Trajectory {
  Tensor V, P, Q;
};

Trajectory simulate_case(const Topology& topology, const ScenarioConfig& cfg, const OperatingPoint& op,
                         const CaseSpec& spec, std::size_t steps);

/// Practical criterion: unstable iff some bus stays below the low-voltage
/// threshold for longer than the allowed time. `voltages` is [steps, n].
Label label_trajectory(const Tensor& voltages, double sample_rate, const TrajectoryModel& model);

struct LabeledDataset {
  Topology topology;
  std::vector<SvsSample> samples;
  std::vector<CaseSpec> provenance;
  ScenarioConfig config;
  std::optional<double> snr_db;  // unset: noise-free
  std::uint64_t noise_seed = 0;
  int topology_changes = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t unstable_count() const;
  /// Subset by indices (topology and config carried over).
  LabeledDataset subset(const std::vector<std::size_t>& indices) const;
};

LabeledDataset generate(const ScenarioConfig& cfg, const Topology& topology, std::size_t count);

/// Adds zero-mean Gaussian noise per channel at the given SNR; an infinite
/// SNR leaves the data unchanged.
LabeledDataset add_noise(const LabeledDataset& dataset, double snr_db, std::uint64_t seed);

/// Empirical SNR (dB) of `noisy` relative to `clean` for one channel.
double measured_snr_db(const LabeledDataset& clean, const LabeledDataset& noisy, Channel channel);

/// Applies `changes` distinct edge changes: an edge is removed unless it is a
/// bridge, in which case its weight is halved. Throws Infeasible when there
/// are fewer edges than requested changes.
Topology perturb_topology(const Topology& topology, int changes, std::uint64_t seed);

}  // namespace stgcn
