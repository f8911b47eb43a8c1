#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "stgcn/autodiff.hpp"

namespace stgcn {

struct Edge {
  std::size_t i = 0;
  std::size_t j = 0;
  double weight = 0.0;
};

/// Weighted undirected bus graph. Construction validates: symmetric, zero
/// diagonal, nonnegative weights, every bus has positive degree.
class Topology {
 public:
  Topology() = default;
  /// Edges are undirected; (i, j) and (j, i) are the same edge and may not
  /// both appear.
  static Topology from_edges(std::size_t n, const std::vector<Edge>& edges);
  /// Takes an explicit weight matrix; throws AsymmetricTopology if W != W^T.
  static Topology from_matrix(const SparseMatrix& w);
  /// W[i,j] = |Y_ij| off the diagonal of a node admittance matrix.
  static Topology from_admittance_magnitudes(const Eigen::MatrixXcd& admittance);

  std::size_t size() const noexcept { return n_; }
  const SparseMatrix& weights() const noexcept { return w_; }
  /// Edges with i < j, ordered by (i, j).
  std::vector<Edge> edges() const;
  double degree(std::size_t i) const;
  /// Hop distances from `source` (unweighted); unreachable buses get SIZE_MAX.
  std::vector<std::size_t> hop_distances(std::size_t source) const;
  std::vector<std::vector<std::size_t>> neighbors() const;

  friend bool operator==(const Topology& a, const Topology& b);

 private:
  Topology(std::size_t n, SparseMatrix w);
  void validate() const;

  std::size_t n_ = 0;
  SparseMatrix w_;
};

struct ScaledLaplacian {
  SparseMatrix normalized;  // L = I - D^{-1/2} W D^{-1/2}
  double lambda_max = 2.0;
  bool lambda_fallback = false;  // true when the analytic bound 2.0 was used
  SparseMatrix scaled;           // 2 L / lambda_max - I
};

ScaledLaplacian build_laplacian(const Topology& topology);

/// Largest Ritz value (plus its residual bound) of a symmetric matrix from at
/// most `max_steps` Lanczos steps with full reorthogonalization; exact to
/// roundoff when max_steps >= rows.
double lanczos_lambda_max(const SparseMatrix& m, std::size_t max_steps);

/// T_0(L~) ... T_K(L~), shared read-only.
class ChebFilterBank {
 public:
  ChebFilterBank() = default;
  explicit ChebFilterBank(std::vector<std::shared_ptr<const SparseMatrix>> terms);

  int order() const noexcept { return static_cast<int>(terms_.size()) - 1; }
  std::size_t size() const;
  const SparseMatrix& term(std::size_t i) const { return *terms_.at(i); }
  const std::shared_ptr<const SparseMatrix>& shared_term(std::size_t i) const { return terms_.at(i); }

 private:
  std::vector<std::shared_ptr<const SparseMatrix>> terms_;
};

ChebFilterBank build_cheb_bank(const ScaledLaplacian& lap, int order);

/// Row-major n x n boolean matrix.
struct BoolPattern {
  std::size_t n = 0;
  std::vector<char> cells;

  bool operator()(std::size_t i, std::size_t j) const { return cells[i * n + j] != 0; }
  friend bool operator==(const BoolPattern&, const BoolPattern&) = default;
};

/// True where bus j is reachable from bus i within `hops` edges; the diagonal
/// is always true.
BoolPattern khop_pattern(const Topology& topology, int hops);

/// Structural nonzeros of `m` (entries with |value| > 0).
BoolPattern nonzero_pattern(const SparseMatrix& m);

/// True when every true cell of `inner` is also true in `outer`.
bool pattern_contained(const BoolPattern& inner, const BoolPattern& outer);

}  // namespace stgcn
