#include "stgcn/graph_spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <set>

#include "stgcn/errors.hpp"

namespace stgcn {

Topology::Topology(std::size_t n, SparseMatrix w) : n_(n), w_(std::move(w)) {
  w_.makeCompressed();
  validate();
}

Topology Topology::from_edges(std::size_t n, const std::vector<Edge>& edges) {
  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::vector<Eigen::Triplet<double>> triplets;
  for (const auto& e : edges) {
    if (e.i >= n || e.j >= n) {
      throw FormatError("edge (" + std::to_string(e.i) + ", " + std::to_string(e.j) + ") outside " +
                        std::to_string(n) + " buses");
    }
    if (e.i == e.j) throw FormatError("self-loop at bus " + std::to_string(e.i));
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) {
      throw FormatError("edge weight must be finite and nonnegative");
    }
    const auto key = std::minmax(e.i, e.j);
    if (!seen.insert(key).second) {
      throw FormatError("duplicate edge (" + std::to_string(key.first) + ", " + std::to_string(key.second) + ")");
    }
    triplets.emplace_back(static_cast<int>(e.i), static_cast<int>(e.j), e.weight);
    triplets.emplace_back(static_cast<int>(e.j), static_cast<int>(e.i), e.weight);
  }
  SparseMatrix w(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  w.setFromTriplets(triplets.begin(), triplets.end());
  return Topology(n, std::move(w));
}

Topology Topology::from_matrix(const SparseMatrix& w) {
  if (w.rows() != w.cols()) throw AsymmetricTopology("weight matrix is not square");
  SparseMatrix wt = w.transpose();
  SparseMatrix diff = w - wt;
  for (Eigen::Index r = 0; r < diff.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(diff, r); it; ++it) {
      if (it.value() != 0.0) {
        throw AsymmetricTopology("W[" + std::to_string(it.row()) + "," + std::to_string(it.col()) +
                                 "] != W[" + std::to_string(it.col()) + "," + std::to_string(it.row()) + "]");
      }
    }
  }
  return Topology(static_cast<std::size_t>(w.rows()), w);
}

Topology Topology::from_admittance_magnitudes(const Eigen::MatrixXcd& admittance) {
  if (admittance.rows() != admittance.cols()) throw AsymmetricTopology("admittance matrix is not square");
  std::vector<Eigen::Triplet<double>> triplets;
  for (Eigen::Index i = 0; i < admittance.rows(); ++i) {
    for (Eigen::Index j = 0; j < admittance.cols(); ++j) {
      if (i == j) continue;
      const double mag = std::abs(admittance(i, j));
      if (mag != 0.0) triplets.emplace_back(static_cast<int>(i), static_cast<int>(j), mag);
    }
  }
  SparseMatrix w(admittance.rows(), admittance.cols());
  w.setFromTriplets(triplets.begin(), triplets.end());
  return from_matrix(w);
}

void Topology::validate() const {
  for (Eigen::Index r = 0; r < w_.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(w_, r); it; ++it) {
      if (it.row() == it.col() && it.value() != 0.0) {
        throw FormatError("nonzero diagonal at bus " + std::to_string(it.row()));
      }
      if (!(it.value() >= 0.0) || !std::isfinite(it.value())) {
        throw FormatError("negative or non-finite weight at (" + std::to_string(it.row()) + ", " +
                          std::to_string(it.col()) + ")");
      }
    }
  }
  for (std::size_t i = 0; i < n_; ++i) {
    if (!(degree(i) > 0.0)) throw IsolatedNode(i);
  }
}

std::vector<Edge> Topology::edges() const {
  std::vector<Edge> out;
  for (Eigen::Index r = 0; r < w_.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(w_, r); it; ++it) {
      if (it.row() < it.col() && it.value() != 0.0) {
        out.push_back({static_cast<std::size_t>(it.row()), static_cast<std::size_t>(it.col()), it.value()});
      }
    }
  }
  return out;
}

double Topology::degree(std::size_t i) const {
  double d = 0.0;
  for (SparseMatrix::InnerIterator it(w_, static_cast<Eigen::Index>(i)); it; ++it) d += it.value();
  return d;
}

std::vector<std::vector<std::size_t>> Topology::neighbors() const {
  std::vector<std::vector<std::size_t>> adj(n_);
  for (Eigen::Index r = 0; r < w_.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(w_, r); it; ++it) {
      if (it.value() != 0.0 && it.row() != it.col()) adj[static_cast<std::size_t>(r)].push_back(static_cast<std::size_t>(it.col()));
    }
  }
  return adj;
}

std::vector<std::size_t> Topology::hop_distances(std::size_t source) const {
  const auto adj = neighbors();
  std::vector<std::size_t> dist(n_, std::numeric_limits<std::size_t>::max());
  std::queue<std::size_t> frontier;
  dist.at(source) = 0;
  frontier.push(source);
  while (!frontier.empty()) {
    const auto u = frontier.front();
    frontier.pop();
    for (auto v : adj[u]) {
      if (dist[v] == std::numeric_limits<std::size_t>::max()) {
        dist[v] = dist[u] + 1;
        frontier.push(v);
      }
    }
  }
  return dist;
}

bool operator==(const Topology& a, const Topology& b) {
  if (a.n_ != b.n_) return false;
  const auto ea = a.edges();
  const auto eb = b.edges();
  return std::equal(ea.begin(), ea.end(), eb.begin(), eb.end(), [](const Edge& x, const Edge& y) {
    return x.i == y.i && x.j == y.j && x.weight == y.weight;
  });
}

namespace {

// Fixed, irregular start vector so results are reproducible.
Eigen::VectorXd start_vector(Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = 1.0 + 0.37 * static_cast<double>((i * 7919) % 13) * ((i % 2) ? -1.0 : 1.0);
  return v;
}

}  // namespace

double lanczos_lambda_max(const SparseMatrix& m, std::size_t max_steps) {
  const auto n = m.rows();
  const auto steps = static_cast<Eigen::Index>(std::min<std::size_t>(max_steps, static_cast<std::size_t>(n)));
  Eigen::MatrixXd q(n, steps);
  std::vector<double> alpha, beta;
  Eigen::VectorXd v = start_vector(n);
  q.col(0) = v.normalized();
  Eigen::Index k = 0;
  double last_beta = 0.0;
  for (; k < steps; ++k) {
    Eigen::VectorXd w = m * q.col(k);
    alpha.push_back(q.col(k).dot(w));
    // Full reorthogonalization, twice, keeps the basis orthonormal to roundoff.
    for (int pass = 0; pass < 2; ++pass) w -= q.leftCols(k + 1) * (q.leftCols(k + 1).transpose() * w);
    last_beta = w.norm();
    if (k + 1 == steps || last_beta <= 1e-12 * std::max(1.0, std::abs(alpha.back()))) break;
    beta.push_back(last_beta);
    q.col(k + 1) = w / last_beta;
  }
  const Eigen::Index size = static_cast<Eigen::Index>(alpha.size());
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(size, size);
  for (Eigen::Index i = 0; i < size; ++i) {
    t(i, i) = alpha[static_cast<std::size_t>(i)];
    if (i + 1 < size) t(i, i + 1) = t(i + 1, i) = beta[static_cast<std::size_t>(i)];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t);
  // Ritz residual norm bounds the distance to the nearest true eigenvalue.
  const double residual = last_beta * std::abs(es.eigenvectors()(size - 1, size - 1));
  return es.eigenvalues()(size - 1) + residual;
}

ScaledLaplacian build_laplacian(const Topology& topology) {
  const auto n = static_cast<Eigen::Index>(topology.size());
  std::vector<double> inv_sqrt_deg(topology.size());
  for (std::size_t i = 0; i < topology.size(); ++i) {
    const double d = topology.degree(i);
    if (!(d > 0.0)) throw IsolatedNode(i);
    inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
  }

  std::vector<Eigen::Triplet<double>> triplets;
  for (Eigen::Index i = 0; i < n; ++i) triplets.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0);
  const auto& w = topology.weights();
  for (Eigen::Index r = 0; r < w.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(w, r); it; ++it) {
      triplets.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                            -it.value() * inv_sqrt_deg[static_cast<std::size_t>(it.row())] *
                                inv_sqrt_deg[static_cast<std::size_t>(it.col())]);
    }
  }
  ScaledLaplacian lap;
  lap.normalized = SparseMatrix(n, n);
  lap.normalized.setFromTriplets(triplets.begin(), triplets.end());
  lap.normalized.makeCompressed();

  const double estimate = lanczos_lambda_max(lap.normalized, 40);
  if (std::isfinite(estimate) && estimate > 0.0) {
    lap.lambda_max = std::min(2.0, estimate);
  } else {
    lap.lambda_max = 2.0;
    lap.lambda_fallback = true;
  }

  SparseMatrix identity(n, n);
  identity.setIdentity();
  lap.scaled = (2.0 / lap.lambda_max) * lap.normalized - identity;
  lap.scaled.makeCompressed();
  return lap;
}

ChebFilterBank::ChebFilterBank(std::vector<std::shared_ptr<const SparseMatrix>> terms) : terms_(std::move(terms)) {}

std::size_t ChebFilterBank::size() const { return terms_.empty() ? 0 : static_cast<std::size_t>(terms_.front()->rows()); }

ChebFilterBank build_cheb_bank(const ScaledLaplacian& lap, int order) {
  if (order < 0) throw InvalidConfig("Chebyshev order must be >= 0");
  const auto n = lap.scaled.rows();
  std::vector<std::shared_ptr<const SparseMatrix>> terms;
  auto identity = std::make_shared<SparseMatrix>(n, n);
  identity->setIdentity();
  terms.push_back(identity);
  if (order >= 1) terms.push_back(std::make_shared<const SparseMatrix>(lap.scaled));
  for (int i = 2; i <= order; ++i) {
    SparseMatrix product = lap.scaled * *terms[static_cast<std::size_t>(i - 1)];
    SparseMatrix next = 2.0 * product - *terms[static_cast<std::size_t>(i - 2)];
    next.makeCompressed();
    terms.push_back(std::make_shared<const SparseMatrix>(std::move(next)));
  }
  return ChebFilterBank(std::move(terms));
}

BoolPattern khop_pattern(const Topology& topology, int hops) {
  const std::size_t n = topology.size();
  BoolPattern p{n, std::vector<char>(n * n, 0)};
  const auto limit = static_cast<std::size_t>(std::max(hops, 0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto dist = topology.hop_distances(i);
    for (std::size_t j = 0; j < n; ++j) p.cells[i * n + j] = dist[j] <= limit ? 1 : 0;
  }
  return p;
}

BoolPattern nonzero_pattern(const SparseMatrix& m) {
  const auto n = static_cast<std::size_t>(m.rows());
  BoolPattern p{n, std::vector<char>(n * n, 0)};
  for (Eigen::Index r = 0; r < m.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(m, r); it; ++it) {
      if (it.value() != 0.0) p.cells[static_cast<std::size_t>(it.row()) * n + static_cast<std::size_t>(it.col())] = 1;
    }
  }
  return p;
}

bool pattern_contained(const BoolPattern& inner, const BoolPattern& outer) {
  if (inner.n != outer.n) return false;
  for (std::size_t k = 0; k < inner.cells.size(); ++k) {
    if (inner.cells[k] && !outer.cells[k]) return false;
  }
  return true;
}

}  // namespace stgcn
