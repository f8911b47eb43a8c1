#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stgcn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf reached an operation boundary. `where()` names the operation
/// or parameter that produced it.
class NonFiniteValue : public Error {
 public:
  explicit NonFiniteValue(std::string where)
      : Error("non-finite value in " + where), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class IsolatedNode : public Error {
 public:
  explicit IsolatedNode(std::size_t node)
      : Error("bus " + std::to_string(node) + " has no incident edge"), node_(node) {}
  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

class AsymmetricTopology : public Error {
 public:
  using Error::Error;
};

class TopologyMismatch : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class SingleClassDataset : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

class Infeasible : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (topology, dataset, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace stgcn
