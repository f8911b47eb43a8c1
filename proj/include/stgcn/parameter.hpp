#pragma once

#include <string>

#include "stgcn/tensor.hpp"

namespace stgcn {

/// Learnable tensor with its accumulated gradient. `name` is a dotted path
/// such as "block3.V.theta".
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value)
      : name(std::move(name)), value(std::move(value)), grad(this->value.shape()) {}

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
};

}  // namespace stgcn
