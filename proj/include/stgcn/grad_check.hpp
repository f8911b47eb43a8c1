#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stgcn/autodiff.hpp"
#include "stgcn/parameter.hpp"

namespace stgcn {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const;
  double max_rel_error() const;
};

/// Builds a scalar from one leaf per checked parameter (same order).
using ScalarFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

/// Relative error of analytic vs numeric derivative; magnitudes below
/// `floor` are treated as `floor` so that near-zero entries compare absolutely.
double relative_error(double analytic, double numeric, double floor = 1e-5);

/// Compares reverse-mode gradients of `f` with central finite differences of
/// step `h` (Richardson-combined with step h/2) for every element of every
/// parameter. `f` must be deterministic.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Parameter*>& params, double h, double tol);

}  // namespace stgcn
