#include "stgcn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "stgcn/errors.hpp"

namespace stgcn {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

double evaluate(const ScalarFn& f, const std::vector<Parameter*>& params) {
  std::vector<ad::Var> leaves;
  leaves.reserve(params.size());
  for (auto* p : params) leaves.push_back(ad::Var::constant(p->value));
  const auto out = f(leaves);
  if (out.value().size() != 1) throw ShapeMismatch("grad_check: function must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NonFiniteValue("grad_check objective");
  return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Parameter*>& params, double h, double tol) {
  if (!(h > 0)) throw InvalidConfig("grad_check: step must be positive");
  std::vector<Tensor> analytic;
  std::vector<ad::Var> leaves;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.emplace_back(p->value.shape());
  for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(ad::Var::leaf(params[i]->value, &analytic[i]));
  const auto out = f(leaves);
  if (!std::isfinite(out.value()[0])) throw NonFiniteValue("grad_check objective");
  out.backward();

  GradCheckReport report;
  report.tolerance = tol;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    GradCheckEntry entry{p.name};
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      auto central = [&](double step) {
        p.value[k] = orig + step;
        const double up = evaluate(f, params);
        p.value[k] = orig - step;
        const double down = evaluate(f, params);
        p.value[k] = orig;
        return (up - down) / (2.0 * step);
      };
      // Richardson extrapolation over h and h/2 cancels the O(h^2) term.
      const double numeric = (4.0 * central(0.5 * h) - central(h)) / 3.0;
      const double a = analytic[pi][k];
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - numeric));
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(a, numeric));
    }
    entry.passed = entry.max_rel_error < tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace stgcn
