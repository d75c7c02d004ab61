#include "udah/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "udah/errors.hpp"

namespace udah::ad {

namespace {

double evaluate(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value().item();
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(Tape&)>& f, std::span<Tensor* const> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0) || !std::isfinite(options.step)) {
    throw ConfigError("grad_check: step must be a positive finite number");
  }
  if (!(options.tol > 0.0)) throw ConfigError("grad_check: tol must be positive");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    for (Tensor* p : params) tape.param(*p);
    Var loss = f(tape);
    if (!std::isfinite(loss.value().item())) throw NumericalError("grad_check: objective is not finite");
    tape.backward(loss);
    for (Tensor* p : params) analytic.push_back(tape.grad_of(*p));
  }

  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = *params[t];
    const std::size_t n = p.size();
    const std::size_t stride =
        options.max_coords_per_tensor == 0 ? 1 : std::max<std::size_t>(1, n / options.max_coords_per_tensor);
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p[i];
      p[i] = saved + options.step;
      const double up = evaluate(f);
      p[i] = saved - options.step;
      const double down = evaluate(f);
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[t][i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        throw NumericalError("grad_check: non-finite gradient at tensor " + std::to_string(t) + " index " +
                             std::to_string(i));
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), options.scale_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = rel;
        report.worst_tensor = t;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace udah::ad
