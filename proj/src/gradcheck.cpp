#include "est/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "est/errors.hpp"

namespace est {

GradCheckReport gradcheck(const std::function<Tensor()>& loss_fn, std::span<const Tensor> leaves, double h,
                          double tolerance) {
  if (!(h > 0.0)) throw ValidationError("gradcheck: step h must be positive");
  if (tolerance < 0.0) throw ValidationError("gradcheck: tolerance must be non-negative");

  auto evaluate = [&] {
    NoGradGuard guard;
    return loss_fn().item();
  };
  const double first = evaluate();
  const double second = evaluate();
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw DeterminismError("gradcheck: forward pass is not deterministic");
  }

  const GradientMap grads = backward(loss_fn());

  GradCheckReport report;
  report.step = h;
  report.tolerance = tolerance;
  for (Tensor leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    const std::string key = leaf.key();
    const std::vector<double> zeros(leaf.numel(), 0.0);
    const std::vector<double>& analytic = grads.contains(key) ? grads.at(key) : zeros;
    auto values = leaf.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = evaluate();
      values[i] = saved - h;
      const double minus = evaluate();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
      worst = std::max(worst, err);
      ++report.elements_checked;
    }
    report.per_parameter[key] = worst;
    if (report.worst_parameter.empty() || worst > report.max_relative_error) {
      report.max_relative_error = worst;
      report.worst_parameter = key;
    }
  }
  report.pass = report.max_relative_error <= tolerance;
  return report;
}

GradCheckReport gradcheck(const std::function<Tensor()>& loss_fn, const ParameterStore& params, double h,
                          double tolerance) {
  return gradcheck(loss_fn, params.all(), h, tolerance);
}

}  // namespace est
