#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>

#include "est/parameters.hpp"
#include "est/tensor.hpp"

namespace est {

struct GradCheckReport {
  std::map<std::string, double> per_parameter;  // max relative error per leaf
  double max_relative_error = 0.0;
  std::string worst_parameter;
  bool pass = false;
  double step = 0.0;
  double tolerance = 0.0;
  std::size_t elements_checked = 0;
};

// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h for
// every element of every leaf that requires a gradient. Relative error is
// |a - n| / max(|a|, |n|, 1e-12). loss_fn must rebuild the graph on each call
// and return the same value for the same parameters (checked up front).
GradCheckReport gradcheck(const std::function<Tensor()>& loss_fn, std::span<const Tensor> leaves, double h,
                          double tolerance);
GradCheckReport gradcheck(const std::function<Tensor()>& loss_fn, const ParameterStore& params, double h,
                          double tolerance);

}  // namespace est
