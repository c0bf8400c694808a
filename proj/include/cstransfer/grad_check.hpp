#pragma once

#include <functional>
#include <span>

#include "cstransfer/tensor.hpp"

namespace cstransfer {

// Compares analytic gradients of `f` against central finite differences.
// Returns max over all parameter entries of
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
// `f` must rebuild its graph from the current parameter values on each call.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double step = 1e-5);

}  // namespace cstransfer
