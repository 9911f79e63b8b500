#pragma once

#include <functional>
#include <vector>

#include "mpgat/tensor.hpp"

namespace mpgat {

// Compares reverse-mode gradients against central finite differences.
//
// f must map the inputs to a scalar tensor and must be re-runnable (it is
// evaluated 2*numel(inputs) times for the finite differences plus once on a
// tape). Returns the maximum relative error
//   |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
// over every element of every input.
double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      std::vector<Tensor> inputs, double h = 1e-6);

}  // namespace mpgat
