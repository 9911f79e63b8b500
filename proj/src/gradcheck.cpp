#include "mpgat/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace mpgat {

double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      std::vector<Tensor> inputs, double h) {
  if (inputs.empty()) throw std::invalid_argument("gradient_check: no inputs");
  if (h <= 0.0) throw std::invalid_argument("gradient_check: h must be positive");

  for (Tensor& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }

  // Analytic pass.
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f(inputs);
    if (loss.numel() != 1)
      throw std::invalid_argument("gradient_check: f must return a scalar");
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const Tensor& x : inputs) analytic.push_back(x.node()->grad);

  // Numeric pass: central differences, no tape.
  NoTapeScope no_tape;
  double max_rel = 0.0;
  for (size_t xi = 0; xi < inputs.size(); ++xi) {
    Tensor& x = inputs[xi];
    double* vals = x.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f(inputs).item();
      vals[i] = orig - h;
      const double fm = f(inputs).item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[xi][static_cast<size_t>(i)];
      const double rel = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace mpgat
