#pragma once

#include <cstdint>
#include <vector>

#include "mpgat/tensor.hpp"

namespace mpgat {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First and second moment buffers, one pair per parameter, plus the shared
// step counter used for bias correction.
class AdamState {
 public:
  AdamState(std::vector<Tensor> params, AdamConfig config = {});

  // Applies one update using the gradients currently stored on the
  // parameters. Throws if any parameter is missing its gradient buffer.
  void step();

  // Scales all parameter gradients so their global L2 norm is at most
  // max_norm. Returns the norm measured before scaling.
  double clip_grad_norm(double max_norm);

  void zero_grads();

  const std::vector<Tensor>& params() const { return params_; }
  int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace mpgat
