#include "mpgat/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mpgat {

AdamState::AdamState(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), cfg_(config) {
  if (cfg_.lr <= 0.0) throw std::invalid_argument("AdamState: lr must be positive");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw std::invalid_argument("AdamState: betas must lie in [0,1)");
  if (cfg_.eps <= 0.0) throw std::invalid_argument("AdamState: eps must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (!p.defined()) throw std::invalid_argument("AdamState: undefined parameter tensor");
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
  }
}

void AdamState::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = params_[pi];
    if (!p.has_grad())
      throw std::runtime_error("AdamState::step: parameter " + std::to_string(pi) +
                               " has no gradient; run backward first");
    const std::vector<double>& g = p.node()->grad;
    std::vector<double>& m = m_[pi];
    std::vector<double>& v = v_[pi];
    double* w = p.data();
    const size_t n = g.size();
    for (size_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double AdamState::clip_grad_norm(double max_norm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (Tensor& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.node()->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& p : params_) {
      if (!p.has_grad()) continue;
      for (double& g : p.node()->grad) g *= s;
    }
  }
  return norm;
}

void AdamState::zero_grads() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace mpgat
