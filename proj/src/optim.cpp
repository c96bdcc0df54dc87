#include "trajguard/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace trajguard {

void Adam::step(const std::vector<std::span<float>>& params,
                const std::vector<std::span<const float>>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Adam: parameter/gradient count mismatch");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].size(), 0.0f);
      v_[i].assign(params[i].size(), 0.0f);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float step = static_cast<float>(lr_ / bc1);
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(eps_);
  const float wd = static_cast<float>(weight_decay_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    if (p.size() != g.size() || p.size() != m.size()) throw std::invalid_argument("Adam: buffer size changed");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const float gj = g[j] + wd * p[j];
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      p[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

}  // namespace trajguard
