#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace trajguard {

// Adaptive-moment optimizer over a fixed list of flat parameter buffers.
// Weight decay is applied as an L2 term folded into the gradient.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(const std::vector<std::span<float>>& params,
            const std::vector<std::span<const float>>& grads);

  std::int64_t steps() const noexcept { return t_; }
  double lr() const noexcept { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace trajguard
