#pragma once

#include <vector>

#include "madt/tensor.hpp"

namespace madt {

// Adaptive moment estimation with the usual decay constants.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Global L2 norm of all parameter gradients.
double grad_norm(const std::vector<Tensor>& params);

// Scales gradients down so their global norm is at most max_norm.
void clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

}  // namespace madt
