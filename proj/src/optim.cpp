#include "madt/optim.hpp"

#include <cmath>

#include "madt/errors.hpp"

namespace madt {

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr_ <= 0.0) throw ConfigError("learning rate must be positive");
  for (const Tensor& p : params_) {
    m_.emplace_back(p.data().size(), 0.0);
    v_.emplace_back(p.data().size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& data = params_[i].data();
    const auto& grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      data[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

double grad_norm(const std::vector<Tensor>& params) {
  double ss = 0.0;
  for (const Tensor& p : params)
    for (double g : p.grad()) ss += g * g;
  return std::sqrt(ss);
}

void clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (const Tensor& p : params)
    for (double& g : const_cast<std::vector<double>&>(p.grad())) g *= s;
}

}  // namespace madt
