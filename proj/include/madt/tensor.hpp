#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "madt/rng.hpp"

namespace madt {

// Additive-mask value standing in for -inf; entries at or below
// kMaskThreshold are treated as masked and forced to probability 0.
inline constexpr double kMaskSentinel = -1e9;
inline constexpr double kMaskThreshold = -1e8;
inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// One recorded operation (or leaf) in the compute graph. Nodes are stamped
// with a monotonically increasing sequence number; sorting reachable nodes
// by stamp reproduces recording order, which is a valid topological order.
struct Node {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until needed; same length as data after
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grad

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad();
};

}  // namespace detail

// Scoped suppression of graph recording; forward math inside the scope
// produces plain values with no backward rules (rollouts, evaluation).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Dense row-major tensor of 64-bit reals with optional gradient tracking.
// Handle semantics: copies share the underlying storage and graph node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int> shape, double value);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int64_t size() const { return node_->size(); }
  int dim(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

  double at(int i) const { return node_->data[static_cast<size_t>(i)]; }
  double at(int i, int j) const {
    return node_->data[static_cast<size_t>(i) * node_->shape[1] + j];
  }
  double item() const;  // scalar tensors only

  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(std::vector<int> shape, std::vector<double> data,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward_fn);
};

// --- operations (all carry backward rules) ---

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                        // 2-d
Tensor add(const Tensor& a, const Tensor& b);             // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor add_rowvec(const Tensor& x, const Tensor& b);      // [n,d] + [d]
Tensor mul_rowvec(const Tensor& x, const Tensor& g);      // [n,d] * [d]
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);     // last-dim concat
Tensor slice_cols(const Tensor& a, int col0, int col1);   // last-dim slice
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor sum(const Tensor& a);                              // -> scalar
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor layer_norm(const Tensor& x);                       // rowwise, eps 1e-5

// Softmax over the last axis with an additive mask of 0 / kMaskSentinel.
// Masked entries come out exactly 0; rows with no legal entry are an error.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);

// log p(target) per row under the availability-masked softmax; the fused
// backward is (one_hot - p) restricted to legal entries.
Tensor gather_log_probs(const Tensor& logits, const Tensor& mask,
                        const std::vector<int>& targets);

// Shannon entropy per row of the availability-masked softmax.
Tensor masked_entropy(const Tensor& logits, const Tensor& mask);

// Runs the recorded backward rules in reverse recording order, accumulating
// gradients into every requires_grad node reachable from `loss`.
void backward(const Tensor& loss);

// Max over components of |analytic - central difference| / max(1, |cd|).
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double eps);

std::string shape_str(const std::vector<int>& shape);

}  // namespace madt
