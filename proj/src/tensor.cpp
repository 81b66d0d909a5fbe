#include "madt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "madt/errors.hpp"

namespace madt {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// rows x cols view of the last axis
std::pair<int64_t, int> rows_cols(const Tensor& t) {
  if (t.rank() < 1) throw DimensionError("expected rank >= 1, got scalar-rank tensor");
  int cols = t.shape().back();
  int64_t rows = cols == 0 ? 0 : t.size() / cols;
  return {rows, cols};
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void detail::Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1);
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::constant(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape), false);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("from_data: shape " + shape_str(shape) + " expects " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1);
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.normal() * stddev;
  return t;
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item(): tensor has " + std::to_string(size()) +
                        " elements, expected scalar");
  }
  return node_->data[0];
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

Tensor make_op(std::vector<int> shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = g_seq.fetch_add(1);
  bool track = g_grad_enabled;
  if (track) {
    bool any = false;
    for (const Tensor& p : parents) any = any || p.requires_grad();
    track = any;
  }
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (Tensor& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

// --- binary / unary elementwise ---

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = n.parents[static_cast<size_t>(k)];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
    }
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  auto [rows, cols] = rows_cols(x);
  if (b.rank() != 1 || b.dim(0) != cols) {
    throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(x.data().size());
  for (int64_t r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[static_cast<size_t>(r) * cols + c] =
          x.data()[static_cast<size_t>(r) * cols + c] + b.data()[static_cast<size_t>(c)];
  return make_op(x.shape(), std::move(out), {x, b},
                 [rows = rows, cols = cols](detail::Node& n) {
                   auto& px = n.parents[0];
                   auto& pb = n.parents[1];
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int c = 0; c < cols; ++c)
                         pb->grad[static_cast<size_t>(c)] +=
                             n.grad[static_cast<size_t>(r) * cols + c];
                   }
                 });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& g) {
  auto [rows, cols] = rows_cols(x);
  if (g.rank() != 1 || g.dim(0) != cols) {
    throw DimensionError("mul_rowvec: " + shape_str(x.shape()) + " vs " +
                         shape_str(g.shape()));
  }
  std::vector<double> out(x.data().size());
  for (int64_t r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[static_cast<size_t>(r) * cols + c] =
          x.data()[static_cast<size_t>(r) * cols + c] * g.data()[static_cast<size_t>(c)];
  return make_op(x.shape(), std::move(out), {x, g},
                 [rows = rows, cols = cols](detail::Node& n) {
                   auto& px = n.parents[0];
                   auto& pg = n.parents[1];
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int c = 0; c < cols; ++c)
                         px->grad[static_cast<size_t>(r) * cols + c] +=
                             n.grad[static_cast<size_t>(r) * cols + c] *
                             pg->data[static_cast<size_t>(c)];
                   }
                   if (pg->requires_grad) {
                     pg->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int c = 0; c < cols; ++c)
                         pg->grad[static_cast<size_t>(c)] +=
                             n.grad[static_cast<size_t>(r) * cols + c] *
                             px->data[static_cast<size_t>(r) * cols + c];
                   }
                 });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return make_op(a.shape(), std::move(out), {a}, [c](detail::Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * c;
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p->data[i] > 0.0) p->grad[i] += n.grad[i];
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * n.data[i];
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.data()[i], lo, hi);
  return make_op(a.shape(), std::move(out), {a}, [lo, hi](detail::Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p->data[i] > lo && p->data[i] < hi) p->grad[i] += n.grad[i];
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape("minimum", a, b);
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
  // ties route the gradient to the first operand
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (pa->data[i] <= pb->data[i]) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          pa->grad[i] += n.grad[i];
        }
      } else if (pb->requires_grad) {
        pb->ensure_grad();
        pb->grad[i] += n.grad[i];
      }
    }
  });
}

// --- matrix ops ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[static_cast<size_t>(i) * k + kk];
      const double* brow = pb + static_cast<size_t>(kk) * n;
      double* orow = out.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
    auto& A = nd.parents[0];
    auto& B = nd.parents[1];
    if (A->requires_grad) {
      A->ensure_grad();  // dA = g . B^T
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double gv = nd.grad[static_cast<size_t>(i) * n + j];
          const double* brow = B->data.data() + 0;
          for (int kk = 0; kk < k; ++kk)
            A->grad[static_cast<size_t>(i) * k + kk] +=
                gv * brow[static_cast<size_t>(kk) * n + j];
        }
    }
    if (B->requires_grad) {
      B->ensure_grad();  // dB = A^T . g
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < m; ++i) {
          const double av = A->data[static_cast<size_t>(i) * k + kk];
          const double* grow = nd.grad.data() + static_cast<size_t>(i) * n;
          double* brow = B->grad.data() + static_cast<size_t>(kk) * n;
          for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  return make_op({n, m}, std::move(out), {a}, [m, n](detail::Node& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        p->grad[static_cast<size_t>(i) * n + j] += nd.grad[static_cast<size_t>(j) * m + i];
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<double> out(static_cast<size_t>(rows) * (ca + cb));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < ca; ++c)
      out[static_cast<size_t>(r) * (ca + cb) + c] = a.data()[static_cast<size_t>(r) * ca + c];
    for (int c = 0; c < cb; ++c)
      out[static_cast<size_t>(r) * (ca + cb) + ca + c] = b.data()[static_cast<size_t>(r) * cb + c];
  }
  return make_op({rows, ca + cb}, std::move(out), {a, b},
                 [rows, ca, cb](detail::Node& nd) {
                   auto& pa = nd.parents[0];
                   auto& pb = nd.parents[1];
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     for (int r = 0; r < rows; ++r)
                       for (int c = 0; c < ca; ++c)
                         pa->grad[static_cast<size_t>(r) * ca + c] +=
                             nd.grad[static_cast<size_t>(r) * (ca + cb) + c];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (int r = 0; r < rows; ++r)
                       for (int c = 0; c < cb; ++c)
                         pb->grad[static_cast<size_t>(r) * cb + c] +=
                             nd.grad[static_cast<size_t>(r) * (ca + cb) + ca + c];
                   }
                 });
}

Tensor slice_cols(const Tensor& a, int col0, int col1) {
  if (a.rank() != 2) throw DimensionError("slice_cols: expected rank 2, got " + shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  if (col0 < 0 || col1 > cols || col0 >= col1) {
    throw DimensionError("slice_cols: range [" + std::to_string(col0) + "," +
                         std::to_string(col1) + ") out of " + shape_str(a.shape()));
  }
  const int w = col1 - col0;
  std::vector<double> out(static_cast<size_t>(rows) * w);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c)
      out[static_cast<size_t>(r) * w + c] = a.data()[static_cast<size_t>(r) * cols + col0 + c];
  return make_op({rows, w}, std::move(out), {a}, [rows, cols, col0, w](detail::Node& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c)
        p->grad[static_cast<size_t>(r) * cols + col0 + c] +=
            nd.grad[static_cast<size_t>(r) * w + c];
  });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " +
                         shape_str(shape) + " changes element count");
  }
  std::vector<double> out = a.data();
  return make_op(std::move(shape), std::move(out), {a}, [](detail::Node& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) p->grad[i] += nd.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op({1}, {s}, {a}, [](detail::Node& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += nd.grad[0];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

Tensor layer_norm(const Tensor& x) {
  auto [rows, cols] = rows_cols(x);
  if (cols == 0) throw DimensionError("layer_norm: empty last axis in " + shape_str(x.shape()));
  std::vector<double> out(x.data().size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  std::vector<double> means(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + static_cast<size_t>(r) * cols;
    double mean = 0.0;
    for (int c = 0; c < cols; ++c) mean += row[c];
    mean /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= cols;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    means[static_cast<size_t>(r)] = mean;
    inv_std[static_cast<size_t>(r)] = is;
    for (int c = 0; c < cols; ++c)
      out[static_cast<size_t>(r) * cols + c] = (row[c] - mean) * is;
  }
  return make_op(x.shape(), std::move(out), {x},
                 [rows = rows, cols, inv_std = std::move(inv_std)](detail::Node& nd) {
                   auto& p = nd.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (int64_t r = 0; r < rows; ++r) {
                     const double* g = nd.grad.data() + static_cast<size_t>(r) * cols;
                     const double* y = nd.data.data() + static_cast<size_t>(r) * cols;
                     double gmean = 0.0, gymean = 0.0;
                     for (int c = 0; c < cols; ++c) {
                       gmean += g[c];
                       gymean += g[c] * y[c];
                     }
                     gmean /= cols;
                     gymean /= cols;
                     const double is = inv_std[static_cast<size_t>(r)];
                     double* pg = p->grad.data() + static_cast<size_t>(r) * cols;
                     for (int c = 0; c < cols; ++c)
                       pg[c] += (g[c] - gmean - y[c] * gymean) * is;
                   }
                 });
}

namespace {

// Stable softmax over legal entries of one row; probabilities of masked
// entries are exactly zero. Returns false when no entry is legal.
bool masked_softmax_row(const double* logits, const double* mask, int n, double* probs) {
  double mx = 0.0;
  bool any = false;
  for (int j = 0; j < n; ++j) {
    if (mask[j] > kMaskThreshold) {
      mx = any ? std::max(mx, logits[j]) : logits[j];
      any = true;
    }
  }
  if (!any) return false;
  double z = 0.0;
  for (int j = 0; j < n; ++j) {
    if (mask[j] > kMaskThreshold) {
      probs[j] = std::exp(logits[j] - mx);
      z += probs[j];
    } else {
      probs[j] = 0.0;
    }
  }
  for (int j = 0; j < n; ++j) probs[j] /= z;
  for (int j = 0; j < n; ++j)
    if (mask[j] <= kMaskThreshold) probs[j] = 0.0;
  return true;
}

}  // namespace

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  check_same_shape("masked_softmax", logits, mask);
  auto [rows, cols] = rows_cols(logits);
  std::vector<double> out(logits.data().size());
  for (int64_t r = 0; r < rows; ++r) {
    if (!masked_softmax_row(logits.data().data() + static_cast<size_t>(r) * cols,
                            mask.data().data() + static_cast<size_t>(r) * cols, cols,
                            out.data() + static_cast<size_t>(r) * cols)) {
      throw ContractError("masked_softmax: no legal entry in row " + std::to_string(r));
    }
  }
  return make_op(logits.shape(), std::move(out), {logits, mask},
                 [rows = rows, cols](detail::Node& nd) {
                   auto& p = nd.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (int64_t r = 0; r < rows; ++r) {
                     const double* y = nd.data.data() + static_cast<size_t>(r) * cols;
                     const double* g = nd.grad.data() + static_cast<size_t>(r) * cols;
                     double dot = 0.0;
                     for (int c = 0; c < cols; ++c) dot += y[c] * g[c];
                     double* pg = p->grad.data() + static_cast<size_t>(r) * cols;
                     for (int c = 0; c < cols; ++c) pg[c] += y[c] * (g[c] - dot);
                   }
                 });
}

Tensor gather_log_probs(const Tensor& logits, const Tensor& mask,
                        const std::vector<int>& targets) {
  check_same_shape("gather_log_probs", logits, mask);
  auto [rows, cols] = rows_cols(logits);
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw DimensionError("gather_log_probs: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  std::vector<double> probs(logits.data().size());
  std::vector<double> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* lrow = logits.data().data() + static_cast<size_t>(r) * cols;
    const double* mrow = mask.data().data() + static_cast<size_t>(r) * cols;
    double* prow = probs.data() + static_cast<size_t>(r) * cols;
    if (!masked_softmax_row(lrow, mrow, cols, prow)) {
      throw ContractError("gather_log_probs: no legal entry in row " + std::to_string(r));
    }
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= cols) {
      throw ContractError("gather_log_probs: target " + std::to_string(t) +
                          " out of range for " + std::to_string(cols) + " actions");
    }
    if (mrow[t] <= kMaskThreshold) {
      throw ContractError("gather_log_probs: target " + std::to_string(t) +
                          " is masked in row " + std::to_string(r));
    }
    // log prob via the stable max-shifted form
    double mx = lrow[t];
    for (int j = 0; j < cols; ++j)
      if (mrow[j] > kMaskThreshold) mx = std::max(mx, lrow[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j)
      if (mrow[j] > kMaskThreshold) z += std::exp(lrow[j] - mx);
    out[static_cast<size_t>(r)] = (lrow[t] - mx) - std::log(z);
  }
  return make_op({static_cast<int>(rows)}, std::move(out), {logits, mask},
                 [rows = rows, cols, targets, probs = std::move(probs)](detail::Node& nd) {
                   auto& p = nd.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (int64_t r = 0; r < rows; ++r) {
                     const double g = nd.grad[static_cast<size_t>(r)];
                     const double* prow = probs.data() + static_cast<size_t>(r) * cols;
                     double* pg = p->grad.data() + static_cast<size_t>(r) * cols;
                     for (int c = 0; c < cols; ++c) pg[c] -= g * prow[c];
                     pg[targets[static_cast<size_t>(r)]] += g;
                   }
                 });
}

Tensor masked_entropy(const Tensor& logits, const Tensor& mask) {
  check_same_shape("masked_entropy", logits, mask);
  auto [rows, cols] = rows_cols(logits);
  std::vector<double> probs(logits.data().size());
  std::vector<double> out(static_cast<size_t>(rows), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const double* lrow = logits.data().data() + static_cast<size_t>(r) * cols;
    const double* mrow = mask.data().data() + static_cast<size_t>(r) * cols;
    double* prow = probs.data() + static_cast<size_t>(r) * cols;
    if (!masked_softmax_row(lrow, mrow, cols, prow)) {
      throw ContractError("masked_entropy: no legal entry in row " + std::to_string(r));
    }
    double h = 0.0;
    for (int j = 0; j < cols; ++j)
      if (prow[j] > 0.0) h -= prow[j] * std::log(prow[j]);
    out[static_cast<size_t>(r)] = h;
  }
  return make_op({static_cast<int>(rows)}, std::move(out), {logits, mask},
                 [rows = rows, cols, probs = std::move(probs)](detail::Node& nd) {
                   auto& p = nd.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (int64_t r = 0; r < rows; ++r) {
                     const double g = nd.grad[static_cast<size_t>(r)];
                     const double h = nd.data[static_cast<size_t>(r)];
                     const double* prow = probs.data() + static_cast<size_t>(r) * cols;
                     double* pg = p->grad.data() + static_cast<size_t>(r) * cols;
                     for (int c = 0; c < cols; ++c) {
                       if (prow[c] > 0.0) pg[c] += g * (-prow[c] * (std::log(prow[c]) + h));
                     }
                   }
                 });
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (!root->requires_grad) return;

  // reachable subgraph, reverse recording order
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double eps) {
  if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");

  // analytic gradient at x
  Tensor leaf = Tensor::from_data(x.shape(), x.data(), true);
  Tensor y = f(leaf);
  if (y.size() != 1) {
    throw ContractError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
  }
  backward(y);
  std::vector<double> analytic = leaf.grad();

  double max_err = 0.0;
  NoGradGuard ng;
  for (size_t i = 0; i < x.data().size(); ++i) {
    Tensor xp = Tensor::from_data(x.shape(), x.data(), false);
    xp.data()[i] += eps;
    Tensor xm = Tensor::from_data(x.shape(), x.data(), false);
    xm.data()[i] -= eps;
    const double fd = (f(xp).item() - f(xm).item()) / (2.0 * eps);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace madt
