#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
// Ops record a backward closure on the tape only when grad mode is on and at
// least one input requires a gradient, so inference builds no graph.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmcl/util.hpp"

namespace mmcl::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
/// Fixed alignment keeps Eigen's vectorized reductions in the same order on
/// every run; plain vectors land on varying boundaries.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct Tensor {
  std::vector<int> shape;
  Buffer data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape_, double fill = 0.0);
  Tensor(std::vector<int> shape_, std::vector<double> data_);

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  /// Negative indices count from the back.
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Row-major (rows x cols) view; rows * cols must equal size().
  MatMap mat(int rows, int cols);
  ConstMatMap mat(int rows, int cols) const;
  /// View collapsing every leading dimension: (size / last) x last.
  MatMap rows_view();
  ConstMatMap rows_view() const;

  bool all_finite() const;
  std::string shape_string() const;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Zero-filled gradient buffer shaped like value.
  Tensor& ensure_grad();
};

/// Shared handle to a tape node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  // Handles have shallow constness: they share the underlying node.
  Tensor& mutable_value() const { return node_->value; }
  Tensor& grad() const { return node_->ensure_grad(); }
  bool has_grad() const { return node_ && !node_->grad.data.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<int>& shape() const { return node_->value.shape; }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
/// Leaf that accumulates gradients across backward passes.
Var parameter(Tensor value);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Back-propagates from a single-element root.
void backward(const Var& root);

/// Generic op: `backward` receives the output gradient and must add into the
/// gradient buffers of inputs that require them (nullptr otherwise).
Var custom_op(const std::vector<Var>& inputs, Tensor value,
              std::function<void(const Tensor& grad_out, const std::vector<Tensor*>& grads)> backward);

// x[..., K] * w[K, N] + b[N]
Var linear(const Var& x, const Var& w, const Var& b);
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var relu(const Var& x);
Var tanh(const Var& x);
/// Exact (erf) GELU.
Var gelu(const Var& x);
/// x[N, C, H, W], w[O, C, k, k], b[O].
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int padding);
/// Non-overlapping k x k max pooling; trailing rows/cols are dropped.
Var max_pool2d(const Var& x, int k);
/// [N, C, H, W] -> [N, C]
Var global_avg_pool(const Var& x);
/// Normalizes the last dimension.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Per-feature normalization of x[N, C]. In training mode it uses batch
/// statistics (N >= 2) and folds them into the running buffers with the
/// given momentum; otherwise it applies the running statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, const Var& running_mean, const Var& running_var,
               bool training, double momentum = 0.1, double eps = 1e-5);
/// ids is N x L row-major; returns [N, L, D].
Var embedding(const std::vector<std::int32_t>& ids, int n, int l, const Var& table);
/// x[N, L, D] + pos[:L, :]
Var add_positional(const Var& x, const Var& pos);
/// Scaled dot-product attention over [N, L, D] inputs split into `heads`.
/// key_mask is N x L with 1 for real tokens; masked keys get zero weight.
Var attention(const Var& q, const Var& k, const Var& v, const std::vector<std::uint8_t>& key_mask,
              int heads);
/// x[N, L, D] -> [N, D] at sequence position `pos`.
Var select_position(const Var& x, int pos);
/// Unit-normalizes each row of x[N, D].
Var l2_normalize_rows(const Var& x);

struct NamedParameter {
  std::string name;
  Var var;
};
using ParameterList = std::vector<NamedParameter>;

Tensor uniform_init(std::vector<int> shape, double bound, Rng& rng);
/// U(-sqrt(6 / fan_in), sqrt(6 / fan_in)), suited to ReLU layers.
Tensor kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng);
Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng);

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Parameters without a gradient are skipped.
class Adam {
 public:
  Adam(ParameterList params, AdamOptions options);

  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  ParameterList params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace mmcl::nn
