#include "mmcl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mmcl::nn {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Var make_op(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(bw);
  }
  return Var(std::move(node));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw Error(what);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape_, double fill)
    : shape(std::move(shape_)), data(product(shape), fill) {}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(data_.begin(), data_.end()) {
  require(product(shape) == data.size(), "tensor data does not match shape " + shape_string());
}

MatMap Tensor::mat(int rows, int cols) {
  require(static_cast<std::size_t>(rows) * cols == data.size(), "bad matrix view");
  return MatMap(data.data(), rows, cols);
}

ConstMatMap Tensor::mat(int rows, int cols) const {
  require(static_cast<std::size_t>(rows) * cols == data.size(), "bad matrix view");
  return ConstMatMap(data.data(), rows, cols);
}

MatMap Tensor::rows_view() {
  const int last = dim(-1);
  return mat(static_cast<int>(data.size() / static_cast<std::size_t>(last)), last);
}

ConstMatMap Tensor::rows_view() const {
  const int last = dim(-1);
  return mat(static_cast<int>(data.size() / static_cast<std::size_t>(last)), last);
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor& Node::ensure_grad() {
  if (grad.data.size() != value.data.size()) grad = Tensor(value.shape, 0.0);
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  require(static_cast<bool>(root), "backward on an empty variable");
  require(root.value().size() == 1, "backward root must be a scalar");
  require(root.requires_grad(), "backward root does not require a gradient");

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node* r = root.node().get();
  r->ensure_grad().data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
  }
}

Var custom_op(const std::vector<Var>& inputs, Tensor value,
              std::function<void(const Tensor&, const std::vector<Tensor*>&)> bw) {
  return make_op(std::move(value), inputs, [inputs, bw](Node& self) {
    std::vector<Tensor*> grads;
    grads.reserve(inputs.size());
    for (auto in : inputs) grads.push_back(in.requires_grad() ? &in.grad() : nullptr);
    bw(self.grad, grads);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require(w.value().rank() == 2, "linear: weight must be 2-D");
  const int in = w.value().dim(0), out = w.value().dim(1);
  require(x.value().dim(-1) == in, "linear: input width " + std::to_string(x.value().dim(-1)) +
                                       " does not match weight " + w.value().shape_string());
  require(b.value().size() == static_cast<std::size_t>(out), "linear: bias size mismatch");
  const int rows = static_cast<int>(x.value().size() / static_cast<std::size_t>(in));

  auto shape = x.value().shape;
  shape.back() = out;
  Tensor y(shape);
  auto ym = y.mat(rows, out);
  ym.noalias() = x.value().mat(rows, in) * w.value().mat(in, out);
  ym.rowwise() += b.value().mat(1, out).row(0);

  return make_op(std::move(y), {x, w, b}, [x, w, b, rows, in, out](Node& self) mutable {
    auto g = self.grad.mat(rows, out);
    if (x.requires_grad()) x.grad().mat(rows, in).noalias() += g * w.value().mat(in, out).transpose();
    if (w.requires_grad()) w.grad().mat(in, out).noalias() += x.value().mat(rows, in).transpose() * g;
    if (b.requires_grad()) b.grad().mat(1, out).row(0) += g.colwise().sum();
  });
}

Var matmul(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul: operands must be 2-D");
  const int m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  require(b.value().dim(0) == k, "matmul: inner dimensions differ");
  Tensor y({m, n});
  y.mat(m, n).noalias() = a.value().mat(m, k) * b.value().mat(k, n);
  return make_op(std::move(y), {a, b}, [a, b, m, k, n](Node& self) mutable {
    auto g = self.grad.mat(m, n);
    if (a.requires_grad()) a.grad().mat(m, k).noalias() += g * b.value().mat(k, n).transpose();
    if (b.requires_grad()) b.grad().mat(k, n).noalias() += a.value().mat(m, k).transpose() * g;
  });
}

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + a.value().shape_string() + " vs " +
                                      b.value().shape_string());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_op(std::move(y), {a, b}, [a, b](Node& self) mutable {
    for (const Var* v : {&a, &b}) {
      if (!v->requires_grad()) continue;
      auto& g = v->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var relu(const Var& x) {
  Tensor y = x.value();
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return make_op(std::move(y), {x}, [x](Node& self) mutable {
    auto& g = x.grad();
    const auto& in = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var tanh(const Var& x) {
  Tensor y = x.value();
  for (auto& v : y.data) v = std::tanh(v);
  return make_op(std::move(y), {x}, [x](Node& self) mutable {
    auto& g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = self.value[i];
      g[i] += self.grad[i] * (1.0 - t * t);
    }
  });
}

Var gelu(const Var& x) {
  Tensor y = x.value();
  for (auto& v : y.data) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  return make_op(std::move(y), {x}, [x](Node& self) mutable {
    auto& g = x.grad();
    const auto& in = x.value();
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in[i];
      const double d = 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

namespace {

struct ConvGeometry {
  int c, h, w, k, stride, pad, ho, wo;
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const int hw = g.ho * g.wo;
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        double* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const int hw = g.ho * g.wo;
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const double* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          const double* src = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int padding) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() == 4, "conv2d: input must be [N, C, H, W], got " + xv.shape_string());
  require(wv.rank() == 4 && wv.dim(2) == wv.dim(3), "conv2d: weight must be [O, C, k, k]");
  require(wv.dim(1) == xv.dim(1), "conv2d: channel mismatch");
  require(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
  const int n = xv.dim(0), o = wv.dim(0);
  ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than input");
  require(b.value().size() == static_cast<std::size_t>(o), "conv2d: bias size mismatch");

  const int ckk = g.c * g.k * g.k, hw = g.ho * g.wo;
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(o) * hw;
  Tensor y({n, o, g.ho, g.wo});
  Buffer cols(static_cast<std::size_t>(ckk) * hw);
  auto wm = wv.mat(o, ckk);
  Eigen::Map<const Eigen::VectorXd> bias(b.value().data.data(), o);
  for (int i = 0; i < n; ++i) {
    im2col(xv.data.data() + i * in_stride, g, cols.data());
    MatMap ym(y.data.data() + i * out_stride, o, hw);
    ym.noalias() = wm * ConstMatMap(cols.data(), ckk, hw);
    ym.colwise() += bias;
  }

  return make_op(std::move(y), {x, w, b}, [x, w, b, g, n, o, ckk, hw, in_stride, out_stride](
                                              Node& self) mutable {
    Buffer cols(static_cast<std::size_t>(ckk) * hw);
    Buffer dcols(x.requires_grad() ? cols.size() : 0);
    auto wm = w.value().mat(o, ckk);
    for (int i = 0; i < n; ++i) {
      ConstMatMap gm(self.grad.data.data() + i * out_stride, o, hw);
      if (w.requires_grad()) {
        im2col(x.value().data.data() + i * in_stride, g, cols.data());
        w.grad().mat(o, ckk).noalias() += gm * ConstMatMap(cols.data(), ckk, hw).transpose();
      }
      if (b.requires_grad()) {
        Eigen::Map<Eigen::VectorXd> gb(b.grad().data.data(), o);
        gb += gm.rowwise().sum();
      }
      if (x.requires_grad()) {
        MatMap(dcols.data(), ckk, hw).noalias() = wm.transpose() * gm;
        col2im(dcols.data(), g, x.grad().data.data() + i * in_stride);
      }
    }
  });
}

Var max_pool2d(const Var& x, int k) {
  const auto& xv = x.value();
  require(xv.rank() == 4, "max_pool2d: input must be [N, C, H, W]");
  require(k >= 1, "max_pool2d: bad window");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int ho = h / k, wo = w / k;
  require(ho > 0 && wo > 0, "max_pool2d: window larger than input");
  Tensor y({n, c, ho, wo});
  std::vector<std::size_t> argmax(y.size());
  std::size_t out = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::size_t plane = static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++out) {
        std::size_t best = plane + static_cast<std::size_t>(oy * k) * w + ox * k;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            const std::size_t idx = plane + static_cast<std::size_t>(oy * k + dy) * w + ox * k + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        argmax[out] = best;
        y[out] = xv[best];
      }
    }
  }
  return make_op(std::move(y), {x}, [x, argmax = std::move(argmax)](Node& self) mutable {
    auto& g = x.grad();
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
  });
}

Var global_avg_pool(const Var& x) {
  const auto& xv = x.value();
  require(xv.rank() == 4, "global_avg_pool: input must be [N, C, H, W]");
  const int n = xv.dim(0), c = xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  Tensor y({n, c});
  auto xm = xv.mat(n * c, hw);
  y.mat(n * c, 1) = xm.rowwise().mean();
  return make_op(std::move(y), {x}, [x, n, c, hw](Node& self) mutable {
    auto g = x.grad().mat(n * c, hw);
    const double inv = 1.0 / hw;
    for (int r = 0; r < n * c; ++r) g.row(r).array() += self.grad[static_cast<std::size_t>(r)] * inv;
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int d = x.value().dim(-1);
  require(gamma.value().size() == static_cast<std::size_t>(d) &&
              beta.value().size() == static_cast<std::size_t>(d),
          "layer_norm: affine parameter size mismatch");
  const int rows = static_cast<int>(x.value().size() / static_cast<std::size_t>(d));
  Tensor y(x.value().shape);
  Tensor xhat(x.value().shape);
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  auto xm = x.value().mat(rows, d);
  auto hm = xhat.mat(rows, d);
  auto ym = y.mat(rows, d);
  auto gm = gamma.value().mat(1, d);
  auto bm = beta.value().mat(1, d);
  for (int r = 0; r < rows; ++r) {
    const double mean = xm.row(r).mean();
    const double var = (xm.row(r).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    hm.row(r) = (xm.row(r).array() - mean) * is;
    ym.row(r) = hm.row(r).array() * gm.row(0).array() + bm.row(0).array();
  }
  return make_op(std::move(y), {x, gamma, beta},
                 [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                  d](Node& self) mutable {
                   auto g = self.grad.mat(rows, d);
                   auto hm = xhat.mat(rows, d);
                   if (gamma.requires_grad()) {
                     gamma.grad().mat(1, d).row(0) += (g.array() * hm.array()).colwise().sum().matrix();
                   }
                   if (beta.requires_grad()) beta.grad().mat(1, d).row(0) += g.colwise().sum();
                   if (x.requires_grad()) {
                     auto dx = x.grad().mat(rows, d);
                     auto gm = gamma.value().mat(1, d);
                     for (int r = 0; r < rows; ++r) {
                       Eigen::RowVectorXd dh = g.row(r).array() * gm.row(0).array();
                       const double mean_dh = dh.mean();
                       const double mean_dh_h = (dh.array() * hm.row(r).array()).mean();
                       dx.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                            (dh.array() - mean_dh - hm.row(r).array() * mean_dh_h);
                     }
                   }
                 });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, const Var& running_mean, const Var& running_var,
               bool training, double momentum, double eps) {
  require(x.value().rank() == 2, "batch_norm: input must be [N, C]");
  const int n = x.value().dim(0), c = x.value().dim(1);
  for (const Var* p : {&gamma, &beta, &running_mean, &running_var}) {
    require(p->value().size() == static_cast<std::size_t>(c), "batch_norm: parameter size mismatch");
  }
  auto xm = x.value().mat(n, c);
  Eigen::RowVectorXd mean, var;
  if (training) {
    require(n >= 2, "batch_norm: training needs at least two samples");
    mean = xm.colwise().mean();
    var = (xm.rowwise() - mean).array().square().colwise().mean();
    auto rm = running_mean.mutable_value().mat(1, c);
    auto rv = running_var.mutable_value().mat(1, c);
    rm = (1.0 - momentum) * rm + momentum * mean;
    rv = (1.0 - momentum) * rv + momentum * var * (static_cast<double>(n) / (n - 1));
  } else {
    mean = running_mean.value().mat(1, c);
    var = running_var.value().mat(1, c);
  }
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt();
  Tensor xhat({n, c});
  auto hm = xhat.mat(n, c);
  hm = ((xm.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  Tensor y({n, c});
  y.mat(n, c) = ((hm.array().rowwise() * gamma.value().mat(1, c).row(0).array()).rowwise() +
                 beta.value().mat(1, c).row(0).array())
                    .matrix();
  return make_op(std::move(y), {x, gamma, beta},
                 [x, gamma, beta, xhat = std::move(xhat), inv_std, training, n, c](Node& self) mutable {
                   auto g = self.grad.mat(n, c);
                   auto hm = xhat.mat(n, c);
                   if (gamma.requires_grad()) {
                     gamma.grad().mat(1, c).row(0) += (g.array() * hm.array()).colwise().sum().matrix();
                   }
                   if (beta.requires_grad()) beta.grad().mat(1, c).row(0) += g.colwise().sum();
                   if (!x.requires_grad()) return;
                   RowMatrix dh = (g.array().rowwise() * gamma.value().mat(1, c).row(0).array()).matrix();
                   auto dx = x.grad().mat(n, c);
                   if (!training) {
                     dx += (dh.array().rowwise() * inv_std.array()).matrix();
                     return;
                   }
                   const Eigen::RowVectorXd mean_dh = dh.colwise().mean();
                   const Eigen::RowVectorXd mean_dh_h = (dh.array() * hm.array()).colwise().mean().matrix();
                   RowMatrix t = dh.rowwise() - mean_dh;
                   t -= (hm.array().rowwise() * mean_dh_h.array()).matrix();
                   dx += (t.array().rowwise() * inv_std.array()).matrix();
                 });
}

Var embedding(const std::vector<std::int32_t>& ids, int n, int l, const Var& table) {
  require(table.value().rank() == 2, "embedding: table must be [V, D]");
  require(ids.size() == static_cast<std::size_t>(n) * l, "embedding: ids do not match N x L");
  const int vocab = table.value().dim(0), d = table.value().dim(1);
  Tensor y({n, l, d});
  auto tm = table.value().mat(vocab, d);
  auto ym = y.mat(n * l, d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < vocab, "embedding: token id out of range");
    ym.row(static_cast<int>(i)) = tm.row(ids[i]);
  }
  return make_op(std::move(y), {table}, [table, ids, vocab, d](Node& self) mutable {
    auto g = table.grad().mat(vocab, d);
    auto gm = self.grad.mat(static_cast<int>(ids.size()), d);
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += gm.row(static_cast<int>(i));
  });
}

Var add_positional(const Var& x, const Var& pos) {
  const auto& xv = x.value();
  require(xv.rank() == 3, "add_positional: input must be [N, L, D]");
  const int n = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
  require(pos.value().rank() == 2 && pos.value().dim(1) == d && pos.value().dim(0) >= l,
          "add_positional: table too short or wrong width");
  Tensor y = xv;
  auto pm = pos.value().mat(pos.value().dim(0), d);
  for (int i = 0; i < n; ++i) {
    MatMap ym(y.data.data() + static_cast<std::size_t>(i) * l * d, l, d);
    ym += pm.topRows(l);
  }
  return make_op(std::move(y), {x, pos}, [x, pos, n, l, d](Node& self) mutable {
    if (x.requires_grad()) {
      auto& g = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pos.requires_grad()) {
      auto pg = pos.grad().mat(pos.value().dim(0), d);
      for (int i = 0; i < n; ++i) {
        pg.topRows(l) += ConstMatMap(self.grad.data.data() + static_cast<std::size_t>(i) * l * d, l, d);
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, const std::vector<std::uint8_t>& key_mask,
              int heads) {
  const auto& qv = q.value();
  require(qv.rank() == 3, "attention: inputs must be [N, L, D]");
  require(k.shape() == qv.shape && v.shape() == qv.shape, "attention: q/k/v shapes differ");
  const int n = qv.dim(0), l = qv.dim(1), d = qv.dim(2);
  require(heads >= 1 && d % heads == 0, "attention: width not divisible by heads");
  require(key_mask.size() == static_cast<std::size_t>(n) * l, "attention: mask size mismatch");
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t block = static_cast<std::size_t>(l) * d;

  Tensor y(qv.shape);
  // Attention weights per (sample, head), kept for the backward pass.
  std::vector<RowMatrix> probs(static_cast<std::size_t>(n) * heads);
  for (int i = 0; i < n; ++i) {
    ConstMatMap qm(qv.data.data() + i * block, l, d);
    ConstMatMap km(k.value().data.data() + i * block, l, d);
    ConstMatMap vm(v.value().data.data() + i * block, l, d);
    MatMap ym(y.data.data() + i * block, l, d);
    const std::uint8_t* mask = key_mask.data() + static_cast<std::size_t>(i) * l;
    require(std::any_of(mask, mask + l, [](std::uint8_t m) { return m != 0; }),
            "attention: every key of a sequence is masked");
    for (int h = 0; h < heads; ++h) {
      RowMatrix s = (qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose()) * scale;
      for (int r = 0; r < l; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < l; ++c) {
          if (mask[c]) mx = std::max(mx, s(r, c));
        }
        double sum = 0.0;
        for (int c = 0; c < l; ++c) {
          s(r, c) = mask[c] ? std::exp(s(r, c) - mx) : 0.0;
          sum += s(r, c);
        }
        s.row(r) /= sum;
      }
      ym.middleCols(h * dh, dh).noalias() = s * vm.middleCols(h * dh, dh);
      probs[static_cast<std::size_t>(i) * heads + h] = std::move(s);
    }
  }

  return make_op(std::move(y), {q, k, v},
                 [q, k, v, probs = std::move(probs), n, l, d, dh, heads, scale, block](
                     Node& self) mutable {
                   for (int i = 0; i < n; ++i) {
                     ConstMatMap gm(self.grad.data.data() + i * block, l, d);
                     ConstMatMap qm(q.value().data.data() + i * block, l, d);
                     ConstMatMap km(k.value().data.data() + i * block, l, d);
                     ConstMatMap vm(v.value().data.data() + i * block, l, d);
                     for (int h = 0; h < heads; ++h) {
                       const RowMatrix& p = probs[static_cast<std::size_t>(i) * heads + h];
                       auto go = gm.middleCols(h * dh, dh);
                       if (v.requires_grad()) {
                         MatMap dv(v.grad().data.data() + i * block, l, d);
                         dv.middleCols(h * dh, dh).noalias() += p.transpose() * go;
                       }
                       if (!q.requires_grad() && !k.requires_grad()) continue;
                       RowMatrix dp = go * vm.middleCols(h * dh, dh).transpose();
                       Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
                       RowMatrix ds = p.array() * (dp.colwise() - row_dot).array();
                       ds *= scale;
                       if (q.requires_grad()) {
                         MatMap dq(q.grad().data.data() + i * block, l, d);
                         dq.middleCols(h * dh, dh).noalias() += ds * km.middleCols(h * dh, dh);
                       }
                       if (k.requires_grad()) {
                         MatMap dk(k.grad().data.data() + i * block, l, d);
                         dk.middleCols(h * dh, dh).noalias() += ds.transpose() * qm.middleCols(h * dh, dh);
                       }
                     }
                   }
                 });
}

Var select_position(const Var& x, int pos) {
  const auto& xv = x.value();
  require(xv.rank() == 3, "select_position: input must be [N, L, D]");
  const int n = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
  require(pos >= 0 && pos < l, "select_position: position out of range");
  Tensor y({n, d});
  for (int i = 0; i < n; ++i) {
    std::copy_n(xv.data.begin() + (static_cast<std::size_t>(i) * l + pos) * d, d,
                y.data.begin() + static_cast<std::size_t>(i) * d);
  }
  return make_op(std::move(y), {x}, [x, n, l, d, pos](Node& self) mutable {
    auto& g = x.grad();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) {
        g[(static_cast<std::size_t>(i) * l + pos) * d + j] += self.grad[static_cast<std::size_t>(i) * d + j];
      }
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  const auto& xv = x.value();
  require(xv.rank() == 2, "l2_normalize_rows: input must be [N, D]");
  const int n = xv.dim(0), d = xv.dim(1);
  Tensor y = xv;
  std::vector<double> norms(static_cast<std::size_t>(n));
  auto ym = y.mat(n, d);
  for (int r = 0; r < n; ++r) {
    const double norm = std::max(ym.row(r).norm(), 1e-12);
    norms[static_cast<std::size_t>(r)] = norm;
    ym.row(r) /= norm;
  }
  return make_op(std::move(y), {x}, [x, norms = std::move(norms), n, d](Node& self) mutable {
    auto g = self.grad.mat(n, d);
    auto ym = self.value.mat(n, d);
    auto dx = x.grad().mat(n, d);
    for (int r = 0; r < n; ++r) {
      const double dot = ym.row(r).dot(g.row(r));
      dx.row(r) += (g.row(r) - dot * ym.row(r)) / norms[static_cast<std::size_t>(r)];
    }
  });
}

Tensor uniform_init(std::vector<int> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  return uniform_init(std::move(shape), std::sqrt(6.0 / fan_in), rng);
}

Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = stddev * rng.normal();
  return t;
}

Adam::Adam(ParameterList params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  require(options_.learning_rate > 0.0, "Adam: learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.var.value().size(), 0.0);
    v_.emplace_back(p.var.value().size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& var = params_[i].var;
    if (!var.has_grad()) continue;
    auto& value = var.mutable_value().data;
    const auto& grad = var.grad().data;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * grad[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * grad[j] * grad[j];
      value[j] -= options_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    if (p.var.has_grad()) std::fill(p.var.grad().data.begin(), p.var.grad().data.end(), 0.0);
  }
}

}  // namespace mmcl::nn
