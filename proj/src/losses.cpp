#include "mmcl/losses.hpp"

#include <cmath>
#include <limits>

namespace mmcl {

namespace {

void check_pair(const Matrix& a, const Matrix& b, const char* name) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(std::string(name) + ": embedding shapes differ (" + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()) + ")");
  }
  if (a.rows() == 0) throw Error(std::string(name) + ": empty batch");
}

double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double mx = v.maxCoeff();
  return mx + std::log((v.array() - mx).exp().sum());
}

Matrix to_matrix(const nn::Tensor& t) {
  if (t.rank() != 2) throw Error("loss input must be 2-D, got " + t.shape_string());
  return t.mat(t.dim(0), t.dim(1));
}

void add_into(nn::Tensor* grad, const Matrix& g, double scale) {
  if (!grad) return;
  grad->mat(static_cast<int>(g.rows()), static_cast<int>(g.cols())) += scale * g;
}

nn::Var pair_op(const nn::Var& a, const nn::Var& b, LossGrad result) {
  const double value = result.value;
  return nn::custom_op({a, b}, nn::Tensor({1}, {value}),
                       [r = std::move(result)](const nn::Tensor& g, const std::vector<nn::Tensor*>& grads) {
                         add_into(grads[0], r.grad_a, g[0]);
                         add_into(grads[1], r.grad_b, g[0]);
                       });
}

}  // namespace

double cross_entropy(const std::vector<double>& scores, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= scores.size()) {
    throw Error("cross_entropy: label out of range");
  }
  Eigen::Map<const Eigen::RowVectorXd> v(scores.data(), static_cast<Eigen::Index>(scores.size()));
  return log_sum_exp(v) - scores[static_cast<std::size_t>(label)];
}

LossGrad cross_entropy(const Matrix& scores, const std::vector<int>& labels) {
  const auto n = scores.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) {
    throw Error("cross_entropy: need one label per score row");
  }
  LossGrad out;
  out.grad_a = Matrix::Zero(n, scores.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= scores.cols()) throw Error("cross_entropy: label out of range");
    const double lse = log_sum_exp(scores.row(i));
    out.value += lse - scores(i, y);
    out.grad_a.row(i) = (scores.row(i).array() - lse).exp();
    out.grad_a(i, y) -= 1.0;
  }
  out.value /= static_cast<double>(n);
  out.grad_a /= static_cast<double>(n);
  return out;
}

LossGrad l1_align(const Matrix& z_img, const Matrix& z_txt) {
  check_pair(z_img, z_txt, "l1_align");
  const double scale = 1.0 / static_cast<double>(z_img.size());
  Matrix diff = z_img - z_txt;
  LossGrad out;
  out.value = diff.cwiseAbs().sum() * scale;
  out.grad_a = diff.unaryExpr([scale](double d) { return d > 0 ? scale : (d < 0 ? -scale : 0.0); });
  out.grad_b = -out.grad_a;
  return out;
}

LossGrad cosine_align(const Matrix& z_img, const Matrix& z_txt) {
  check_pair(z_img, z_txt, "cosine_align");
  const auto n = z_img.rows();
  LossGrad out;
  out.grad_a.resize(n, z_img.cols());
  out.grad_b.resize(n, z_img.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double na = z_img.row(i).norm(), nb = z_txt.row(i).norm();
    if (na == 0.0 || nb == 0.0) {
      throw Error("cosine_align: zero embedding at row " + std::to_string(i));
    }
    const double c = z_img.row(i).dot(z_txt.row(i)) / (na * nb);
    out.value += 1.0 - c;
    out.grad_a.row(i) = -(z_txt.row(i) / (na * nb) - c * z_img.row(i) / (na * na));
    out.grad_b.row(i) = -(z_img.row(i) / (na * nb) - c * z_txt.row(i) / (nb * nb));
  }
  out.value /= static_cast<double>(n);
  out.grad_a /= static_cast<double>(n);
  out.grad_b /= static_cast<double>(n);
  return out;
}

LossGrad nt_xent(const Matrix& z_img, const Matrix& z_txt, const NtXentOptions& options) {
  check_pair(z_img, z_txt, "nt_xent");
  const auto n = z_img.rows();
  if (n < 2) throw Error("nt_xent: batch of " + std::to_string(n) + " has no negatives (need N >= 2)");
  if (!(options.temperature > 0.0)) throw Error("nt_xent: temperature must be positive");
  const double inv_t = 1.0 / options.temperature;

  Matrix u(2 * n, z_img.cols());
  u << z_img, z_txt;
  const Matrix s = (u * u.transpose()) * inv_t;
  // g(a, k) = dL/ds(a, k) over all anchor/candidate pairs.
  Matrix g = Matrix::Zero(2 * n, 2 * n);
  double total = 0.0;
  std::vector<Eigen::Index> cand;
  for (Eigen::Index a = 0; a < 2 * n; ++a) {
    const bool is_img = a < n;
    const Eigen::Index pos = is_img ? a + n : a - n;
    cand.clear();
    for (Eigen::Index k = 0; k < 2 * n; ++k) {
      if (k == a) continue;
      if (!options.intra_modal_negatives && (k < n) == is_img) continue;
      cand.push_back(k);
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (auto k : cand) mx = std::max(mx, s(a, k));
    double sum = 0.0;
    for (auto k : cand) sum += std::exp(s(a, k) - mx);
    const double lse = mx + std::log(sum);
    total += lse - s(a, pos);
    for (auto k : cand) g(a, k) = std::exp(s(a, k) - lse);
    g(a, pos) -= 1.0;
  }
  const double m = 1.0 / static_cast<double>(2 * n);
  g *= m;
  const Matrix du = ((g + g.transpose()) * u) * inv_t;
  LossGrad out;
  out.value = total * m;
  out.grad_a = du.topRows(n);
  out.grad_b = du.bottomRows(n);
  return out;
}

void LossWeights::validate() const {
  const std::pair<const char*, double> items[] = {{"ce_img", ce_img}, {"ce_txt", ce_txt}, {"l1", l1},
                                                  {"cos", cos},       {"ntxent", ntxent},
                                                  {"temperature", temperature}};
  for (const auto& [name, v] : items) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw Error(std::string("loss weight '") + name + "' must be positive and finite");
    }
  }
}

double composite(const LossComponents& c, const LossWeights& w) {
  const std::pair<const char*, double> items[] = {
      {"ce_img", c.ce_img}, {"ce_txt", c.ce_txt}, {"l1", c.l1}, {"cos", c.cos}, {"ntxent", c.ntxent}};
  for (const auto& [name, v] : items) {
    if (!std::isfinite(v)) throw Error(std::string("non-finite loss component: ") + name);
  }
  return w.ce_img * c.ce_img + w.ce_txt * c.ce_txt + w.l1 * c.l1 + w.cos * c.cos + w.ntxent * c.ntxent;
}

nn::Var cross_entropy_loss(const nn::Var& scores, const std::vector<int>& labels) {
  LossGrad r = cross_entropy(to_matrix(scores.value()), labels);
  const double value = r.value;
  return nn::custom_op({scores}, nn::Tensor({1}, {value}),
                       [grad = std::move(r.grad_a)](const nn::Tensor& g, const std::vector<nn::Tensor*>& grads) {
                         add_into(grads[0], grad, g[0]);
                       });
}

nn::Var l1_align_loss(const nn::Var& z_img, const nn::Var& z_txt) {
  return pair_op(z_img, z_txt, l1_align(to_matrix(z_img.value()), to_matrix(z_txt.value())));
}

nn::Var cosine_align_loss(const nn::Var& z_img, const nn::Var& z_txt) {
  return pair_op(z_img, z_txt, cosine_align(to_matrix(z_img.value()), to_matrix(z_txt.value())));
}

nn::Var nt_xent_loss(const nn::Var& z_img, const nn::Var& z_txt, const NtXentOptions& options) {
  return pair_op(z_img, z_txt, nt_xent(to_matrix(z_img.value()), to_matrix(z_txt.value()), options));
}

nn::Var weighted_sum(const std::vector<nn::Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty()) throw Error("weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw Error("weighted_sum: terms must be scalars");
    total += weights[i] * terms[i].value()[0];
  }
  return nn::custom_op(terms, nn::Tensor({1}, {total}),
                       [weights](const nn::Tensor& g, const std::vector<nn::Tensor*>& grads) {
                         for (std::size_t i = 0; i < grads.size(); ++i) {
                           if (grads[i]) (*grads[i])[0] += weights[i] * g[0];
                         }
                       });
}

}  // namespace mmcl
