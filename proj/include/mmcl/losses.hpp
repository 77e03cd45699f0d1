#pragma once

// Training objective: image and text cross-entropy plus three alignment
// terms (L1, cosine, cross-modal NT-Xent). Every loss has a plain matrix form
// returning value and analytic gradients, and an autograd wrapper.

#include <string>
#include <vector>

#include "mmcl/nn.hpp"

namespace mmcl {

using Matrix = nn::RowMatrix;

struct LossGrad {
  double value = 0.0;
  Matrix grad_a;
  /// Empty for single-input losses.
  Matrix grad_b;
};

/// -log softmax(scores)[label] for one score vector.
double cross_entropy(const std::vector<double>& scores, int label);

/// Mean softmax cross-entropy over the rows of an N x C score matrix.
LossGrad cross_entropy(const Matrix& scores, const std::vector<int>& labels);

/// Mean over pairs of the mean absolute difference across dimensions.
LossGrad l1_align(const Matrix& z_img, const Matrix& z_txt);

/// Mean over pairs of 1 - cos(z_img_i, z_txt_i). Throws on a zero row.
LossGrad cosine_align(const Matrix& z_img, const Matrix& z_txt);

struct NtXentOptions {
  double temperature = 0.5;
  /// Include same-modality rows as negatives (2N - 1 candidates per anchor)
  /// rather than only the other modality (N candidates).
  bool intra_modal_negatives = true;
};

/// Symmetric cross-modal NT-Xent over dot-product similarities of
/// unit-norm rows. Anchors are all 2N rows; the positive of image row i is
/// text row i and vice versa. Requires N >= 2.
LossGrad nt_xent(const Matrix& z_img, const Matrix& z_txt, const NtXentOptions& options = {});

struct LossWeights {
  double ce_img = 1.0;
  double ce_txt = 1.0;
  double l1 = 1.0;
  double cos = 1.0;
  double ntxent = 0.5;
  double temperature = 0.5;

  /// Throws unless every weight and the temperature are positive.
  void validate() const;
};

struct LossComponents {
  double ce_img = 0.0;
  double ce_txt = 0.0;
  double l1 = 0.0;
  double cos = 0.0;
  double ntxent = 0.0;
};

/// Weighted sum; throws naming the first non-finite component.
double composite(const LossComponents& components, const LossWeights& weights);

// Autograd wrappers. Each returns a scalar Var.
nn::Var cross_entropy_loss(const nn::Var& scores, const std::vector<int>& labels);
nn::Var l1_align_loss(const nn::Var& z_img, const nn::Var& z_txt);
nn::Var cosine_align_loss(const nn::Var& z_img, const nn::Var& z_txt);
nn::Var nt_xent_loss(const nn::Var& z_img, const nn::Var& z_txt, const NtXentOptions& options);
/// sum_i weights[i] * terms[i] over scalar Vars.
nn::Var weighted_sum(const std::vector<nn::Var>& terms, const std::vector<double>& weights);

}  // namespace mmcl
