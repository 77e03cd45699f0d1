#include <cmath>

#include "mmcl/losses.hpp"
#include "support.hpp"

using namespace mmcl;
using test::max_relative_error;
using test::numeric_gradient;

TEST_SUITE("losses") {
  TEST_CASE("cross-entropy examples") {
    CHECK(cross_entropy(std::vector<double>(5, 0.3), 2) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK(cross_entropy({0, 0, 60, 0, 0}, 2) < 1e-20);
    CHECK(cross_entropy({0, 0, 1e6, 0, 0}, 2) == 0.0);
  }

  TEST_CASE("l1 and cosine examples") {
    Matrix a(1, 2), b(1, 2);
    a << 1, 0;
    b << 0, 1;
    CHECK(l1_align(a, a).value == 0.0);
    CHECK(l1_align(a, b).value == doctest::Approx(1.0));
    CHECK(cosine_align(a, a).value == doctest::Approx(0.0));
    CHECK(cosine_align(a, b).value == doctest::Approx(1.0));
    CHECK(cosine_align(a, -a).value == doctest::Approx(2.0));
    Matrix zero = Matrix::Zero(1, 2);
    CHECK_THROWS_AS(cosine_align(a, zero), Error);
  }

  TEST_CASE("nt-xent closed forms") {
    Rng rng(1);
    for (int n : {2, 3, 6}) {
      Matrix same = Matrix::Zero(n, 4);
      same.col(0).setOnes();
      CHECK(nt_xent(same, same).value == doctest::Approx(std::log(2.0 * n - 1.0)).epsilon(1e-12));
      NtXentOptions cross;
      cross.intra_modal_negatives = false;
      CHECK(nt_xent(same, same, cross).value == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-12));
    }
    // Pairs (e1, e1) and (e2, e2), tau 0.5: every anchor sees its positive at
    // similarity 1 and two candidates at similarity 0.
    Matrix e = Matrix::Identity(2, 2);
    CHECK(nt_xent(e, e).value == doctest::Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 2.0))).epsilon(1e-12));
    CHECK(nt_xent(e, e).value == doctest::Approx(oracle::nt_xent(e, e, 0.5, true)).epsilon(1e-12));

    NtXentOptions hot;
    hot.temperature = 1e9;
    const Matrix a = test::random_unit_rows(5, 8, rng), b = test::random_unit_rows(5, 8, rng);
    CHECK(nt_xent(a, b, hot).value == doctest::Approx(std::log(9.0)).epsilon(1e-6));
    hot.intra_modal_negatives = false;
    CHECK(nt_xent(a, b, hot).value == doctest::Approx(std::log(5.0)).epsilon(1e-6));

    const Matrix one = test::random_unit_rows(1, 8, rng);
    CHECK_THROWS_AS(nt_xent(one, one), Error);
  }

  TEST_CASE("direct-formula oracles on random batches") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(7)), d = 2 + static_cast<int>(rng.index(15));
      const Matrix scores = test::random_matrix(n, 5, rng, 3.0);
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (auto& l : labels) l = static_cast<int>(rng.index(5));
      CHECK(std::abs(cross_entropy(scores, labels).value - oracle::cross_entropy(scores, labels)) < 1e-6);
      const Matrix a = test::random_matrix(n, d, rng), b = test::random_matrix(n, d, rng);
      CHECK(std::abs(l1_align(a, b).value - oracle::l1(a, b)) < 1e-6);
      CHECK(std::abs(cosine_align(a, b).value - oracle::cosine(a, b)) < 1e-6);
      const Matrix ua = test::random_unit_rows(n, d, rng), ub = test::random_unit_rows(n, d, rng);
      const double tau = 0.1 + rng.uniform();
      const bool intra = rng.bernoulli(0.5);
      CHECK(std::abs(nt_xent(ua, ub, {tau, intra}).value - oracle::nt_xent(ua, ub, tau, intra)) < 1e-6);
    }
  }

  TEST_CASE("analytic gradients match finite differences") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(7)), d = 2 + static_cast<int>(rng.index(15));
      const Matrix scores = test::random_matrix(n, 5, rng, 2.0);
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (auto& l : labels) l = static_cast<int>(rng.index(5));
      CHECK(max_relative_error(cross_entropy(scores, labels).grad_a,
                               numeric_gradient([&](const Matrix& s) { return cross_entropy(s, labels).value; },
                                                scores)) < 1e-4);

      const Matrix a = test::random_matrix(n, d, rng), b = test::random_matrix(n, d, rng);
      const LossGrad l1g = l1_align(a, b);
      CHECK(max_relative_error(l1g.grad_a, numeric_gradient([&](const Matrix& x) { return l1_align(x, b).value; }, a)) < 1e-4);
      CHECK(max_relative_error(l1g.grad_b, numeric_gradient([&](const Matrix& x) { return l1_align(a, x).value; }, b)) < 1e-4);
      const LossGrad cg = cosine_align(a, b);
      CHECK(max_relative_error(cg.grad_a, numeric_gradient([&](const Matrix& x) { return cosine_align(x, b).value; }, a)) < 1e-4);
      CHECK(max_relative_error(cg.grad_b, numeric_gradient([&](const Matrix& x) { return cosine_align(a, x).value; }, b)) < 1e-4);

      const NtXentOptions opts{0.2 + rng.uniform(), rng.bernoulli(0.5)};
      const Matrix ua = test::random_unit_rows(n, d, rng), ub = test::random_unit_rows(n, d, rng);
      const LossGrad ng = nt_xent(ua, ub, opts);
      CHECK(max_relative_error(ng.grad_a, numeric_gradient([&](const Matrix& x) { return nt_xent(x, ub, opts).value; }, ua)) < 1e-4);
      CHECK(max_relative_error(ng.grad_b, numeric_gradient([&](const Matrix& x) { return nt_xent(ua, x, opts).value; }, ub)) < 1e-4);
    }
  }

  TEST_CASE("nt-xent is invariant to a shared row permutation") {
    Rng rng(4);
    const Matrix a = test::random_unit_rows(6, 8, rng), b = test::random_unit_rows(6, 8, rng);
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Matrix pa(6, 8), pb(6, 8);
    for (int i = 0; i < 6; ++i) {
      pa.row(i) = a.row(perm[static_cast<std::size_t>(i)]);
      pb.row(i) = b.row(perm[static_cast<std::size_t>(i)]);
    }
    CHECK(nt_xent(a, b).value == doctest::Approx(nt_xent(pa, pb).value).epsilon(1e-12));
  }

  TEST_CASE("composite weighting") {
    const LossWeights w;
    CHECK(composite({}, w) == 0.0);
    const LossComponents ones{1, 1, 1, 1, 1};
    CHECK(composite(ones, w) == doctest::Approx(4.5));
    const LossComponents c{0.3, 0.7, 0.25, 0.4, 1.9};
    LossWeights doubled = w;
    doubled.l1 *= 2.0;
    CHECK(composite(c, doubled) - composite(c, w) == doctest::Approx(c.l1).epsilon(1e-12));
    LossComponents bad = c;
    bad.cos = std::nan("");
    try {
      composite(bad, w);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("cos") != std::string::npos);
    }
    LossWeights negative = w;
    negative.ntxent = -1.0;
    CHECK_THROWS_AS(negative.validate(), Error);
  }

  TEST_CASE("autograd wrappers agree with the matrix forms") {
    Rng rng(5);
    const int n = 4, d = 6;
    const Matrix a = test::random_unit_rows(n, d, rng), b = test::random_unit_rows(n, d, rng);
    auto var_of = [&](const Matrix& m) {
      return nn::parameter(nn::Tensor({static_cast<int>(m.rows()), static_cast<int>(m.cols())},
                                      std::vector<double>(m.data(), m.data() + m.size())));
    };
    auto grad_of = [&](const nn::Var& v, const Matrix& like) {
      return Matrix(v.grad().mat(static_cast<int>(like.rows()), static_cast<int>(like.cols())));
    };
    const NtXentOptions opts{0.5, true};
    const std::vector<std::pair<std::function<nn::Var(const nn::Var&, const nn::Var&)>,
                                std::function<LossGrad(const Matrix&, const Matrix&)>>>
        cases{{[](const nn::Var& x, const nn::Var& y) { return l1_align_loss(x, y); },
               [](const Matrix& x, const Matrix& y) { return l1_align(x, y); }},
              {[](const nn::Var& x, const nn::Var& y) { return cosine_align_loss(x, y); },
               [](const Matrix& x, const Matrix& y) { return cosine_align(x, y); }},
              {[&](const nn::Var& x, const nn::Var& y) { return nt_xent_loss(x, y, opts); },
               [&](const Matrix& x, const Matrix& y) { return nt_xent(x, y, opts); }}};
    for (const auto& [wrapped, plain] : cases) {
      const nn::Var va = var_of(a), vb = var_of(b);
      const nn::Var loss = wrapped(va, vb);
      nn::backward(loss);
      const LossGrad ref = plain(a, b);
      CHECK(loss.value()[0] == doctest::Approx(ref.value).epsilon(1e-12));
      CHECK(max_relative_error(grad_of(va, a), ref.grad_a) < 1e-12);
      CHECK(max_relative_error(grad_of(vb, b), ref.grad_b) < 1e-12);
    }

    const Matrix s = test::random_matrix(n, 5, rng);
    const std::vector<int> labels{0, 4, 2, 2};
    const nn::Var vs = var_of(s);
    const nn::Var ce = cross_entropy_loss(vs, labels);
    nn::backward(ce);
    const LossGrad ref = cross_entropy(s, labels);
    CHECK(ce.value()[0] == doctest::Approx(ref.value).epsilon(1e-12));
    CHECK(max_relative_error(grad_of(vs, s), ref.grad_a) < 1e-12);
  }

  TEST_CASE("alignment terms alone align free embeddings") {
    Rng rng(6);
    Matrix a = test::random_matrix(8, 6, rng), b = test::random_matrix(8, 6, rng);
    const double before = 1.0 - cosine_align(a, b).value;
    for (int step = 0; step < 2000; ++step) {
      const LossGrad l = l1_align(a, b), c = cosine_align(a, b);
      a -= 0.05 * (l.grad_a + c.grad_a);
      b -= 0.05 * (l.grad_b + c.grad_b);
    }
    const double after = 1.0 - cosine_align(a, b).value;
    CHECK(after > before);
    CHECK(after > 0.999);
  }
}
