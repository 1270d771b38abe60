#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "least/ops.hpp"
#include "least/rng.hpp"
#include "least/tensor.hpp"

using namespace least;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Independent O(n^2) reference transform used as the test-side oracle.
std::vector<std::complex<double>> naive_dft(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (size_t t = 0; t < n; ++t) {
      const double a = -2.0 * M_PI * static_cast<double>(k * t) / static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(a), std::sin(a));
    }
    out[k] = acc;
  }
  return out;
}

double fd_slope(const std::function<double(double)>& f, double x0, double eps = 1e-5) {
  return (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps);
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(Tensor::from({2, 3}, {1.0, 2.0}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({0, 3}, std::vector<double>{}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({2, -1}, std::vector<double>{}), DimensionError);
  Tensor s = Tensor::scalar(4.5);
  CHECK(s.item() == 4.5);
  CHECK_THROWS_AS(t.item(), UsageError);
  CHECK_THROWS_AS(t.grad(), UsageError);
}

TEST_CASE("ops produce fresh buffers") {
  Tensor x = Tensor::from({3}, {1, 2, 3});
  Tensor y = add(x, x);
  x.raw_data()[0] = 99.0;
  CHECK(y.data()[0] == 2.0);
  Tensor r = reshape(x, {3, 1});
  x.raw_data()[1] = -1.0;
  CHECK(r.data()[1] == 2.0);
}

TEST_CASE("matmul examples") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor p = matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(p.data()[i] == m.data()[i]);

  Tensor a = Tensor::from({1, 2}, {1, 2});
  Tensor b = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).data()[0] == doctest::Approx(11.0));

  CHECK_THROWS_WITH_AS(matmul(a, a), doctest::Contains("[1x2]"), DimensionError);
}

TEST_CASE("matmul gradient matches central differences") {
  Tensor a = Tensor::from({1, 2}, {1, 1}, true);
  Tensor b = Tensor::from({2, 1}, {2, 5});
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum_all(matmul(a, b));
    tape.backward(loss);
  }
  CHECK(a.grad()[0] == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(a.grad()[1] == doctest::Approx(5.0).epsilon(1e-9));

  // independent finite-difference oracle for the same quantity
  for (int coord = 0; coord < 2; ++coord) {
    auto f = [&](double v) {
      std::vector<double> av = {1, 1};
      av[coord] = v;
      return sum_all(matmul(Tensor::from({1, 2}, std::move(av)), b)).item();
    };
    CHECK(std::abs(a.grad()[coord] - fd_slope(f, 1.0)) < 1e-6);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("gradient of sum") {
    Tensor x = Tensor::from({3}, {5, -1, 2}, true);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum_all(x));
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
  }
  SUBCASE("gradient of quadratic") {
    Tensor x = Tensor::from({2}, {2, 3}, true);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum_all(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    CHECK(x.grad()[1] == doctest::Approx(6.0));
  }
  SUBCASE("repeated backward accumulates") {
    Tensor x = Tensor::from({2}, {2, 3}, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum_all(x);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0);
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor x = Tensor::from({2}, {2, 3}, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), UsageError);
  }
  SUBCASE("no tape means no recording") {
    Tensor x = Tensor::from({2}, {2, 3}, true);
    Tensor y = add(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("constant inputs are not recorded") {
    Tensor x = Tensor::from({2}, {2, 3});
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = add(x, x);
    CHECK(tape.size() == 0);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("conv1d examples") {
  Tensor x = Tensor::from({1, 1, 3}, {5, 6, 7});
  Tensor w1 = Tensor::from({1, 1, 1}, {1});
  Tensor b0 = Tensor::zeros({1});
  Tensor y = conv1d(x, w1, b0, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 3});
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == x.data()[i]);

  Tensor x2 = Tensor::from({1, 1, 3}, {1, 2, 3});
  Tensor w3 = Tensor::from({1, 1, 3}, {1, 1, 1});
  Tensor y2 = conv1d(x2, w3, b0, 1, 1);
  CHECK(y2.data()[0] == 3.0);
  CHECK(y2.data()[1] == 6.0);
  CHECK(y2.data()[2] == 5.0);

  Tensor x6 = Tensor::zeros({1, 1, 6});
  Tensor w2 = Tensor::from({1, 1, 2}, {1, 1});
  CHECK(conv1d(x6, w2, b0, 2, 0).dim(2) == 3);

  CHECK_THROWS_AS(conv1d(Tensor::zeros({1, 1, 2}), Tensor::zeros({1, 1, 5}), b0, 1, 0),
                  DimensionError);
}

TEST_CASE("self_attention examples") {
  const int64_t d = 4;
  AttentionParams p;
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  p.wq = Tensor::from({d, d}, eye);
  p.wk = Tensor::from({d, d}, eye);
  p.wv = Tensor::from({d, d}, eye);
  p.wo = Tensor::from({d, d}, eye);
  p.bq = Tensor::zeros({d});
  p.bk = Tensor::zeros({d});
  p.bv = Tensor::zeros({d});
  p.bo = Tensor::zeros({d});

  SUBCASE("equal key rows give mean of value rows") {
    Tensor z = Tensor::from({3, d}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
    Tensor y = self_attention(z, p, 2);
    for (int i = 0; i < 12; ++i) CHECK(y.data()[i] == doctest::Approx(z.data()[i]));

    // zero key projection also equalizes keys while values still vary
    AttentionParams pz = p;
    pz.wk = Tensor::zeros({d, d});
    Tensor zv = Tensor::from({2, d}, {0, 2, 4, 6, 2, 0, 4, 2});
    Tensor ym = self_attention(zv, pz, 2);
    const double want[4] = {1, 1, 4, 4};
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 4; ++c) CHECK(ym.data()[r * 4 + c] == doctest::Approx(want[c]));
  }
  SUBCASE("single token passes value through") {
    Tensor z = Tensor::from({1, d}, {7, -2, 0.5, 3});
    Tensor y = self_attention(z, p, 2);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(z.data()[i]));
  }
  SUBCASE("attention rows sum to one") {
    Rng rng(11);
    Tensor z = random_tensor({5, d}, rng);
    std::vector<Tensor> attn;
    self_attention(z, p, 2, &attn);
    REQUIRE(attn.size() == 2);
    for (const Tensor& a : attn) {
      for (int64_t r = 0; r < a.dim(0); ++r) {
        double s = 0.0;
        for (int64_t c = 0; c < a.dim(1); ++c) s += a.data()[r * a.dim(1) + c];
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
  }
  SUBCASE("head divisibility enforced") {
    Tensor z = Tensor::zeros({2, d});
    CHECK_THROWS_AS(self_attention(z, p, 3), ConfigError);
  }
}

TEST_CASE("dft forward examples") {
  Tensor ones = Tensor::from({1, 4}, {1, 1, 1, 1});
  ComplexTensor z = dft_forward(ones);
  CHECK(z.re.data()[0] == doctest::Approx(4.0));
  for (int k = 1; k < 4; ++k) CHECK(std::abs(z.re.data()[k]) < 1e-12);
  for (int k = 0; k < 4; ++k) CHECK(std::abs(z.im.data()[k]) < 1e-12);

  Tensor imp = Tensor::from({1, 4}, {1, 0, 0, 0});
  ComplexTensor zi = dft_forward(imp);
  for (int k = 0; k < 4; ++k) {
    CHECK(zi.re.data()[k] == doctest::Approx(1.0));
    CHECK(std::abs(zi.im.data()[k]) < 1e-12);
  }
}

TEST_CASE("dft matches naive oracle and satisfies Parseval") {
  Rng rng(202);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t n = 3 + static_cast<int64_t>(rng.below(40));
    Tensor x = random_tensor({1, n}, rng);
    ComplexTensor z = dft_forward(x);
    auto ref = naive_dft(x.data());
    double time_energy = 0.0, freq_energy = 0.0;
    for (int64_t k = 0; k < n; ++k) {
      CHECK(std::abs(z.re.data()[k] - ref[k].real()) < 1e-9);
      CHECK(std::abs(z.im.data()[k] - ref[k].imag()) < 1e-9);
      time_energy += x.data()[k] * x.data()[k];
      freq_energy += z.re.data()[k] * z.re.data()[k] + z.im.data()[k] * z.im.data()[k];
    }
    CHECK(std::abs(time_energy - freq_energy / static_cast<double>(n)) < 1e-9);
  }
}

TEST_CASE("dft inverse examples and round trips") {
  ComplexTensor spec{Tensor::from({1, 4}, {4, 0, 0, 0}), Tensor::zeros({1, 4})};
  double resid = -1.0;
  Tensor back = dft_inverse(spec, &resid);
  for (int t = 0; t < 4; ++t) CHECK(back.data()[t] == doctest::Approx(1.0));
  CHECK(resid >= 0.0);
  CHECK(resid < 1e-12);

  ComplexTensor zero{Tensor::zeros({2, 5}), Tensor::zeros({2, 5})};
  Tensor zb = dft_inverse(zero);
  for (double v : zb.data()) CHECK(v == 0.0);

  Rng rng(7);
  for (int64_t n : {4, 5, 12, 31, 125}) {
    Tensor x = random_tensor({3, n}, rng);
    Tensor rt = dft_inverse(dft_forward(x));
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(rt.data()[i] - x.data()[i]) < 1e-10);

    // forward(inverse(Z)) == Z for a spectrum of a real signal
    ComplexTensor z = dft_forward(x);
    ComplexTensor z2 = dft_forward(dft_inverse(z));
    for (int64_t i = 0; i < x.numel(); ++i) {
      CHECK(std::abs(z2.re.data()[i] - z.re.data()[i]) < 1e-9);
      CHECK(std::abs(z2.im.data()[i] - z.im.data()[i]) < 1e-9);
    }
  }
}

TEST_CASE("fft path agrees with direct path") {
  Rng rng(99);
  for (int64_t n = 4; n <= 256; n *= 2) {
    Tensor x = random_tensor({2, n}, rng);
    ComplexTensor zf = dft_forward(x, DftPath::kFft);
    ComplexTensor zd = dft_forward(x, DftPath::kDirect);
    for (int64_t i = 0; i < 2 * n; ++i) {
      CHECK(std::abs(zf.re.data()[i] - zd.re.data()[i]) < 1e-9);
      CHECK(std::abs(zf.im.data()[i] - zd.im.data()[i]) < 1e-9);
    }
    Tensor bf = dft_inverse(zf, nullptr, DftPath::kFft);
    Tensor bd = dft_inverse(zd, nullptr, DftPath::kDirect);
    for (int64_t i = 0; i < 2 * n; ++i) CHECK(std::abs(bf.data()[i] - bd.data()[i]) < 1e-9);
  }
  CHECK_THROWS_AS(dft_forward(Tensor::zeros({1, 6}), DftPath::kFft), ConfigError);
}

TEST_CASE("grad_check staple cases") {
  Rng rng(5);
  Tensor x = random_tensor({6}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum_all(t); }, x) < 1e-10);

  Tensor xm = random_tensor({3, 4}, rng);
  CHECK(grad_check(
            [](const Tensor& t) {
              Tensor s = softmax_rows(t);
              return sum_all(mul(s, s));
            },
            xm) < 1e-4);

  Tensor sig = random_tensor({2, 8}, rng);
  Tensor fr = random_tensor({2, 8}, rng, 0.2, 1.0);
  Tensor fi = random_tensor({2, 8}, rng, -0.5, 0.5);
  CHECK(grad_check(
            [&](const Tensor& t) {
              ComplexTensor z = dft_forward(t);
              Tensor out = dft_inverse(complex_hadamard(z, {fr, fi}));
              return sum_all(mul(out, out));
            },
            sig) < 1e-4);
}

TEST_CASE("every primitive passes grad_check on five seeds") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    Tensor away = random_tensor({3, 4}, rng, 0.2, 1.5);  // keeps relu/max off kinks
    Tensor vec = random_tensor({4}, rng);
    Tensor mat_b = random_tensor({4, 2}, rng);

    auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                     const Tensor& at) {
      INFO(name << " seed " << seed);
      CHECK(grad_check(f, at) <= 1e-4);
    };

    check("add", [&](const Tensor& t) { return sum_all(mul(add(t, b), add(t, b))); }, a);
    check("sub", [&](const Tensor& t) { return sum_all(mul(sub(t, b), sub(t, b))); }, a);
    check("mul", [&](const Tensor& t) { return sum_all(mul(t, b)); }, a);
    check("mul arg2", [&](const Tensor& t) { return sum_all(mul(a, t)); }, b);
    check("neg", [&](const Tensor& t) { return sum_all(mul(neg(t), b)); }, a);
    check("add_scalar", [&](const Tensor& t) { return sum_all(mul(add_scalar(t, 1.5), b)); }, a);
    check("mul_scalar", [&](const Tensor& t) { return sum_all(mul(mul_scalar(t, -2.5), b)); }, a);
    check("scale x", [&](const Tensor& t) { return sum_all(scale(t, Tensor::scalar(1.3))); }, a);
    check("scale s", [&](const Tensor& t) { return sum_all(mul(scale(a, t), b)); },
          Tensor::scalar(0.7));
    check("mul_rowvec x", [&](const Tensor& t) { return sum_all(mul(mul_rowvec(t, vec), b)); }, a);
    check("mul_rowvec v", [&](const Tensor& t) { return sum_all(mul(mul_rowvec(a, t), b)); }, vec);
    check("add_rowvec v", [&](const Tensor& t) { return sum_all(mul(add_rowvec(a, t), b)); }, vec);
    check("relu", [&](const Tensor& t) { return sum_all(mul(relu(t), b)); }, away);
    check("gelu", [&](const Tensor& t) { return sum_all(mul(gelu(t), b)); }, a);
    check("sigmoid", [&](const Tensor& t) { return sum_all(mul(sigmoid(t), b)); }, a);
    check("exp", [&](const Tensor& t) { return sum_all(mul(exp_op(t), b)); }, a);
    check("log", [&](const Tensor& t) { return sum_all(mul(log_op(t), b)); }, pos);
    check("softmax_rows", [&](const Tensor& t) { return sum_all(mul(softmax_rows(t), b)); }, a);
    {
      Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
      Tensor beta = random_tensor({4}, rng);
      check("layer_norm x",
            [&](const Tensor& t) { return sum_all(mul(layer_norm(t, gamma, beta), b)); }, a);
      check("layer_norm gamma",
            [&](const Tensor& t) { return sum_all(mul(layer_norm(a, t, beta), b)); }, gamma);
      check("layer_norm beta",
            [&](const Tensor& t) { return sum_all(mul(layer_norm(a, gamma, t), b)); }, beta);
    }
    check("mean_all", [&](const Tensor& t) { return mean_all(mul(t, t)); }, a);
    check("mean_axis0",
          [&](const Tensor& t) { return sum_all(mul(mean_axis0(t), mean_axis0(t))); }, a);
    check("max_axis0", [&](const Tensor& t) { return sum_all(max_axis0(t)); }, away);
    check("matmul a",
          [&](const Tensor& t) { return sum_all(mul(matmul(t, mat_b), matmul(t, mat_b))); }, a);
    check("matmul b", [&](const Tensor& t) { return sum_all(matmul(a, t)); }, mat_b);
    {
      Tensor w = random_tensor({4, 3}, rng);
      Tensor bias = random_tensor({3}, rng);
      check("linear w", [&](const Tensor& t) { return sum_all(mul(linear(a, t, bias),
                                                                  linear(a, t, bias))); }, w);
      check("linear b", [&](const Tensor& t) { return sum_all(mul(linear(a, w, t),
                                                                  linear(a, w, t))); }, bias);
    }
    check("transpose2d", [&](const Tensor& t) { return sum_all(mul(transpose2d(t),
                                                                   transpose2d(a))); }, b);
    check("reshape", [&](const Tensor& t) { return sum_all(mul(reshape(t, {4, 3}),
                                                               reshape(b, {4, 3}))); }, a);
    check("slice_rows", [&](const Tensor& t) { return sum_all(mul(slice_rows(t, 1, 3),
                                                                  slice_rows(b, 1, 3))); }, a);
    check("slice_cols", [&](const Tensor& t) { return sum_all(mul(slice_cols(t, 1, 3),
                                                                  slice_cols(b, 1, 3))); }, a);
    check("gather_rows",
          [&](const Tensor& t) { return sum_all(mul(gather_rows(t, {2, 0, 2}),
                                                    gather_rows(b, {2, 0, 2}))); }, a);
    check("concat_rows",
          [&](const Tensor& t) { return sum_all(mul(concat_rows({t, b}), concat_rows({b, t}))); },
          a);
    check("concat_cols",
          [&](const Tensor& t) { return sum_all(mul(concat_cols({t, b}), concat_cols({b, t}))); },
          a);
    {
      Tensor x3 = random_tensor({2, 2, 6}, rng);
      Tensor w3 = random_tensor({3, 2, 3}, rng);
      Tensor b3 = random_tensor({3}, rng);
      check("conv1d x",
            [&](const Tensor& t) { return sum_all(mul(conv1d(t, w3, b3, 2, 1),
                                                      conv1d(t, w3, b3, 2, 1))); }, x3);
      check("conv1d w",
            [&](const Tensor& t) { return sum_all(mul(conv1d(x3, t, b3, 2, 1),
                                                      conv1d(x3, t, b3, 2, 1))); }, w3);
      check("conv1d b", [&](const Tensor& t) { return sum_all(conv1d(x3, w3, t, 2, 1)); }, b3);
      Tensor wt = random_tensor({2, 3, 4}, rng);
      check("conv_transpose1d x",
            [&](const Tensor& t) { return sum_all(mul(conv_transpose1d(t, wt, b3, 2),
                                                      conv_transpose1d(t, wt, b3, 2))); }, x3);
      check("conv_transpose1d w",
            [&](const Tensor& t) { return sum_all(mul(conv_transpose1d(x3, t, b3, 2),
                                                      conv_transpose1d(x3, t, b3, 2))); }, wt);
      check("conv_transpose1d b",
            [&](const Tensor& t) { return sum_all(conv_transpose1d(x3, wt, t, 2)); }, b3);
      check("select_batch", [&](const Tensor& t) { return sum_all(mul(select_batch(t, 1),
                                                                      select_batch(t, 1))); }, x3);
    }
    {
      Tensor sig = random_tensor({2, 6}, rng);
      Tensor gre = random_tensor({2, 6}, rng);
      Tensor gim = random_tensor({2, 6}, rng);
      check("dft pair",
            [&](const Tensor& t) {
              ComplexTensor z = dft_forward(t);
              Tensor out = dft_inverse(complex_hadamard(z, z));
              return sum_all(mul(out, gre));
            },
            sig);
      check("dft_forward re/im",
            [&](const Tensor& t) {
              ComplexTensor z = dft_forward(t);
              return add(sum_all(mul(z.re, gre)), sum_all(mul(z.im, gim)));
            },
            sig);
      check("dft_inverse re",
            [&](const Tensor& t) { return sum_all(mul(dft_inverse({t, gim}), gre)); }, sig);
      check("dft_inverse im",
            [&](const Tensor& t) { return sum_all(mul(dft_inverse({gre, t}), gim)); }, sig);
    }
    {
      const int64_t d = 4;
      AttentionParams p;
      p.wq = random_tensor({d, d}, rng);
      p.wk = random_tensor({d, d}, rng);
      p.wv = random_tensor({d, d}, rng);
      p.wo = random_tensor({d, d}, rng);
      p.bq = random_tensor({d}, rng);
      p.bk = random_tensor({d}, rng);
      p.bv = random_tensor({d}, rng);
      p.bo = random_tensor({d}, rng);
      Tensor z = random_tensor({3, d}, rng);
      check("self_attention z",
            [&](const Tensor& t) { return sum_all(mul(self_attention(t, p, 2),
                                                      self_attention(t, p, 2))); }, z);
      check("self_attention wq",
            [&](const Tensor& t) {
              AttentionParams q = p;
              q.wq = t;
              return sum_all(mul(self_attention(z, q, 2), self_attention(z, q, 2)));
            },
            p.wq);
    }
    {
      Tensor logits = random_tensor({3, 4}, rng, -2.0, 2.0);
      Tensor targets = Tensor::from({3, 4}, {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1});
      check("bce_with_logits",
            [&](const Tensor& t) { return bce_with_logits(t, targets); }, logits);
    }
  }
}

TEST_CASE("reductions are bitwise reproducible") {
  Rng rng(42);
  Tensor x = random_tensor({17, 13}, rng);
  Tensor s1 = sum_all(x);
  Tensor s2 = sum_all(x);
  CHECK(s1.item() == s2.item());
  Tensor m1 = mean_axis0(x);
  Tensor m2 = mean_axis0(x);
  for (int64_t i = 0; i < m1.numel(); ++i) CHECK(m1.data()[i] == m2.data()[i]);
}

TEST_CASE("rng determinism and distribution sanity") {
  Rng a(123), b(123), c(124);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  CHECK(a.next_u64() != c.next_u64());

  Rng r(9);
  double mean = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean += u;
  }
  CHECK(std::abs(mean / n - 0.5) < 0.02);

  double nm = 0.0, nv = 0.0;
  std::vector<double> draws(n);
  for (double& d : draws) d = r.normal();
  for (double d : draws) nm += d;
  nm /= n;
  for (double d : draws) nv += (d - nm) * (d - nm);
  nv /= n;
  CHECK(std::abs(nm) < 0.05);
  CHECK(std::abs(nv - 1.0) < 0.1);

  for (int i = 0; i < 1000; ++i) CHECK(r.below(7) < 7);

  std::vector<int> perm = {0, 1, 2, 3, 4, 5, 6, 7};
  Rng s1(55), s2(55);
  auto p1 = perm, p2 = perm;
  s1.shuffle(p1);
  s2.shuffle(p2);
  CHECK(p1 == p2);

  CHECK(Rng::mix(1, 2) != Rng::mix(2, 1));
  CHECK(Rng::mix(1, 2) == Rng::mix(1, 2));
}
