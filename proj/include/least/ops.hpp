#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "least/tensor.hpp"

namespace least {

// ---- structure ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose2d(const Tensor& x);
Tensor slice_rows(const Tensor& x, int64_t row0, int64_t row1);
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, int64_t col0, int64_t col1);
Tensor concat_cols(const std::vector<Tensor>& parts);
// x is [B x C x T]; returns the b-th [C x T] slice.
Tensor select_batch(const Tensor& x, int64_t b);

// ---- elementwise / scalar ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
// y = x * s where s is a scalar tensor participating in the graph.
Tensor scale(const Tensor& x, const Tensor& s);
// x is [r x c], v is [c]; broadcast over rows.
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor add_rowvec(const Tensor& x, const Tensor& v);

// ---- nonlinearities ----
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor log_op(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
// Normalizes over the last axis of a 2-D tensor; gamma/beta are [c].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// ---- reductions (accumulate in ascending flat-index order) ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_axis0(const Tensor& x);  // [r x c] -> [c]
Tensor max_axis0(const Tensor& x);   // [r x c] -> [c]

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- convolution ----
// x [B x Cin x T], w [Cout x Cin x K], b [Cout]; cross-correlation, no flip.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t padding);
// x [B x Cin x T], w [Cin x Cout x K], b [Cout]; output length (T-1)*stride + K.
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride);

// ---- discrete Fourier transform over the last axis of [C x n] ----
enum class DftPath { kAuto, kDirect, kFft };

// Z[c,k] = sum_t x[c,t] e^{-2 pi i k t / n}. kAuto uses the radix-2 FFT for
// power-of-two n and the direct sum otherwise.
ComplexTensor dft_forward(const Tensor& x, DftPath path = DftPath::kAuto);
// Real part of (1/n) sum_k Z[c,k] e^{+2 pi i k t / n}. The discarded imaginary
// residual's max magnitude is written to *imag_residual when given.
Tensor dft_inverse(const ComplexTensor& z, double* imag_residual = nullptr,
                   DftPath path = DftPath::kAuto);

// Elementwise complex product, composed from real primitives.
ComplexTensor complex_hadamard(const ComplexTensor& a, const ComplexTensor& b);

// ---- attention ----
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// z is [n x d]; per-head softmax(Q K^T / sqrt(d/heads)) V, concatenated and
// output-projected. attn_out, when given, receives each head's weight matrix.
Tensor self_attention(const Tensor& z, const AttentionParams& p, int64_t heads,
                      std::vector<Tensor>* attn_out = nullptr);

// ---- losses ----
// mean over all elements of max(x,0) - x*y + log(1 + exp(-|x|)).
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// ---- gradient checking ----
// Max over coordinates of |analytic - central difference| / max(1, |central|).
// f must map a tensor shaped like x to a scalar.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

}  // namespace least
