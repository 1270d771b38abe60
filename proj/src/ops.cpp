#include "least/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <unordered_map>

namespace least {

namespace {

using Impl = std::shared_ptr<TensorImpl>;

void record_op(std::initializer_list<Tensor> inputs, std::initializer_list<Tensor> outputs,
               std::function<void()> backward) {
  Tape* tape = Tape::current();
  if (!tape) return;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  Tape::OpRecord rec;
  for (const Tensor& t : inputs) {
    rec.input_ids.push_back(tape->assign_id(t.impl()));
    rec.keep_alive.push_back(t.impl());
  }
  for (const Tensor& t : outputs) {
    const_cast<Tensor&>(t).set_requires_grad(true);
    rec.output_ids.push_back(tape->assign_id(t.impl()));
    rec.keep_alive.push_back(t.impl());
    rec.outputs.push_back(t.impl());
  }
  rec.backward = std::move(backward);
  tape->record(std::move(rec));
}

bool out_grad_missing(const Impl& o) { return o->grad.empty(); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

void check_rank(const Tensor& x, int rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

// ---- raw matmul kernels; all loops accumulate in ascending index order ----

// c[m x n] += a[m x k] * b[k x n]
void mm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c,
           int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const double av = ai[l];
      const double* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
void mm_nt(const double* __restrict a, const double* __restrict b, double* __restrict c,
           int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (int64_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] += acc;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
void mm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c,
           int64_t m, int64_t k, int64_t n) {
  for (int64_t l = 0; l < k; ++l) {
    const double* al = a + l * m;
    const double* bl = b + l * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = al[i];
      double* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

}  // namespace

// ---- structure ----

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), x.data());
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
  });
  return out;
}

Tensor transpose2d(const Tensor& x) {
  check_rank(x, 2, "transpose2d");
  const int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> v(static_cast<size_t>(r * c));
  const auto& xd = x.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) v[j * r + i] = xd[i * c + j];
  Tensor out = Tensor::from({c, r}, std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, r, c] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) xi->grad[i * c + j] += oi->grad[j * r + i];
  });
  return out;
}

Tensor slice_rows(const Tensor& x, int64_t row0, int64_t row1) {
  check_rank(x, 2, "slice_rows");
  const int64_t r = x.dim(0), c = x.dim(1);
  if (row0 < 0 || row1 > r || row0 >= row1) {
    throw DimensionError("slice_rows: range [" + std::to_string(row0) + "," +
                         std::to_string(row1) + ") invalid for " + shape_str(x.shape()));
  }
  std::vector<double> v(x.data().begin() + row0 * c, x.data().begin() + row1 * c);
  Tensor out = Tensor::from({row1 - row0, c}, std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, row0, c] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[row0 * c + i] += oi->grad[i];
  });
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
  check_rank(x, 2, "gather_rows");
  const int64_t r = x.dim(0), c = x.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> v(rows.size() * static_cast<size_t>(c));
  const auto& xd = x.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= r) {
      throw DimensionError("gather_rows: index " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(x.shape()));
    }
    std::copy_n(xd.begin() + rows[i] * c, c, v.begin() + static_cast<int64_t>(i) * c);
  }
  Tensor out = Tensor::from({static_cast<int64_t>(rows.size()), c}, std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, rows, c] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < rows.size(); ++i)
      for (int64_t j = 0; j < c; ++j)
        xi->grad[rows[i] * c + j] += oi->grad[static_cast<int64_t>(i) * c + j];
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const int64_t c = parts[0].dim(1);
  int64_t r = 0;
  std::vector<double> v;
  for (const Tensor& p : parts) {
    check_rank(p, 2, "concat_rows");
    if (p.dim(1) != c) check_same_shape(parts[0], p, "concat_rows");
    r += p.dim(0);
    v.insert(v.end(), p.data().begin(), p.data().end());
  }
  Tensor out = Tensor::from({r, c}, std::move(v));
  std::vector<Impl> impls;
  for (const Tensor& p : parts) impls.push_back(p.impl());
  Impl oi = out.impl();
  Tape* tape = Tape::current();
  if (tape) {
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (any) {
      Tape::OpRecord rec;
      for (const Tensor& p : parts) {
        rec.input_ids.push_back(tape->assign_id(p.impl()));
        rec.keep_alive.push_back(p.impl());
      }
      const_cast<Tensor&>(out).set_requires_grad(true);
      rec.output_ids.push_back(tape->assign_id(oi));
      rec.keep_alive.push_back(oi);
      rec.outputs.push_back(oi);
      rec.backward = [impls, oi] {
        if (out_grad_missing(oi)) return;
        size_t off = 0;
        for (const Impl& p : impls) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += oi->grad[off + i];
          }
          off += p->data.size();
        }
      };
      tape->record(std::move(rec));
    }
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t col0, int64_t col1) {
  check_rank(x, 2, "slice_cols");
  const int64_t r = x.dim(0), c = x.dim(1);
  if (col0 < 0 || col1 > c || col0 >= col1) {
    throw DimensionError("slice_cols: range [" + std::to_string(col0) + "," +
                         std::to_string(col1) + ") invalid for " + shape_str(x.shape()));
  }
  const int64_t w = col1 - col0;
  std::vector<double> v(static_cast<size_t>(r * w));
  const auto& xd = x.data();
  for (int64_t i = 0; i < r; ++i)
    std::copy_n(xd.begin() + i * c + col0, w, v.begin() + i * w);
  Tensor out = Tensor::from({r, w}, std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, r, c, col0, w] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < w; ++j) xi->grad[i * c + col0 + j] += oi->grad[i * w + j];
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const int64_t r = parts[0].dim(0);
  int64_t c = 0;
  for (const Tensor& p : parts) {
    check_rank(p, 2, "concat_cols");
    if (p.dim(0) != r) check_same_shape(parts[0], p, "concat_cols");
    c += p.dim(1);
  }
  std::vector<double> v(static_cast<size_t>(r * c));
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t i = 0; i < r; ++i)
      std::copy_n(p.data().begin() + i * w, w, v.begin() + i * c + off);
    off += w;
  }
  Tensor out = Tensor::from({r, c}, std::move(v));
  Tape* tape = Tape::current();
  if (tape) {
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (any) {
      std::vector<Impl> impls;
      std::vector<int64_t> widths;
      Tape::OpRecord rec;
      for (const Tensor& p : parts) {
        impls.push_back(p.impl());
        widths.push_back(p.dim(1));
        rec.input_ids.push_back(tape->assign_id(p.impl()));
        rec.keep_alive.push_back(p.impl());
      }
      Impl oi = out.impl();
      const_cast<Tensor&>(out).set_requires_grad(true);
      rec.output_ids.push_back(tape->assign_id(oi));
      rec.keep_alive.push_back(oi);
      rec.outputs.push_back(oi);
      rec.backward = [impls, widths, oi, r, c] {
        if (out_grad_missing(oi)) return;
        int64_t off2 = 0;
        for (size_t p = 0; p < impls.size(); ++p) {
          const int64_t w = widths[p];
          if (impls[p]->requires_grad) {
            impls[p]->ensure_grad();
            for (int64_t i = 0; i < r; ++i)
              for (int64_t j = 0; j < w; ++j)
                impls[p]->grad[i * w + j] += oi->grad[i * c + off2 + j];
          }
          off2 += w;
        }
      };
      tape->record(std::move(rec));
    }
  }
  return out;
}

Tensor select_batch(const Tensor& x, int64_t b) {
  check_rank(x, 3, "select_batch");
  const int64_t bs = x.dim(0), r = x.dim(1), c = x.dim(2);
  Tensor flat = reshape(x, {bs, r * c});
  return reshape(slice_rows(flat, b, b + 1), {r, c});
}

// ---- elementwise ----

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* /*name*/, Fwd fwd, Bwd bwd) {
  std::vector<double> v(x.data().size());
  const auto& xd = x.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = fwd(xd[i]);
  Tensor out = Tensor::from(x.shape(), std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, bwd] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < xi->grad.size(); ++i)
      xi->grad[i] += oi->grad[i] * bwd(xi->data[i], oi->data[i]);
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  Tensor out = Tensor::from(a.shape(), std::move(v));
  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({a, b}, {out}, [ai, bi, oi] {
    if (out_grad_missing(oi)) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < bi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  Tensor out = Tensor::from(a.shape(), std::move(v));
  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({a, b}, {out}, [ai, bi, oi] {
    if (out_grad_missing(oi)) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < bi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  Tensor out = Tensor::from(a.shape(), std::move(v));
  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({a, b}, {out}, [ai, bi, oi] {
    if (out_grad_missing(oi)) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < bi->grad.size(); ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
    }
  });
  return out;
}

Tensor neg(const Tensor& x) {
  return unary_op(x, "neg", [](double v) { return -v; },
                  [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(x, "add_scalar", [s](double v) { return v + s; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary_op(x, "mul_scalar", [s](double v) { return v * s; },
                  [s](double, double) { return s; });
}

Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw DimensionError("scale: scale factor must be scalar, got " + shape_str(s.shape()));
  }
  const double sv = s.data()[0];
  std::vector<double> v(x.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * sv;
  Tensor out = Tensor::from(x.shape(), std::move(v));
  Impl xi = x.impl(), si = s.impl(), oi = out.impl();
  record_op({x, s}, {out}, [xi, si, oi] {
    if (out_grad_missing(oi)) return;
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * si->data[0];
    }
    if (si->requires_grad) {
      si->ensure_grad();
      double acc = 0.0;
      for (size_t i = 0; i < xi->data.size(); ++i) acc += oi->grad[i] * xi->data[i];
      si->grad[0] += acc;
    }
  });
  return out;
}

namespace {

Tensor rowvec_op(const Tensor& x, const Tensor& v, bool multiply) {
  check_rank(x, 2, "rowvec op");
  if (v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw DimensionError("rowvec op: vector " + shape_str(v.shape()) + " does not match columns of " +
                         shape_str(x.shape()));
  }
  const int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out_v(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j)
      out_v[i * c + j] = multiply ? x.data()[i * c + j] * v.data()[j]
                                  : x.data()[i * c + j] + v.data()[j];
  Tensor out = Tensor::from({r, c}, std::move(out_v));
  Impl xi = x.impl(), vi = v.impl(), oi = out.impl();
  record_op({x, v}, {out}, [xi, vi, oi, r, c, multiply] {
    if (out_grad_missing(oi)) return;
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          xi->grad[i * c + j] += multiply ? oi->grad[i * c + j] * vi->data[j] : oi->grad[i * c + j];
    }
    if (vi->requires_grad) {
      vi->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          vi->grad[j] += multiply ? oi->grad[i * c + j] * xi->data[i * c + j] : oi->grad[i * c + j];
    }
  });
  return out;
}

}  // namespace

Tensor mul_rowvec(const Tensor& x, const Tensor& v) { return rowvec_op(x, v, true); }
Tensor add_rowvec(const Tensor& x, const Tensor& v) { return rowvec_op(x, v, false); }

// ---- nonlinearities ----

Tensor relu(const Tensor& x) {
  return unary_op(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(x, "gelu",
                  [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
                  [=](double xv, double) {
                    return 0.5 * (1.0 + std::erf(xv * inv_sqrt2)) +
                           xv * inv_sqrt2pi * std::exp(-0.5 * xv * xv);
                  });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, "sigmoid",
                  [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                                 : std::exp(v) / (1.0 + std::exp(v)); },
                  [](double, double yv) { return yv * (1.0 - yv); });
}

Tensor exp_op(const Tensor& x) {
  return unary_op(x, "exp", [](double v) { return std::exp(v); },
                  [](double, double yv) { return yv; });
}

Tensor log_op(const Tensor& x) {
  return unary_op(x, "log", [](double v) { return std::log(v); },
                  [](double xv, double) { return 1.0 / xv; });
}

Tensor softmax_rows(const Tensor& x) {
  check_rank(x, 2, "softmax_rows");
  const int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> v(static_cast<size_t>(r * c));
  const auto& xd = x.data();
  for (int64_t i = 0; i < r; ++i) {
    double mx = xd[i * c];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xd[i * c + j]);
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double e = std::exp(xd[i * c + j] - mx);
      v[i * c + j] = e;
      sum += e;
    }
    for (int64_t j = 0; j < c; ++j) v[i * c + j] /= sum;
  }
  Tensor out = Tensor::from({r, c}, std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, r, c] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < c; ++j) dot += oi->grad[i * c + j] * oi->data[i * c + j];
      for (int64_t j = 0; j < c; ++j)
        xi->grad[i * c + j] += oi->data[i * c + j] * (oi->grad[i * c + j] - dot);
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_rank(x, 2, "layer_norm");
  const int64_t r = x.dim(0), c = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(c) + "]");
  }
  std::vector<double> v(static_cast<size_t>(r * c));
  std::vector<double> xhat(static_cast<size_t>(r * c));
  std::vector<double> inv_std(static_cast<size_t>(r));
  const auto& xd = x.data();
  for (int64_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += xd[i * c + j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = xd[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (int64_t j = 0; j < c; ++j) {
      const double h = (xd[i * c + j] - mean) * inv;
      xhat[i * c + j] = h;
      v[i * c + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  Tensor out = Tensor::from({r, c}, std::move(v));
  Impl xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
  auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
  auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
  record_op({x, gamma, beta}, {out}, [xi, gi, bi, oi, xh, is, r, c] {
    if (out_grad_missing(oi)) return;
    if (gi->requires_grad) {
      gi->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) gi->grad[j] += oi->grad[i * c + j] * (*xh)[i * c + j];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) bi->grad[j] += oi->grad[i * c + j];
    }
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (int64_t i = 0; i < r; ++i) {
        double mean_g = 0.0, mean_gh = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          const double gx = oi->grad[i * c + j] * gi->data[j];
          mean_g += gx;
          mean_gh += gx * (*xh)[i * c + j];
        }
        mean_g /= static_cast<double>(c);
        mean_gh /= static_cast<double>(c);
        for (int64_t j = 0; j < c; ++j) {
          const double gx = oi->grad[i * c + j] * gi->data[j];
          xi->grad[i * c + j] += (*is)[i] * (gx - mean_g - (*xh)[i * c + j] * mean_gh);
        }
      }
    }
  });
  return out;
}

// ---- reductions ----

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[0];
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(acc / n);
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, n] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[0] / n;
  });
  return out;
}

Tensor mean_axis0(const Tensor& x) {
  check_rank(x, 2, "mean_axis0");
  const int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> v(static_cast<size_t>(c), 0.0);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) v[j] += x.data()[i * c + j];
  for (int64_t j = 0; j < c; ++j) v[j] /= static_cast<double>(r);
  Tensor out = Tensor::from({c}, std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, r, c] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) xi->grad[i * c + j] += oi->grad[j] / static_cast<double>(r);
  });
  return out;
}

Tensor max_axis0(const Tensor& x) {
  check_rank(x, 2, "max_axis0");
  const int64_t r = x.dim(0), c = x.dim(1);
  std::vector<double> v(static_cast<size_t>(c));
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(c), 0);
  for (int64_t j = 0; j < c; ++j) {
    double best = x.data()[j];
    int64_t bi = 0;
    for (int64_t i = 1; i < r; ++i) {
      if (x.data()[i * c + j] > best) {
        best = x.data()[i * c + j];
        bi = i;
      }
    }
    v[j] = best;
    (*arg)[j] = bi;
  }
  Tensor out = Tensor::from({c}, std::move(v));
  Impl xi = x.impl(), oi = out.impl();
  record_op({x}, {out}, [xi, oi, arg, c] {
    if (out_grad_missing(oi) || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t j = 0; j < c; ++j) xi->grad[(*arg)[j] * c + j] += oi->grad[j];
  });
  return out;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<size_t>(m * n), 0.0);
  mm_nn(a.data().data(), b.data().data(), v.data(), m, k, n);
  Tensor out = Tensor::from({m, n}, std::move(v));
  Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({a, b}, {out}, [ai, bi, oi, m, k, n] {
    if (out_grad_missing(oi)) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      mm_nt(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      mm_tn(ai->data.data(), oi->grad.data(), bi->grad.data(), k, m, n);
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---- convolution ----

namespace {

// col is [Cin*K x Tout]; entries outside the padded input are zero.
void im2col(const double* x, int64_t cin, int64_t t, int64_t k, int64_t stride, int64_t padding,
            int64_t tout, double* col) {
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t kk = 0; kk < k; ++kk) {
      double* row = col + (ci * k + kk) * tout;
      for (int64_t to = 0; to < tout; ++to) {
        const int64_t src = to * stride + kk - padding;
        row[to] = (src >= 0 && src < t) ? x[ci * t + src] : 0.0;
      }
    }
  }
}

void col2im_acc(const double* col, int64_t cin, int64_t t, int64_t k, int64_t stride,
                int64_t padding, int64_t tout, double* x_grad) {
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const double* row = col + (ci * k + kk) * tout;
      for (int64_t to = 0; to < tout; ++to) {
        const int64_t src = to * stride + kk - padding;
        if (src >= 0 && src < t) x_grad[ci * t + src] += row[to];
      }
    }
  }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t padding) {
  check_rank(x, 3, "conv1d");
  check_rank(w, 3, "conv1d weight");
  const int64_t bs = x.dim(0), cin = x.dim(1), t = x.dim(2);
  const int64_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) {
    throw DimensionError("conv1d: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  if (b.rank() != 1 || b.dim(0) != cout) {
    throw DimensionError("conv1d: bias must be [" + std::to_string(cout) + "]");
  }
  if (stride < 1) throw ConfigError("conv1d: stride must be positive");
  if (padding < 0) throw ConfigError("conv1d: padding must be non-negative");
  if (t + 2 * padding < k) {
    throw DimensionError("conv1d: kernel size " + std::to_string(k) +
                         " exceeds padded input length " + std::to_string(t + 2 * padding));
  }
  const int64_t tout = (t + 2 * padding - k) / stride + 1;
  std::vector<double> v(static_cast<size_t>(bs * cout * tout), 0.0);
  std::vector<double> col(static_cast<size_t>(cin * k * tout));
  for (int64_t bb = 0; bb < bs; ++bb) {
    im2col(x.data().data() + bb * cin * t, cin, t, k, stride, padding, tout, col.data());
    double* out_b = v.data() + bb * cout * tout;
    mm_nn(w.data().data(), col.data(), out_b, cout, cin * k, tout);
    for (int64_t co = 0; co < cout; ++co) {
      const double bias = b.data()[co];
      for (int64_t to = 0; to < tout; ++to) out_b[co * tout + to] += bias;
    }
  }
  Tensor out = Tensor::from({bs, cout, tout}, std::move(v));
  Impl xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
  record_op({x, w, b}, {out}, [xi, wi, bi, oi, bs, cin, t, cout, k, stride, padding, tout] {
    if (out_grad_missing(oi)) return;
    std::vector<double> col(static_cast<size_t>(cin * k * tout));
    std::vector<double> dcol(static_cast<size_t>(cin * k * tout));
    if (xi->requires_grad) xi->ensure_grad();
    if (wi->requires_grad) wi->ensure_grad();
    if (bi->requires_grad) bi->ensure_grad();
    for (int64_t bb = 0; bb < bs; ++bb) {
      const double* g_b = oi->grad.data() + bb * cout * tout;
      if (wi->requires_grad || xi->requires_grad) {
        im2col(xi->data.data() + bb * cin * t, cin, t, k, stride, padding, tout, col.data());
      }
      if (wi->requires_grad) {
        mm_nt(g_b, col.data(), wi->grad.data(), cout, tout, cin * k);
      }
      if (xi->requires_grad) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        mm_tn(wi->data.data(), g_b, dcol.data(), cin * k, cout, tout);
        col2im_acc(dcol.data(), cin, t, k, stride, padding, tout,
                   xi->grad.data() + bb * cin * t);
      }
      if (bi->requires_grad) {
        for (int64_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (int64_t to = 0; to < tout; ++to) acc += g_b[co * tout + to];
          bi->grad[co] += acc;
        }
      }
    }
  });
  return out;
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride) {
  check_rank(x, 3, "conv_transpose1d");
  check_rank(w, 3, "conv_transpose1d weight");
  const int64_t bs = x.dim(0), cin = x.dim(1), t = x.dim(2);
  const int64_t cout = w.dim(1), k = w.dim(2);
  if (w.dim(0) != cin) {
    throw DimensionError("conv_transpose1d: weight " + shape_str(w.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  if (stride < 1) throw ConfigError("conv_transpose1d: stride must be positive");
  const int64_t tout = (t - 1) * stride + k;
  std::vector<double> v(static_cast<size_t>(bs * cout * tout), 0.0);
  for (int64_t bb = 0; bb < bs; ++bb) {
    for (int64_t ci = 0; ci < cin; ++ci) {
      for (int64_t co = 0; co < cout; ++co) {
        const double* wrow = w.data().data() + (ci * cout + co) * k;
        for (int64_t ti = 0; ti < t; ++ti) {
          const double xv = x.data()[bb * cin * t + ci * t + ti];
          double* dst = v.data() + bb * cout * tout + co * tout + ti * stride;
          for (int64_t kk = 0; kk < k; ++kk) dst[kk] += xv * wrow[kk];
        }
      }
    }
    for (int64_t co = 0; co < cout; ++co) {
      const double bias = b.data()[co];
      double* dst = v.data() + bb * cout * tout + co * tout;
      for (int64_t to = 0; to < tout; ++to) dst[to] += bias;
    }
  }
  Tensor out = Tensor::from({bs, cout, tout}, std::move(v));
  Impl xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
  record_op({x, w, b}, {out}, [xi, wi, bi, oi, bs, cin, t, cout, k, stride, tout] {
    if (out_grad_missing(oi)) return;
    if (xi->requires_grad) xi->ensure_grad();
    if (wi->requires_grad) wi->ensure_grad();
    if (bi->requires_grad) bi->ensure_grad();
    for (int64_t bb = 0; bb < bs; ++bb) {
      const double* g_b = oi->grad.data() + bb * cout * tout;
      for (int64_t ci = 0; ci < cin; ++ci) {
        for (int64_t co = 0; co < cout; ++co) {
          const double* wrow = wi->data.data() + (ci * cout + co) * k;
          double* wgrad = wi->requires_grad ? wi->grad.data() + (ci * cout + co) * k : nullptr;
          for (int64_t ti = 0; ti < t; ++ti) {
            const double xv = xi->data[bb * cin * t + ci * t + ti];
            const double* grow = g_b + co * tout + ti * stride;
            if (xi->requires_grad) {
              double acc = 0.0;
              for (int64_t kk = 0; kk < k; ++kk) acc += grow[kk] * wrow[kk];
              xi->grad[bb * cin * t + ci * t + ti] += acc;
            }
            if (wgrad) {
              for (int64_t kk = 0; kk < k; ++kk) wgrad[kk] += grow[kk] * xv;
            }
          }
        }
      }
      if (bi->requires_grad) {
        for (int64_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (int64_t to = 0; to < tout; ++to) acc += g_b[co * tout + to];
          bi->grad[co] += acc;
        }
      }
    }
  });
  return out;
}

// ---- DFT ----

namespace {

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// Cached [t x k] tables of cos/sin(2 pi t k / n); symmetric, so they double as
// their own transposes.
struct DftTables {
  std::vector<double> cos_tk;
  std::vector<double> sin_tk;
};

const DftTables& dft_tables(int64_t n) {
  thread_local std::unordered_map<int64_t, std::unique_ptr<DftTables>> cache;
  auto it = cache.find(n);
  if (it == cache.end()) {
    auto tabs = std::make_unique<DftTables>();
    tabs->cos_tk.resize(static_cast<size_t>(n * n));
    tabs->sin_tk.resize(static_cast<size_t>(n * n));
    for (int64_t tt = 0; tt < n; ++tt) {
      for (int64_t kk = 0; kk < n; ++kk) {
        // angle reduced mod n to keep large products exact
        const int64_t m = (tt * kk) % n;
        const double a = 2.0 * M_PI * static_cast<double>(m) / static_cast<double>(n);
        tabs->cos_tk[tt * n + kk] = std::cos(a);
        tabs->sin_tk[tt * n + kk] = std::sin(a);
      }
    }
    it = cache.emplace(n, std::move(tabs)).first;
  }
  return *it->second;
}

// In-place iterative radix-2 FFT; sign +1 or -1 in e^{i sign 2 pi k t / n}.
void fft_pow2(std::vector<double>& re, std::vector<double>& im, int64_t n, int sign) {
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (int64_t len = 2; len <= n; len <<= 1) {
    const double ang = static_cast<double>(sign) * 2.0 * M_PI / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (int64_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (int64_t j = 0; j < len / 2; ++j) {
        const double ur = re[i + j], ui = im[i + j];
        const double vr = re[i + j + len / 2] * cr - im[i + j + len / 2] * ci;
        const double vi = re[i + j + len / 2] * ci + im[i + j + len / 2] * cr;
        re[i + j] = ur + vr;
        im[i + j] = ui + vi;
        re[i + j + len / 2] = ur - vr;
        im[i + j + len / 2] = ui - vi;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

// out = sum_t (re_in + i im_in)[t] e^{i sign 2 pi k t / n}, per row of [rows x n].
// im_in may be null (real input).
void dft_core(const double* re_in, const double* im_in, double* re_out, double* im_out,
              int64_t rows, int64_t n, int sign, DftPath path) {
  const bool use_fft = (path == DftPath::kFft) || (path == DftPath::kAuto && is_pow2(n));
  if (use_fft) {
    if (!is_pow2(n)) throw ConfigError("FFT path requires power-of-two length");
    std::vector<double> wr(static_cast<size_t>(n)), wi(static_cast<size_t>(n));
    for (int64_t r = 0; r < rows; ++r) {
      std::copy_n(re_in + r * n, n, wr.begin());
      if (im_in)
        std::copy_n(im_in + r * n, n, wi.begin());
      else
        std::fill(wi.begin(), wi.end(), 0.0);
      fft_pow2(wr, wi, n, sign);
      std::copy_n(wr.begin(), n, re_out + r * n);
      std::copy_n(wi.begin(), n, im_out + r * n);
    }
    return;
  }
  const DftTables& tabs = dft_tables(n);
  const double s = static_cast<double>(sign);
  std::fill(re_out, re_out + rows * n, 0.0);
  std::fill(im_out, im_out + rows * n, 0.0);
  // (re + i im)(cos + i s sin): accumulate over t in ascending order
  mm_nn(re_in, tabs.cos_tk.data(), re_out, rows, n, n);
  if (im_in) {
    std::vector<double> tmp(static_cast<size_t>(rows * n), 0.0);
    mm_nn(im_in, tabs.sin_tk.data(), tmp.data(), rows, n, n);
    for (int64_t i = 0; i < rows * n; ++i) re_out[i] -= s * tmp[i];
    std::fill(tmp.begin(), tmp.end(), 0.0);
    mm_nn(im_in, tabs.cos_tk.data(), tmp.data(), rows, n, n);
    for (int64_t i = 0; i < rows * n; ++i) im_out[i] += tmp[i];
  }
  {
    std::vector<double> tmp(static_cast<size_t>(rows * n), 0.0);
    mm_nn(re_in, tabs.sin_tk.data(), tmp.data(), rows, n, n);
    for (int64_t i = 0; i < rows * n; ++i) im_out[i] += s * tmp[i];
  }
}

}  // namespace

ComplexTensor dft_forward(const Tensor& x, DftPath path) {
  check_rank(x, 2, "dft_forward");
  const int64_t rows = x.dim(0), n = x.dim(1);
  std::vector<double> re(static_cast<size_t>(rows * n)), im(static_cast<size_t>(rows * n));
  dft_core(x.data().data(), nullptr, re.data(), im.data(), rows, n, -1, path);
  Tensor out_re = Tensor::from({rows, n}, std::move(re));
  Tensor out_im = Tensor::from({rows, n}, std::move(im));
  Impl xi = x.impl(), ri = out_re.impl(), ii = out_im.impl();
  record_op({x}, {out_re, out_im}, [xi, ri, ii, rows, n, path] {
    if (!xi->requires_grad) return;
    if (ri->grad.empty() && ii->grad.empty()) return;
    const std::vector<double> zero(static_cast<size_t>(rows * n), 0.0);
    const double* g_re = ri->grad.empty() ? zero.data() : ri->grad.data();
    const double* g_im = ii->grad.empty() ? zero.data() : ii->grad.data();
    // adjoint of the sign -1 transform on a real input: real part of the
    // sign +1 transform of the output gradient
    std::vector<double> dre(static_cast<size_t>(rows * n)), dim(static_cast<size_t>(rows * n));
    dft_core(g_re, g_im, dre.data(), dim.data(), rows, n, +1, path);
    xi->ensure_grad();
    for (int64_t i = 0; i < rows * n; ++i) xi->grad[i] += dre[i];
  });
  return {out_re, out_im};
}

Tensor dft_inverse(const ComplexTensor& z, double* imag_residual, DftPath path) {
  check_rank(z.re, 2, "dft_inverse");
  check_same_shape(z.re, z.im, "dft_inverse");
  const int64_t rows = z.re.dim(0), n = z.re.dim(1);
  std::vector<double> re(static_cast<size_t>(rows * n)), im(static_cast<size_t>(rows * n));
  dft_core(z.re.data().data(), z.im.data().data(), re.data(), im.data(), rows, n, +1, path);
  const double inv_n = 1.0 / static_cast<double>(n);
  double max_imag = 0.0;
  for (int64_t i = 0; i < rows * n; ++i) {
    re[i] *= inv_n;
    max_imag = std::max(max_imag, std::abs(im[i] * inv_n));
  }
  if (imag_residual) *imag_residual = max_imag;
  Tensor out = Tensor::from({rows, n}, std::move(re));
  Impl rei = z.re.impl(), imi = z.im.impl(), oi = out.impl();
  record_op({z.re, z.im}, {out}, [rei, imi, oi, rows, n, inv_n, path] {
    if (out_grad_missing(oi)) return;
    // gradient flows only through the retained real part
    std::vector<double> dre(static_cast<size_t>(rows * n)), dim(static_cast<size_t>(rows * n));
    dft_core(oi->grad.data(), nullptr, dre.data(), dim.data(), rows, n, -1, path);
    if (rei->requires_grad) {
      rei->ensure_grad();
      for (int64_t i = 0; i < rows * n; ++i) rei->grad[i] += dre[i] * inv_n;
    }
    if (imi->requires_grad) {
      imi->ensure_grad();
      for (int64_t i = 0; i < rows * n; ++i) imi->grad[i] += dim[i] * inv_n;
    }
  });
  return out;
}

ComplexTensor complex_hadamard(const ComplexTensor& a, const ComplexTensor& b) {
  Tensor re = sub(mul(a.re, b.re), mul(a.im, b.im));
  Tensor im = add(mul(a.re, b.im), mul(a.im, b.re));
  return {re, im};
}

// ---- attention ----

Tensor self_attention(const Tensor& z, const AttentionParams& p, int64_t heads,
                      std::vector<Tensor>* attn_out) {
  check_rank(z, 2, "self_attention");
  const int64_t d = z.dim(1);
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("self_attention: embed dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  }
  const int64_t dh = d / heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = linear(z, p.wq, p.bq);
  Tensor k = linear(z, p.wk, p.bk);
  Tensor v = linear(z, p.wv, p.bv);
  std::vector<Tensor> ctx;
  ctx.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = mul_scalar(matmul(qh, transpose2d(kh)), scale_f);
    Tensor attn = softmax_rows(scores);
    if (attn_out) attn_out->push_back(attn);
    ctx.push_back(matmul(attn, vh));
  }
  return linear(concat_cols(ctx), p.wo, p.bo);
}

// ---- losses ----

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  check_same_shape(logits, targets, "bce_with_logits");
  const size_t n = logits.data().size();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double x = logits.data()[i], y = targets.data()[i];
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  Impl li = logits.impl(), ti = targets.impl(), oi = out.impl();
  record_op({logits, targets}, {out}, [li, ti, oi, n] {
    if (out_grad_missing(oi) || !li->requires_grad) return;
    li->ensure_grad();
    for (size_t i = 0; i < n; ++i) {
      const double x = li->data[i];
      const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      li->grad[i] += oi->grad[0] * (s - ti->data[i]) / static_cast<double>(n);
    }
  });
  return out;
}

// ---- gradient checking ----

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");
  // analytic pass
  Tensor probe = Tensor::from(x.shape(), x.data(), true);
  std::vector<double> analytic(x.data().size(), 0.0);
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f(probe);
    if (y.numel() != 1) throw UsageError("grad_check: f must return a scalar");
    if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite output");
    tape.backward(y);
    if (probe.has_grad()) analytic = probe.raw_grad();
  }
  // central differences, no tape active
  double worst = 0.0;
  std::vector<double> base = x.data();
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += eps;
    minus[i] -= eps;
    const double fp = f(Tensor::from(x.shape(), std::move(plus))).item();
    const double fm = f(Tensor::from(x.shape(), std::move(minus))).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite output during finite differences");
    }
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace least
