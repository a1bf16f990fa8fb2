#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "bimm/mask.hpp"
#include "bimm/tensor.hpp"

namespace bimm {

// ===========================================================================
// Matrix kernels. Row-major, accumulate into c. Within each output element
// the reduction index ascends, so results are bit-stable across runs.
// ===========================================================================
namespace detail {

// c (m x n) += a (m x k) * b (k x n)
template <class Real>
void gemm_nn(size_t m, size_t k, size_t n, const Real* a, const Real* b, Real* c) {
  for (size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      Real s = arow[p];
      const Real* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// c (m x n) += a^T * b, where a is (k x m), b is (k x n)
template <class Real>
void gemm_tn(size_t m, size_t k, size_t n, const Real* a, const Real* b, Real* c) {
  for (size_t p = 0; p < k; ++p) {
    const Real* arow = a + p * m;
    const Real* brow = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      Real s = arow[i];
      Real* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

template <class Real>
void transpose(size_t rows, size_t cols, const Real* src, Real* dst) {
  for (size_t i = 0; i < rows; ++i)
    for (size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// c (m x n) += a (m x k) * b^T, where b is (n x k). Implemented by packing
// b^T and running the nn kernel, which keeps the inner loop stride-1.
template <class Real>
void gemm_nt(size_t m, size_t k, size_t n, const Real* a, const Real* b, Real* c) {
  thread_local std::vector<Real> scratch;
  if (scratch.size() < k * n) scratch.resize(k * n);
  transpose(n, k, b, scratch.data());
  gemm_nn(m, k, n, a, scratch.data(), c);
}

template <class Real>
std::shared_ptr<GradNode<Real>> make_node(size_t out_size,
                                          std::vector<std::shared_ptr<GradNode<Real>>> parents,
                                          std::function<void(GradNode<Real>&)> backprop) {
  auto n = std::make_shared<GradNode<Real>>();
  n->size = out_size;
  n->parents = std::move(parents);
  n->backprop = std::move(backprop);
  return n;
}

template <class Real>
std::vector<std::shared_ptr<GradNode<Real>>> live_parents(
    std::initializer_list<std::shared_ptr<GradNode<Real>>> nodes) {
  std::vector<std::shared_ptr<GradNode<Real>>> out;
  for (const auto& n : nodes)
    if (n) out.push_back(n);
  return out;
}

}  // namespace detail

template <class... Ts>
bool tracked(const Ts&... ts) {
  return grad_mode() && (... || static_cast<bool>(ts.node));
}

template <class Real>
void check_finite(const Tensor<Real>& t, const std::string& what) {
  for (Real v : t.vec()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(what + ": non-finite value encountered");
    }
  }
}

// ===========================================================================
// matmul: a (..., n, k) x b (k, m) or (..., k, m) -> (..., n, m).
// A 2-d b is broadcast over a's leading dimensions.
// ===========================================================================
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError("matmul: need >= 2-d operands, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  size_t n = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  bool b_broadcast = (b.ndim() == 2);
  if (!b_broadcast) {
    if (b.ndim() != a.ndim() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw ShapeError("matmul: leading dims mismatch " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
  }
  size_t kb = b.dim(b.ndim() - 2), m = b.dim(b.ndim() - 1);
  if (k != kb) {
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  size_t batch = numel(a.shape()) / (n * k);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(m);
  Tensor<Real> out(out_shape);

  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* pc = out.data();
  for (size_t s = 0; s < batch; ++s) {
    detail::gemm_nn(n, k, m, pa + s * n * k, b_broadcast ? pb : pb + s * k * m, pc + s * n * m);
  }

  if (tracked(a, b)) {
    auto an = a.node, bn = b.node;
    auto ad = a.storage(), bd = b.storage();
    out.attach_node(detail::make_node<Real>(
        out.size(), detail::live_parents<Real>({an, bn}),
        [an, bn, ad, bd, n, k, m, batch, b_broadcast](GradNode<Real>& node) {
          const Real* dc = node.grad.data();
          if (an) {
            an->ensure_grad();
            Real* da = an->grad.data();
            for (size_t s = 0; s < batch; ++s) {
              detail::gemm_nt(n, m, k, dc + s * n * m,
                              b_broadcast ? bd->data() : bd->data() + s * k * m, da + s * n * k);
            }
          }
          if (bn) {
            bn->ensure_grad();
            Real* db = bn->grad.data();
            for (size_t s = 0; s < batch; ++s) {
              detail::gemm_tn(k, n, m, ad->data() + s * n * k, dc + s * n * m,
                              b_broadcast ? db : db + s * k * m);
            }
          }
        }));
  }
  return out;
}

// ===========================================================================
// add: b's shape must be a suffix of a's shape (equal shapes included);
// b is broadcast across a's leading dimensions.
// ===========================================================================
template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (b.ndim() > a.ndim() ||
      !std::equal(b.shape().rbegin(), b.shape().rend(), a.shape().rbegin())) {
    throw ShapeError("add: " + shape_str(b.shape()) + " is not a suffix of " +
                     shape_str(a.shape()));
  }
  size_t bs = b.size();
  size_t reps = a.size() / bs;
  Tensor<Real> out(a.shape());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* pc = out.data();
  for (size_t r = 0; r < reps; ++r)
    for (size_t j = 0; j < bs; ++j) pc[r * bs + j] = pa[r * bs + j] + pb[j];

  if (tracked(a, b)) {
    auto an = a.node, bn = b.node;
    out.attach_node(detail::make_node<Real>(
        out.size(), detail::live_parents<Real>({an, bn}), [an, bn, bs, reps](GradNode<Real>& node) {
          const Real* dc = node.grad.data();
          if (an) {
            an->ensure_grad();
            Real* da = an->grad.data();
            for (size_t i = 0; i < node.grad.size(); ++i) da[i] += dc[i];
          }
          if (bn) {
            bn->ensure_grad();
            Real* db = bn->grad.data();
            for (size_t r = 0; r < reps; ++r)
              for (size_t j = 0; j < bs; ++j) db[j] += dc[r * bs + j];
          }
        }));
  }
  return out;
}

// Elementwise product, equal shapes.
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<Real> out(a.shape());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* pc = out.data();
  for (size_t i = 0; i < out.size(); ++i) pc[i] = pa[i] * pb[i];

  if (tracked(a, b)) {
    auto an = a.node, bn = b.node;
    auto ad = a.storage(), bd = b.storage();
    out.attach_node(detail::make_node<Real>(
        out.size(), detail::live_parents<Real>({an, bn}), [an, bn, ad, bd](GradNode<Real>& node) {
          const Real* dc = node.grad.data();
          if (an) {
            an->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += dc[i] * (*bd)[i];
          }
          if (bn) {
            bn->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += dc[i] * (*ad)[i];
          }
        }));
  }
  return out;
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real s) {
  Tensor<Real> out(a.shape());
  const Real* pa = a.data();
  Real* pc = out.data();
  for (size_t i = 0; i < out.size(); ++i) pc[i] = pa[i] * s;
  if (tracked(a)) {
    auto an = a.node;
    out.attach_node(detail::make_node<Real>(out.size(), {an}, [an, s](GradNode<Real>& node) {
      an->ensure_grad();
      const Real* dc = node.grad.data();
      for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += dc[i] * s;
    }));
  }
  return out;
}

// ===========================================================================
// gelu, exact form: y = x * Phi(x) with Phi the standard normal CDF.
// ===========================================================================
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  const Real* px = x.data();
  Real* py = out.data();
  const Real inv_sqrt2 = Real(0.7071067811865475244);
  for (size_t i = 0; i < out.size(); ++i) {
    Real v = px[i];
    py[i] = v * Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
  }
  if (tracked(x)) {
    auto xn = x.node;
    auto xd = x.storage();
    out.attach_node(detail::make_node<Real>(out.size(), {xn}, [xn, xd](GradNode<Real>& node) {
      xn->ensure_grad();
      const Real* dc = node.grad.data();
      const Real inv_sqrt2 = Real(0.7071067811865475244);
      const Real inv_sqrt2pi = Real(0.3989422804014326779);
      for (size_t i = 0; i < node.grad.size(); ++i) {
        Real v = (*xd)[i];
        Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
        Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
        xn->grad[i] += dc[i] * (cdf + v * pdf);
      }
    }));
  }
  return out;
}

// ===========================================================================
// layer_norm over the last dimension, population variance.
// ===========================================================================
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
  if (x.ndim() < 1) throw ShapeError("layer_norm: need >= 1-d input");
  size_t d = x.dim(x.ndim() - 1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must have shape (" + std::to_string(d) + ")");
  }
  size_t rows = x.size() / d;
  Tensor<Real> out(x.shape());
  auto xhat = std::make_shared<std::vector<Real>>(x.size());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  Real* py = out.data();
  for (size_t r = 0; r < rows; ++r) {
    const Real* row = px + r * d;
    Real mean = 0;
    for (size_t j = 0; j < d; ++j) mean += row[j];
    mean /= Real(d);
    Real var = 0;
    for (size_t j = 0; j < d; ++j) {
      Real c = row[j] - mean;
      var += c * c;
    }
    var /= Real(d);
    Real is = Real(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (size_t j = 0; j < d; ++j) {
      Real xh = (row[j] - mean) * is;
      (*xhat)[r * d + j] = xh;
      py[r * d + j] = pg[j] * xh + pb[j];
    }
  }
  if (tracked(x, gamma, beta)) {
    auto xn = x.node, gn = gamma.node, bn = beta.node;
    auto gd = gamma.storage();
    out.attach_node(detail::make_node<Real>(
        out.size(), detail::live_parents<Real>({xn, gn, bn}),
        [xn, gn, bn, gd, xhat, inv_std, rows, d](GradNode<Real>& node) {
          const Real* dy = node.grad.data();
          if (gn) gn->ensure_grad();
          if (bn) bn->ensure_grad();
          if (xn) xn->ensure_grad();
          for (size_t r = 0; r < rows; ++r) {
            const Real* dyr = dy + r * d;
            const Real* xh = xhat->data() + r * d;
            if (gn || bn) {
              for (size_t j = 0; j < d; ++j) {
                if (gn) gn->grad[j] += dyr[j] * xh[j];
                if (bn) bn->grad[j] += dyr[j];
              }
            }
            if (xn) {
              Real sum_dxhat = 0, sum_dxhat_xhat = 0;
              for (size_t j = 0; j < d; ++j) {
                Real dxh = dyr[j] * (*gd)[j];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[j];
              }
              Real is = (*inv_std)[r];
              Real inv_d = Real(1) / Real(d);
              Real* dx = xn->grad.data() + r * d;
              for (size_t j = 0; j < d; ++j) {
                Real dxh = dyr[j] * (*gd)[j];
                dx[j] += is * (dxh - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
              }
            }
          }
        }));
  }
  return out;
}

// ===========================================================================
// softmax over the last dimension, max-subtracted.
// ===========================================================================
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
  if (x.ndim() < 1) throw ShapeError("softmax: need >= 1-d input");
  size_t d = x.dim(x.ndim() - 1);
  size_t rows = x.size() / d;
  Tensor<Real> out(x.shape());
  const Real* px = x.data();
  Real* py = out.data();
  for (size_t r = 0; r < rows; ++r) {
    const Real* row = px + r * d;
    Real* orow = py + r * d;
    Real mx = row[0];
    for (size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (size_t j = 0; j < d; ++j) {
      Real e = std::exp(row[j] - mx);
      orow[j] = e;
      z += e;
    }
    Real inv = Real(1) / z;
    for (size_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  if (tracked(x)) {
    auto xn = x.node;
    auto yd = out.storage();
    out.attach_node(detail::make_node<Real>(out.size(), {xn}, [xn, yd, rows, d](GradNode<Real>& node) {
      xn->ensure_grad();
      const Real* dy = node.grad.data();
      for (size_t r = 0; r < rows; ++r) {
        const Real* dyr = dy + r * d;
        const Real* yr = yd->data() + r * d;
        Real dot = 0;
        for (size_t j = 0; j < d; ++j) dot += dyr[j] * yr[j];
        Real* dx = xn->grad.data() + r * d;
        for (size_t j = 0; j < d; ++j) dx[j] += (dyr[j] - dot) * yr[j];
      }
    }));
  }
  return out;
}

// ===========================================================================
// Fused multi-head self-attention. qkv is (B, N, 3*D) laid out [Q | K | V];
// returns (B, N, D). Scores are scaled by 1/sqrt(head_dim); per-head softmax
// matrices are saved for the backward pass.
// ===========================================================================
template <class Real>
Tensor<Real> attention(const Tensor<Real>& qkv, size_t heads) {
  if (qkv.ndim() != 3) throw ShapeError("attention: qkv must be (B, N, 3D), got " + shape_str(qkv.shape()));
  size_t B = qkv.dim(0), N = qkv.dim(1), three_d = qkv.dim(2);
  if (three_d % 3 != 0) throw ShapeError("attention: last dim must be 3*D");
  size_t D = three_d / 3;
  if (heads == 0 || D % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(D) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  size_t dh = D / heads;
  Real scale = Real(1) / std::sqrt(Real(dh));

  Tensor<Real> out({B, N, D});
  // Saved state: packed Q, K, V (B*H*N*dh each) and softmax rows P (B*H*N*N).
  auto qs = std::make_shared<std::vector<Real>>(B * heads * N * dh);
  auto ks = std::make_shared<std::vector<Real>>(B * heads * N * dh);
  auto vs = std::make_shared<std::vector<Real>>(B * heads * N * dh);
  auto ps = std::make_shared<std::vector<Real>>(B * heads * N * N);

  const Real* pin = qkv.data();
  Real* pout = out.data();
  std::vector<Real> scores(N * N);
  for (size_t b = 0; b < B; ++b) {
    for (size_t h = 0; h < heads; ++h) {
      Real* Q = qs->data() + (b * heads + h) * N * dh;
      Real* K = ks->data() + (b * heads + h) * N * dh;
      Real* V = vs->data() + (b * heads + h) * N * dh;
      for (size_t i = 0; i < N; ++i) {
        const Real* row = pin + (b * N + i) * three_d;
        std::memcpy(Q + i * dh, row + h * dh, dh * sizeof(Real));
        std::memcpy(K + i * dh, row + D + h * dh, dh * sizeof(Real));
        std::memcpy(V + i * dh, row + 2 * D + h * dh, dh * sizeof(Real));
      }
      std::fill(scores.begin(), scores.end(), Real(0));
      detail::gemm_nt(N, dh, N, Q, K, scores.data());
      Real* P = ps->data() + (b * heads + h) * N * N;
      for (size_t i = 0; i < N; ++i) {
        Real* srow = scores.data() + i * N;
        Real mx = srow[0] * scale;
        for (size_t j = 0; j < N; ++j) {
          srow[j] *= scale;
          mx = std::max(mx, srow[j]);
        }
        Real z = 0;
        Real* prow = P + i * N;
        for (size_t j = 0; j < N; ++j) {
          Real e = std::exp(srow[j] - mx);
          prow[j] = e;
          z += e;
        }
        Real inv = Real(1) / z;
        for (size_t j = 0; j < N; ++j) prow[j] *= inv;
      }
      // O_h = P * V, scattered back into the interleaved output layout.
      std::vector<Real> oh(N * dh, Real(0));
      detail::gemm_nn(N, N, dh, P, V, oh.data());
      for (size_t i = 0; i < N; ++i) {
        std::memcpy(pout + (b * N + i) * D + h * dh, oh.data() + i * dh, dh * sizeof(Real));
      }
    }
  }

  if (tracked(qkv)) {
    auto xn = qkv.node;
    out.attach_node(detail::make_node<Real>(
        out.size(), {xn}, [xn, qs, ks, vs, ps, B, N, D, heads, dh, scale](GradNode<Real>& node) {
          xn->ensure_grad();
          const Real* dout = node.grad.data();
          Real* dqkv = xn->grad.data();
          size_t three_d = 3 * D;
          std::vector<Real> doh(N * dh), dv(N * dh), dp(N * N), dq(N * dh), dk(N * dh);
          for (size_t b = 0; b < B; ++b) {
            for (size_t h = 0; h < heads; ++h) {
              const Real* Q = qs->data() + (b * heads + h) * N * dh;
              const Real* K = ks->data() + (b * heads + h) * N * dh;
              const Real* V = vs->data() + (b * heads + h) * N * dh;
              const Real* P = ps->data() + (b * heads + h) * N * N;
              for (size_t i = 0; i < N; ++i) {
                std::memcpy(doh.data() + i * dh, dout + (b * N + i) * D + h * dh,
                            dh * sizeof(Real));
              }
              // dV = P^T * dO
              std::fill(dv.begin(), dv.end(), Real(0));
              detail::gemm_tn(N, N, dh, P, doh.data(), dv.data());
              // dP = dO * V^T
              std::fill(dp.begin(), dp.end(), Real(0));
              detail::gemm_nt(N, dh, N, doh.data(), V, dp.data());
              // softmax backward, then fold in the score scale
              for (size_t i = 0; i < N; ++i) {
                Real* dprow = dp.data() + i * N;
                const Real* prow = P + i * N;
                Real dot = 0;
                for (size_t j = 0; j < N; ++j) dot += dprow[j] * prow[j];
                for (size_t j = 0; j < N; ++j) dprow[j] = (dprow[j] - dot) * prow[j] * scale;
              }
              // dQ = dS * K, dK = dS^T * Q
              std::fill(dq.begin(), dq.end(), Real(0));
              detail::gemm_nn(N, N, dh, dp.data(), K, dq.data());
              std::fill(dk.begin(), dk.end(), Real(0));
              detail::gemm_tn(N, N, dh, dp.data(), Q, dk.data());
              for (size_t i = 0; i < N; ++i) {
                Real* drow = dqkv + (b * N + i) * three_d;
                const Real* dqr = dq.data() + i * dh;
                const Real* dkr = dk.data() + i * dh;
                const Real* dvr = dv.data() + i * dh;
                for (size_t j = 0; j < dh; ++j) {
                  drow[h * dh + j] += dqr[j];
                  drow[D + h * dh + j] += dkr[j];
                  drow[2 * D + h * dh + j] += dvr[j];
                }
              }
            }
          }
        }));
  }
  return out;
}

// ===========================================================================
// Row gathers and sequence assembly.
// ===========================================================================

// x (B, N, D), idx[b] lists rows for sample b (all the same length K).
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::vector<size_t>>& idx) {
  if (x.ndim() != 3) throw ShapeError("gather_rows: x must be (B, N, D)");
  size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (idx.size() != B) throw ShapeError("gather_rows: need one index list per batch sample");
  size_t K = idx.empty() ? 0 : idx[0].size();
  for (const auto& v : idx) {
    if (v.size() != K) throw ShapeError("gather_rows: ragged index lists");
    for (size_t r : v)
      if (r >= N) throw ShapeError("gather_rows: row index out of range");
  }
  Tensor<Real> out({B, K, D});
  const Real* px = x.data();
  Real* py = out.data();
  for (size_t b = 0; b < B; ++b)
    for (size_t i = 0; i < K; ++i)
      std::memcpy(py + (b * K + i) * D, px + (b * N + idx[b][i]) * D, D * sizeof(Real));

  if (tracked(x)) {
    auto xn = x.node;
    out.attach_node(
        detail::make_node<Real>(out.size(), {xn}, [xn, idx, B, N, K, D](GradNode<Real>& node) {
          xn->ensure_grad();
          const Real* dy = node.grad.data();
          Real* dx = xn->grad.data();
          for (size_t b = 0; b < B; ++b)
            for (size_t i = 0; i < K; ++i) {
              Real* drow = dx + (b * N + idx[b][i]) * D;
              const Real* srow = dy + (b * K + i) * D;
              for (size_t j = 0; j < D; ++j) drow[j] += srow[j];
            }
        }));
  }
  return out;
}

// Rebuild full-length sequences from visible rows plus a learned mask token.
// visible (B, V, D), mask_token (D); masks[b] supplies the index partition.
template <class Real>
Tensor<Real> assemble_sequence(const Tensor<Real>& visible, const Tensor<Real>& mask_token,
                               const std::vector<MaskSpec>& masks) {
  if (visible.ndim() != 3) throw ShapeError("assemble_sequence: visible must be (B, V, D)");
  size_t B = visible.dim(0), V = visible.dim(1), D = visible.dim(2);
  if (mask_token.shape() != Shape{D}) {
    throw ShapeError("assemble_sequence: mask token must have shape (" + std::to_string(D) + ")");
  }
  if (masks.size() != B) throw ShapeError("assemble_sequence: need one MaskSpec per sample");
  size_t N = masks[0].n_tokens;
  for (const auto& m : masks) {
    if (m.n_tokens != N || m.n_visible() != V) {
      throw ShapeError("assemble_sequence: mask does not match visible rows");
    }
  }
  Tensor<Real> out({B, N, D});
  const Real* pv = visible.data();
  const Real* pt = mask_token.data();
  Real* py = out.data();
  for (size_t b = 0; b < B; ++b) {
    for (size_t j = 0; j < V; ++j)
      std::memcpy(py + (b * N + masks[b].visible_idx[j]) * D, pv + (b * V + j) * D,
                  D * sizeof(Real));
    for (size_t i : masks[b].masked_idx) std::memcpy(py + (b * N + i) * D, pt, D * sizeof(Real));
  }

  if (tracked(visible, mask_token)) {
    auto vn = visible.node, tn = mask_token.node;
    out.attach_node(detail::make_node<Real>(
        out.size(), detail::live_parents<Real>({vn, tn}),
        [vn, tn, masks, B, V, N, D](GradNode<Real>& node) {
          const Real* dy = node.grad.data();
          if (vn) {
            vn->ensure_grad();
            Real* dv = vn->grad.data();
            for (size_t b = 0; b < B; ++b)
              for (size_t j = 0; j < V; ++j) {
                const Real* srow = dy + (b * N + masks[b].visible_idx[j]) * D;
                Real* drow = dv + (b * V + j) * D;
                for (size_t c = 0; c < D; ++c) drow[c] += srow[c];
              }
          }
          if (tn) {
            tn->ensure_grad();
            Real* dt = tn->grad.data();
            for (size_t b = 0; b < B; ++b)
              for (size_t i : masks[b].masked_idx) {
                const Real* srow = dy + (b * N + i) * D;
                for (size_t c = 0; c < D; ++c) dt[c] += srow[c];
              }
          }
        }));
  }
  return out;
}

// Prepend a learned token as row 0 of every sample: (B, N, D) -> (B, N+1, D).
template <class Real>
Tensor<Real> prepend_token(const Tensor<Real>& x, const Tensor<Real>& tok) {
  if (x.ndim() != 3) throw ShapeError("prepend_token: x must be (B, N, D)");
  size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (tok.shape() != Shape{D}) throw ShapeError("prepend_token: token must have shape (D)");
  Tensor<Real> out({B, N + 1, D});
  const Real* px = x.data();
  const Real* pt = tok.data();
  Real* py = out.data();
  for (size_t b = 0; b < B; ++b) {
    std::memcpy(py + b * (N + 1) * D, pt, D * sizeof(Real));
    std::memcpy(py + (b * (N + 1) + 1) * D, px + b * N * D, N * D * sizeof(Real));
  }
  if (tracked(x, tok)) {
    auto xn = x.node, tn = tok.node;
    out.attach_node(detail::make_node<Real>(
        out.size(), detail::live_parents<Real>({xn, tn}), [xn, tn, B, N, D](GradNode<Real>& node) {
          const Real* dy = node.grad.data();
          if (xn) {
            xn->ensure_grad();
            Real* dx = xn->grad.data();
            for (size_t b = 0; b < B; ++b)
              for (size_t i = 0; i < N * D; ++i) dx[b * N * D + i] += dy[(b * (N + 1) + 1) * D + i];
          }
          if (tn) {
            tn->ensure_grad();
            Real* dt = tn->grad.data();
            for (size_t b = 0; b < B; ++b)
              for (size_t c = 0; c < D; ++c) dt[c] += dy[b * (N + 1) * D + c];
          }
        }));
  }
  return out;
}

// Mean over the row dimension: (B, N, D) -> (B, D).
template <class Real>
Tensor<Real> mean_rows(const Tensor<Real>& x) {
  if (x.ndim() != 3) throw ShapeError("mean_rows: x must be (B, N, D)");
  size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  Tensor<Real> out({B, D});
  const Real* px = x.data();
  Real* py = out.data();
  Real inv = Real(1) / Real(N);
  for (size_t b = 0; b < B; ++b) {
    Real* orow = py + b * D;
    for (size_t i = 0; i < N; ++i) {
      const Real* row = px + (b * N + i) * D;
      for (size_t j = 0; j < D; ++j) orow[j] += row[j];
    }
    for (size_t j = 0; j < D; ++j) orow[j] *= inv;
  }
  if (tracked(x)) {
    auto xn = x.node;
    out.attach_node(detail::make_node<Real>(out.size(), {xn}, [xn, B, N, D](GradNode<Real>& node) {
      xn->ensure_grad();
      const Real* dy = node.grad.data();
      Real* dx = xn->grad.data();
      Real inv = Real(1) / Real(N);
      for (size_t b = 0; b < B; ++b)
        for (size_t i = 0; i < N; ++i)
          for (size_t j = 0; j < D; ++j) dx[(b * N + i) * D + j] += dy[b * D + j] * inv;
    }));
  }
  return out;
}

// Select one row from every sample: (B, N, D) -> (B, D).
template <class Real>
Tensor<Real> take_row(const Tensor<Real>& x, size_t row) {
  if (x.ndim() != 3) throw ShapeError("take_row: x must be (B, N, D)");
  size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (row >= N) throw ShapeError("take_row: row out of range");
  Tensor<Real> out({B, D});
  for (size_t b = 0; b < B; ++b)
    std::memcpy(out.data() + b * D, x.data() + (b * N + row) * D, D * sizeof(Real));
  if (tracked(x)) {
    auto xn = x.node;
    out.attach_node(
        detail::make_node<Real>(out.size(), {xn}, [xn, B, N, D, row](GradNode<Real>& node) {
          xn->ensure_grad();
          const Real* dy = node.grad.data();
          Real* dx = xn->grad.data();
          for (size_t b = 0; b < B; ++b)
            for (size_t j = 0; j < D; ++j) dx[(b * N + row) * D + j] += dy[b * D + j];
        }));
  }
  return out;
}

// ===========================================================================
// Reductions and losses.
// ===========================================================================
template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real s = 0;
  for (Real v : x.vec()) s += v;
  Tensor<Real> out = Tensor<Real>::scalar(s);
  if (tracked(x)) {
    auto xn = x.node;
    out.attach_node(detail::make_node<Real>(1, {xn}, [xn](GradNode<Real>& node) {
      xn->ensure_grad();
      Real d = node.grad[0];
      for (auto& g : xn->grad) g += d;
    }));
  }
  return out;
}

// Mean squared error over all elements.
template <class Real>
Tensor<Real> mse_loss(const Tensor<Real>& pred, const Tensor<Real>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  size_t n = pred.size();
  if (n == 0) throw ContractError("mse_loss: empty tensors");
  const Real* pp = pred.data();
  const Real* pt = target.data();
  Real s = 0;
  for (size_t i = 0; i < n; ++i) {
    Real d = pp[i] - pt[i];
    s += d * d;
  }
  Tensor<Real> out = Tensor<Real>::scalar(s / Real(n));
  if (tracked(pred, target)) {
    auto pn = pred.node, tn = target.node;
    auto pd = pred.storage(), td = target.storage();
    out.attach_node(detail::make_node<Real>(
        1, detail::live_parents<Real>({pn, tn}), [pn, tn, pd, td, n](GradNode<Real>& node) {
          Real d = node.grad[0] * Real(2) / Real(n);
          if (pn) {
            pn->ensure_grad();
            for (size_t i = 0; i < n; ++i) pn->grad[i] += d * ((*pd)[i] - (*td)[i]);
          }
          if (tn) {
            tn->ensure_grad();
            for (size_t i = 0; i < n; ++i) tn->grad[i] -= d * ((*pd)[i] - (*td)[i]);
          }
        }));
  }
  return out;
}

// Mean negative log-likelihood of integer labels under softmax(logits).
template <class Real>
Tensor<Real> cross_entropy_loss(const Tensor<Real>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy_loss: logits must be (B, C)");
  size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) throw ShapeError("cross_entropy_loss: one label per row required");
  for (int l : labels)
    if (l < 0 || static_cast<size_t>(l) >= C)
      throw ContractError("cross_entropy_loss: label out of range");
  const Real* px = logits.data();
  auto probs = std::make_shared<std::vector<Real>>(B * C);
  Real total = 0;
  for (size_t b = 0; b < B; ++b) {
    const Real* row = px + b * C;
    Real mx = row[0];
    for (size_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (size_t j = 0; j < C; ++j) {
      Real e = std::exp(row[j] - mx);
      (*probs)[b * C + j] = e;
      z += e;
    }
    Real inv = Real(1) / z;
    for (size_t j = 0; j < C; ++j) (*probs)[b * C + j] *= inv;
    total += std::log(z) + mx - row[labels[b]];
  }
  Tensor<Real> out = Tensor<Real>::scalar(total / Real(B));
  if (tracked(logits)) {
    auto xn = logits.node;
    out.attach_node(detail::make_node<Real>(1, {xn}, [xn, probs, labels, B, C](GradNode<Real>& node) {
      xn->ensure_grad();
      Real d = node.grad[0] / Real(B);
      for (size_t b = 0; b < B; ++b) {
        Real* dx = xn->grad.data() + b * C;
        const Real* p = probs->data() + b * C;
        for (size_t j = 0; j < C; ++j) dx[j] += d * p[j];
        dx[labels[b]] -= d;
      }
    }));
  }
  return out;
}

// y = x W + b, the everywhere-used affine map.
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  return add(matmul(x, w), b);
}

}  // namespace bimm
