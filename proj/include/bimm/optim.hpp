#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <unordered_set>
#include <vector>

#include "bimm/param_store.hpp"

namespace bimm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Moment buffers aligned with the unique-parameter list of a store.
template <class Real>
struct OptimState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  int64_t step = 0;
};

// Indices of parameters with distinct storage, in store order. Aliased
// parameters (shared weights registered under several names) are visited
// once, so their shared gradient buffer is applied exactly once.
template <class Real>
std::vector<size_t> unique_param_indices(const ParamStore<Real>& store) {
  std::vector<size_t> out;
  std::unordered_set<const void*> seen;
  for (size_t i = 0; i < store.size(); ++i) {
    if (seen.insert(store.tensor(i).storage().get()).second) out.push_back(i);
  }
  return out;
}

// Decoupled weight decay AdamW. Decay is applied to the parameter before the
// moment update; moments are bias-corrected.
template <class Real>
void adamw_step(ParamStore<Real>& store, OptimState<Real>& state, Real lr,
                const AdamWConfig& cfg = {}) {
  if (!(lr > Real(0))) throw ConfigError("adamw_step: learning rate must be positive");
  std::vector<size_t> idx = unique_param_indices(store);
  if (state.m.empty()) {
    state.m.resize(idx.size());
    state.v.resize(idx.size());
    for (size_t u = 0; u < idx.size(); ++u) {
      state.m[u].assign(store.tensor(idx[u]).size(), Real(0));
      state.v[u].assign(store.tensor(idx[u]).size(), Real(0));
    }
  }
  if (state.m.size() != idx.size()) {
    throw ContractError("adamw_step: optimizer state does not match parameter set");
  }
  state.step += 1;
  Real b1 = Real(cfg.beta1), b2 = Real(cfg.beta2);
  Real bc1 = Real(1) - std::pow(b1, Real(state.step));
  Real bc2 = Real(1) - std::pow(b2, Real(state.step));
  Real wd = Real(cfg.weight_decay), eps = Real(cfg.eps);
  for (size_t u = 0; u < idx.size(); ++u) {
    Tensor<Real>& t = store.tensor(idx[u]);
    Real* p = t.data();
    const Real* g = t.grad().data();
    Real* m = state.m[u].data();
    Real* v = state.v[u].data();
    size_t n = t.size();
    if (state.m[u].size() != n) throw ContractError("adamw_step: state size mismatch");
    for (size_t i = 0; i < n; ++i) {
      p[i] *= (Real(1) - lr * wd);
      m[i] = b1 * m[i] + (Real(1) - b1) * g[i];
      v[i] = b2 * v[i] + (Real(1) - b2) * g[i] * g[i];
      Real mhat = m[i] / bc1;
      Real vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Central-difference gradients, the oracle the analytic backward pass is
// checked against. Coordinates may be sampled to keep large checks cheap.
// ---------------------------------------------------------------------------
struct CoordRef {
  size_t param;  // index into the store
  size_t elem;   // flat element index
};

template <class Real>
std::vector<Real> finite_diff_grad(ParamStore<Real>& store,
                                   const std::function<Real()>& loss_fn,
                                   const std::vector<CoordRef>& coords, Real h) {
  if (!(h > Real(0))) throw ContractError("finite_diff_grad: step size must be positive");
  std::vector<Real> out;
  out.reserve(coords.size());
  for (const CoordRef& c : coords) {
    Real* slot = store.tensor(c.param).data() + c.elem;
    Real saved = *slot;
    *slot = saved + h;
    Real up = loss_fn();
    *slot = saved - h;
    Real down = loss_fn();
    *slot = saved;
    out.push_back((up - down) / (Real(2) * h));
  }
  return out;
}

template <class Real>
Real rel_err(Real a, Real b) {
  Real denom = std::max(std::max(std::abs(a), std::abs(b)), Real(1e-6));
  return std::abs(a - b) / denom;
}

}  // namespace bimm
