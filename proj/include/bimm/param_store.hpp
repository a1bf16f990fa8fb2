#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "bimm/tensor.hpp"

namespace bimm {

// Named parameter collection with stable insertion order. Iteration order is
// the registration order, which fixes checkpoint layout and optimizer update
// order; nothing here iterates an unordered container.
template <class Real>
class ParamStore {
 public:
  Tensor<Real>& add(const std::string& name, Tensor<Real> t) {
    if (index_.count(name)) throw ContractError("ParamStore::add: duplicate name " + name);
    t.set_requires_grad(true);
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<Real>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore::at: unknown parameter " + name);
    return tensors_[it->second];
  }
  const Tensor<Real>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore::at: unknown parameter " + name);
    return tensors_[it->second];
  }

  // Replace the tensor behind a name (used to alias shared storage).
  void rebind(const std::string& name, Tensor<Real> t) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore::rebind: unknown parameter " + name);
    if (t.shape() != tensors_[it->second].shape()) {
      throw ShapeError("ParamStore::rebind: shape mismatch for " + name);
    }
    t.set_requires_grad(true);
    tensors_[it->second] = std::move(t);
  }

  size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor<Real>& tensor(size_t i) { return tensors_[i]; }
  const Tensor<Real>& tensor(size_t i) const { return tensors_[i]; }
  const std::string& name(size_t i) const { return names_[i]; }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  size_t total_params() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  // Deep copy with fresh storage (aliasing is not preserved).
  ParamStore clone() const {
    ParamStore out;
    for (size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].clone());
    return out;
  }

  template <class R2>
  ParamStore<R2> cast() const {
    ParamStore<R2> out;
    for (size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].template cast<R2>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<Tensor<Real>> tensors_;
};

}  // namespace bimm
