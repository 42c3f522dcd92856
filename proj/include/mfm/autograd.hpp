#pragma once

#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mfm/tensor.hpp"

namespace mfm {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Named parameters, iterated in lexicographic name order.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    auto [it, inserted] = params_.try_emplace(name, name, std::move(value));
    if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
    return it->second;
  }

  Parameter<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }
  std::size_t size() const { return params_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : params_) out.push_back(n);
    return out;
  }

  /// Moves every parameter of `other` into this set; names must not collide.
  void merge(ParameterSet&& other) {
    for (auto& [n, p] : other.params_) add(n, std::move(p.value));
    other.params_.clear();
  }

  /// FNV-1a over names and value bytes; used to assert frozen sets stay frozen.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [n, p] : params_) {
      mix(n.data(), n.size());
      mix(p.value.raw(), p.value.size() * sizeof(T));
    }
    return h;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [n, p] : params_) out.add(n, p.value.template cast<U>());
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool operator==(const ParameterSet& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (const auto& [n, p] : params_) {
      auto it = o.params_.find(n);
      if (it == o.params_.end() || !(it->second.value == p.value)) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

/// Records forward values and their backward closures; `backward` walks the
/// records once in reverse and flushes leaf gradients into their Parameters.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, {}); }

  Var<T> param(Parameter<T>& p) { return push(p.value, true, &p, {}); }

  /// Binds a parameter either as a differentiable leaf or as a constant.
  Var<T> bind(Parameter<T>& p, bool trainable) { return trainable ? param(p) : constant(p.value); }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn, const char* op) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn), op);
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn, const char* op) {
    require_finite(value, op);
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id); }

  /// Gradient buffer of a node, zero-initialized on first access.
  Tensor<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("loss was not recorded on this tape");
    if (consumed_) throw std::logic_error("backward already replayed on this tape; re-record before calling again");
    if (value(loss.id).size() != 1)
      throw DimensionError("backward needs a scalar loss, got shape " + to_string(value(loss.id).shape()));
    consumed_ = true;
    grad(loss.id).fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* p, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, p, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Map from parameter name to its tape handle for one forward pass. A frozen
/// binding records every parameter as a constant.
template <typename T>
class Bound {
 public:
  Bound(Tape<T>& tape, ParameterSet<T>& params, bool trainable)
      : tape_(&tape), params_(trainable ? &params : nullptr), frozen_(&params) {}
  Bound(Tape<T>& tape, const ParameterSet<T>& params) : tape_(&tape), params_(nullptr), frozen_(&params) {}

  Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    auto v = params_ ? tape_->param(params_->get(name)) : tape_->constant(frozen_->get(name).value);
    vars_.emplace(name, v);
    return v;
  }

  const Tensor<T>& value(const std::string& name) const { return frozen_->get(name).value; }
  bool contains(const std::string& name) const { return frozen_->contains(name); }
  bool trainable() const { return params_ != nullptr; }
  Tape<T>& tape() { return *tape_; }

 private:
  Tape<T>* tape_;
  ParameterSet<T>* params_;
  const ParameterSet<T>* frozen_;
  std::map<std::string, Var<T>> vars_;
};

}  // namespace mfm
