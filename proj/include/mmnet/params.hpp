#pragma once

#include "mmnet/autodiff.hpp"

#include <map>
#include <random>

namespace mmnet {

/// Named parameters, iterated in name order. Addresses are stable across insertions.
template <typename Scalar>
class ParameterSet {
 public:
  using Param = ad::Parameter<Scalar>;

  Param& add(const std::string& name, Shape shape) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("duplicate parameter " + name);
    it->second.name = name;
    it->second.value = Tensor<Scalar>(std::move(shape));
    return it->second;
  }

  Param& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.shape()).value = p.value.template cast<Other>();
    return out;
  }

 private:
  std::map<std::string, Param> params_;
};

/// Binds a parameter set onto a tape, creating at most one leaf per parameter. With
/// `trainable == false` parameters enter as constants and no gradients are recorded.
template <typename Scalar>
class Binder {
 public:
  Binder(ad::Tape<Scalar>& tape, ParameterSet<Scalar>& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable) {}

  ad::Var<Scalar> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto& p = params_.at(name);
    ad::Var<Scalar> v = trainable_ ? tape_.parameter(p) : tape_.constant(p.value);
    bound_.emplace(name, v);
    return v;
  }

  ad::Tape<Scalar>& tape() { return tape_; }

 private:
  ad::Tape<Scalar>& tape_;
  ParameterSet<Scalar>& params_;
  bool trainable_;
  std::map<std::string, ad::Var<Scalar>> bound_;
};

/// Fan-in scaled uniform fill: U(-sqrt(6/fan_in), sqrt(6/fan_in)), fan_in = dim(1) * k * k.
template <typename Scalar>
void fill_fan_in_uniform(Tensor<Scalar>& weight, std::mt19937_64& rng) {
  Index fan_in = 1;
  for (Index d = 1; d < weight.rank(); ++d) fan_in *= weight.dim(d);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < weight.size(); ++i) {
    // 53 random bits -> [0,1); avoids implementation-defined distribution objects
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    weight[i] = static_cast<Scalar>((2.0 * u - 1.0) * bound);
  }
}

}  // namespace mmnet
