#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "vpnet/error.hpp"
#include "vpnet/tensor.hpp"

namespace vpnet {

/// A learnable tensor plus its adaptive-moment state. The gradient lives in
/// value.grad().
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  std::uint64_t step = 0;

  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)),
        value(std::move(v)),
        first_moment(value.size(), T{0}),
        second_moment(value.size(), T{0}) {}
};

/// Ordered, name-unique collection. Storage is a deque so references handed
/// out by add() stay valid as more parameters are registered.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value) {
    for (const auto& p : params_) {
      if (p.name == name) throw UsageError("duplicate parameter name: " + name);
    }
    params_.emplace_back(std::move(name), std::move(value));
    return params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw UsageError("unknown parameter: " + name);
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Allocates (or clears) every gradient buffer.
  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::deque<Parameter<T>> params_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected adaptive-moment update of every parameter, then clears
/// the gradients.
template <typename T>
void optimizer_step(ParameterSet<T>& params, double lr, const AdamOptions& opt = {}) {
  if (!(lr > 0.0)) throw UsageError("optimizer: learning rate must be positive");
  for (auto& p : params) {
    if (!p.value.has_grad()) throw Error("optimizer: parameter '" + p.name + "' has no gradient");
  }
  for (auto& p : params) {
    ++p.step;
    const double t = static_cast<double>(p.step);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    auto g = p.value.grad();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = opt.beta1 * static_cast<double>(p.first_moment[i]) + (1.0 - opt.beta1) * gi;
      const double v = opt.beta2 * static_cast<double>(p.second_moment[i]) + (1.0 - opt.beta2) * gi * gi;
      p.first_moment[i] = static_cast<T>(m);
      p.second_moment[i] = static_cast<T>(v);
      const double update = lr * (m / c1) / (std::sqrt(v / c2) + opt.epsilon);
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
    }
    p.value.zero_grad();
  }
}

}  // namespace vpnet
