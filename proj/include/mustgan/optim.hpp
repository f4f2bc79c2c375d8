#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/nn.hpp"

namespace mustgan {

enum class Schedule { constant_then_linear, constant };

inline const char* to_string(Schedule s) { return s == Schedule::constant ? "constant" : "constant_then_linear"; }

inline Schedule schedule_from_string(const std::string& s) {
  if (s == "constant_then_linear") return Schedule::constant_then_linear;
  if (s == "constant") return Schedule::constant;
  throw std::invalid_argument("unknown schedule '" + s + "' (constant_then_linear | constant)");
}

/// Learning rate for a 1-based epoch: constant through `cutover` (or through every epoch when
/// the run is no longer than that), then linear to zero at the final epoch.
inline double lr_at_epoch(double lr, Schedule schedule, std::size_t cutover, std::size_t total, std::size_t epoch) {
  if (epoch < 1 || epoch > total)
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside 1.." + std::to_string(total));
  if (schedule == Schedule::constant || total <= cutover || epoch <= cutover) return lr;
  return lr * static_cast<double>(total - epoch) / static_cast<double>(total - cutover);
}

/// Bias-corrected Adam over named parameter groups. Each group scales the step's base learning
/// rate by its ratio. Moments are keyed by parameter key so state can move between model copies.
template <class T>
class Adam {
 public:
  struct Group {
    std::string name;
    double lr_ratio = 1.0;
    ParameterList<T> params;
  };
  struct Moments {
    Tensor<T> m, v;
  };

  explicit Adam(double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }

  void add_group(std::string name, ParameterList<T> params, double lr_ratio = 1.0) {
    for (const auto& p : params) {
      if (moments_.count(p.key)) throw std::invalid_argument("parameter " + p.key + " is already in an optimizer group");
      moments_[p.key] = Moments{Tensor<T>(p.tensor.shape()), Tensor<T>(p.tensor.shape())};
    }
    groups_.push_back(Group{std::move(name), lr_ratio, std::move(params)});
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.tensor.clear_grad();
  }

  /// One update of every parameter; a parameter without a gradient is an error.
  void step(double base_lr) {
    for (const auto& g : groups_)
      for (const auto& p : g.params)
        if (!p.tensor.has_grad()) throw AutodiffError("Adam step: parameter " + p.key + " has no gradient");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& g : groups_) {
      const double lr = base_lr * g.lr_ratio;
      for (auto& p : g.params) {
        auto& mom = moments_.at(p.key);
        auto w = p.tensor.mutable_values();
        auto grad = p.tensor.grad();
        auto m = mom.m.mutable_values();
        auto v = mom.v.mutable_values();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = grad[i];
          const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
          const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
          m[i] = static_cast<T>(mi);
          v[i] = static_cast<T>(vi);
          w[i] = static_cast<T>(w[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
        }
      }
    }
  }

  double group_lr(const std::string& name, double base_lr) const { return base_lr * group(name).lr_ratio; }
  const Group& group(const std::string& name) const {
    for (const auto& g : groups_)
      if (g.name == name) return g;
    throw std::out_of_range("no optimizer group named " + name);
  }
  const std::vector<Group>& groups() const { return groups_; }

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  /// Copies step count and moments (by key) from another optimizer over an identically keyed model.
  void copy_state_from(const Adam& other) {
    for (auto& [key, mom] : moments_) {
      auto it = other.moments_.find(key);
      if (it == other.moments_.end()) throw std::invalid_argument("optimizer state has no entry for " + key);
      mom.m = it->second.m.clone();
      mom.v = it->second.v.clone();
    }
    t_ = other.t_;
  }

  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Group> groups_;
  std::map<std::string, Moments> moments_;
};

}  // namespace mustgan
