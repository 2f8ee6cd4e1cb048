#pragma once

// Adam, global-norm gradient clipping and the staged learning-rate schedule.

#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stseg/param_store.hpp"

namespace stseg {

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

template <Real T>
struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor<T>> m, v;  // one per ParamStore entry; empty for buffers
  std::int64_t t = 0;

  AdamState() = default;
  explicit AdamState(const ParamStore<T>& s, AdamConfig c = {}) : cfg(c) {
    for (const auto& e : s.entries()) {
      m.emplace_back(e.trainable ? Tensor<T>(e.var.shape(), T{0}) : Tensor<T>());
      v.emplace_back(e.trainable ? Tensor<T>(e.var.shape(), T{0}) : Tensor<T>());
    }
  }
};

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient.
template <Real T>
void adam_step(ParamStore<T>& s, AdamState<T>& st, double lr) {
  if (st.m.size() != s.size()) throw ConfigError("adam_step: optimizer state does not match the parameter store");
  for (const auto& e : s.entries()) {
    if (!e.trainable) continue;
    for (T g : e.var.grad().storage())
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + e.name);
  }
  ++st.t;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(st.t)), c2 = 1 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < s.size(); ++k) {
    auto& e = s.entries()[k];
    if (!e.trainable) continue;
    const auto& g = e.var.grad();
    auto& theta = e.var.mutable_value();
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1 - b1) * gi;
      const double vi = b2 * v[i] + (1 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      theta[i] = static_cast<T>(theta[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + st.cfg.epsilon));
    }
  }
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// max_norm. Returns the norm before clipping.
template <Real T>
double clip_grad_norm(ParamStore<T>& s, double max_norm) {
  double sq = 0;
  for (const auto& e : s.entries())
    if (e.trainable)
      for (T g : e.var.grad().storage()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& e : s.entries())
      if (e.trainable)
        for (T& g : e.var.mutable_grad().storage()) g *= f;
  }
  return norm;
}

/// Piecewise-constant schedule of (epochs, lr) stages.
class LrSchedule {
 public:
  LrSchedule() : stages_{{10, 0.1}, {10, 0.01}, {10, 0.001}} {}
  explicit LrSchedule(std::vector<std::pair<int, double>> stages) : stages_(std::move(stages)) { validate(); }

  /// "10:0.1,10:0.01,10:0.001"
  static LrSchedule parse(const std::string& text) {
    std::vector<std::pair<int, double>> st;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("schedule entry '" + item + "' is not epochs:lr");
      try {
        std::size_t used = 0;
        const int epochs = std::stoi(item.substr(0, colon), &used);
        if (used != colon) throw std::invalid_argument(item);
        const auto lr_text = item.substr(colon + 1);
        const double lr = std::stod(lr_text, &used);
        if (used != lr_text.size()) throw std::invalid_argument(item);
        st.emplace_back(epochs, lr);
      } catch (const std::logic_error&) {
        throw ConfigError("schedule entry '" + item + "' is not epochs:lr");
      }
    }
    if (st.empty()) throw ConfigError("empty learning-rate schedule");
    return LrSchedule(std::move(st));
  }

  std::string str() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < stages_.size(); ++i) os << (i ? "," : "") << stages_[i].first << ':' << stages_[i].second;
    return os.str();
  }

  int total_epochs() const {
    int n = 0;
    for (const auto& s : stages_) n += s.first;
    return n;
  }

  /// Learning rate for 1-based epoch e.
  double lr(int epoch) const {
    if (epoch < 1 || epoch > total_epochs()) throw ConfigError("epoch " + std::to_string(epoch) + " outside the schedule");
    for (const auto& [n, lr] : stages_) {
      if (epoch <= n) return lr;
      epoch -= n;
    }
    return stages_.back().second;
  }

  const std::vector<std::pair<int, double>>& stages() const { return stages_; }

 private:
  void validate() const {
    if (stages_.empty()) throw ConfigError("empty learning-rate schedule");
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      if (stages_[i].first <= 0) throw ConfigError("schedule epochs must be positive");
      if (!(stages_[i].second > 0)) throw ConfigError("schedule learning rates must be positive");
      if (i && stages_[i].second > stages_[i - 1].second) throw ConfigError("schedule learning rates must not increase");
    }
  }

  std::vector<std::pair<int, double>> stages_;
};

}  // namespace stseg
