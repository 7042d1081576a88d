#pragma once

#include <cmath>
#include <cstdint>
#include <type_traits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "treediff/ad.hpp"

namespace treediff {

/// Adam with L2 weight decay folded into the gradient. Moment estimates are
/// keyed by parameter name, so structural edits keep the state of surviving
/// parameters; frozen parameters are skipped.
template <typename S>
class Adam {
 public:
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  Adam() = default;
  Adam(double lr_, double weight_decay_) : lr(lr_), weight_decay(weight_decay_) {}

  template <typename Model>
  void step(Model& model) {
    ++t_;
    const S c1 = static_cast<S>(1.0 - std::pow(beta1, t_));
    const S c2 = static_cast<S>(1.0 - std::pow(beta2, t_));
    model.visit([&](const std::string& name, ad::Parameter<S>& p) {
      if (p.frozen || p.grad.size() == 0) return;
      ad::Matrix<S> g = p.grad;
      if (weight_decay != 0.0) g += static_cast<S>(weight_decay) * p.value;
      auto [it, fresh] = state_.try_emplace(name);
      if (fresh || it->second.first.rows() != g.rows() || it->second.first.cols() != g.cols()) {
        it->second = {ad::Matrix<S>::Zero(g.rows(), g.cols()), ad::Matrix<S>::Zero(g.rows(), g.cols())};
      }
      auto& [m, v] = it->second;
      m = static_cast<S>(beta1) * m + static_cast<S>(1.0 - beta1) * g;
      v = static_cast<S>(beta2) * v + static_cast<S>(1.0 - beta2) * g.cwiseAbs2();
      p.value.array() -= static_cast<S>(lr) * (m.array() / c1) / ((v.array() / c2).sqrt() + static_cast<S>(eps));
    });
  }

  void reset() {
    state_.clear();
    t_ = 0;
  }

  long steps() const { return t_; }

 private:
  std::map<std::string, std::pair<ad::Matrix<S>, ad::Matrix<S>>> state_;
  long t_ = 0;
};

template <typename Model>
void zero_grad(Model& model) {
  model.visit([](const std::string&, auto& p) { p.grad.resize(0, 0); });
}

/// Global L2 norm over all non-frozen gradients.
template <typename Model>
double global_grad_norm(Model& model) {
  double sq = 0;
  model.visit([&](const std::string&, auto& p) {
    if (!p.frozen && p.grad.size() > 0) sq += static_cast<double>(p.grad.squaredNorm());
  });
  return std::sqrt(sq);
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
template <typename Model>
double clip_grad_norm(Model& model, double max_norm) {
  const double norm = global_grad_norm(model);
  if (norm > max_norm && norm > 0) {
    const double f = max_norm / norm;
    model.visit([&](const std::string&, auto& p) {
      if (p.grad.size() > 0) p.grad *= static_cast<typename std::decay_t<decltype(p.grad)>::Scalar>(f);
    });
  }
  return norm;
}

/// FNV-1a over names and raw bytes of parameters selected by `pred`.
template <typename Model, typename Pred>
std::uint64_t parameter_fingerprint(Model& model, Pred&& pred) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  model.visit([&](const std::string& name, auto& p) {
    if (!pred(name, p)) return;
    mix(name.data(), name.size());
    mix(p.value.data(), sizeof(typename std::decay_t<decltype(p.value)>::Scalar) * static_cast<size_t>(p.value.size()));
  });
  return h;
}

}  // namespace treediff
