#pragma once

// Dense building blocks on top of the autodiff tape. Modules own their
// parameters by value, so copying a model copies its weights.

#include <cmath>
#include <string>
#include <vector>

#include "treediff/ad.hpp"
#include "treediff/rng.hpp"

namespace treediff::nn {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

enum class Activation { Identity, Relu, LeakyRelu, Silu };

template <typename S>
Var<S> activate(Activation a, const Var<S>& x) {
  switch (a) {
    case Activation::Relu: return ad::relu(x);
    case Activation::LeakyRelu: return ad::leaky_relu(x, S(0.1));
    case Activation::Silu: return ad::silu(x);
    case Activation::Identity: break;
  }
  return x;
}

/// y = x W + b with W (in x out), uniform(-gain/sqrt(in), gain/sqrt(in)) init.
template <typename S>
struct Dense {
  Parameter<S> weight;
  Parameter<S> bias;

  Dense() = default;
  Dense(int in, int out, Rng& rng, double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(in));
    weight.value.resize(in, out);
    for (Eigen::Index j = 0; j < out; ++j)
      for (Eigen::Index i = 0; i < in; ++i) weight.value(i, j) = static_cast<S>((2.0 * rng.uniform() - 1.0) * bound);
    bias.value = Matrix<S>::Zero(1, out);
  }

  int in() const { return static_cast<int>(weight.value.rows()); }
  int out() const { return static_cast<int>(weight.value.cols()); }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) {
    return ad::add_row(ad::matmul(x, t.parameter(weight)), t.parameter(bias));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

/// Stack of Dense layers with an activation between layers (not after the last).
template <typename S>
struct Mlp {
  std::vector<Dense<S>> layers;
  Activation act = Activation::LeakyRelu;

  Mlp() = default;
  Mlp(const std::vector<int>& widths, Activation a, Rng& rng, double last_gain = 1.0) : act(a) {
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
      const bool last = i + 2 == widths.size();
      layers.emplace_back(widths[i], widths[i + 1], rng, last ? last_gain : 1.0);
    }
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](t, x);
      if (i + 1 < layers.size()) x = activate(act, x);
    }
    return x;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + "." + std::to_string(i), f);
  }
};

/// x + W2 act(W1 x)
template <typename S>
struct ResidualBlock {
  Dense<S> inner;
  Dense<S> outer;
  Activation act = Activation::LeakyRelu;

  ResidualBlock() = default;
  ResidualBlock(int width, int hidden, Activation a, Rng& rng)
      : inner(width, hidden, rng), outer(hidden, width, rng, 0.5), act(a) {}

  Var<S> operator()(Tape<S>& t, const Var<S>& x) { return x + outer(t, activate(act, inner(t, x))); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    inner.visit(prefix + ".inner", f);
    outer.visit(prefix + ".outer", f);
  }
};

}  // namespace treediff::nn
