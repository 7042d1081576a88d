#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "treediff/ad.hpp"

namespace treediff::testing {

struct GradReport {
  double max_rel_error = 0;
  std::string worst;
  size_t checked = 0;
};

/// Compares tape gradients with central differences for every entry of every
/// parameter. `loss` must be deterministic and build its graph on the given
/// tape. Relative error is |a - n| / max(|a|, |n|, floor).
template <typename Model>
GradReport check_gradients(Model& model, const std::function<ad::Var<double>(ad::Tape<double>&)>& loss,
                           double h = 1e-5, double floor = 1e-4) {
  model.visit([](const std::string&, ad::Parameter<double>& p) { p.grad.resize(0, 0); });
  {
    ad::Tape<double> t;
    t.backward(loss(t));
  }
  GradReport rep;
  model.visit([&](const std::string& name, ad::Parameter<double>& p) {
    const ad::Matrix<double> analytic =
        p.grad.size() == 0 ? ad::Matrix<double>::Zero(p.value.rows(), p.value.cols()) : p.grad;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double keep = p.value(i);
      p.value(i) = keep + h;
      ad::Tape<double> tp(false);
      const double fp = loss(tp).value()(0, 0);
      p.value(i) = keep - h;
      ad::Tape<double> tm(false);
      const double fm = loss(tm).value()(0, 0);
      p.value(i) = keep;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic(i);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
      ++rep.checked;
    }
  });
  return rep;
}

}  // namespace treediff::testing
