#pragma once

#include <functional>

#include "dnpo/model.hpp"
#include "support/finite_diff.hpp"

namespace dnpo::testing {

// Central finite differences of scalar(params) w.r.t. every model entry.
inline ModelParams fd_param_grad(const std::function<double(const ModelParams&)>& f,
                                 const ModelParams& at, double h = 1e-5) {
  ModelParams x = at;
  ModelParams g = zeros_like(at);
  auto xe = x.entries();
  auto ge = g.entries();
  for (size_t e = 0; e < xe.size(); ++e) {
    Mat* xm = xe[e].second;
    Mat* gm = ge[e].second;
    for (size_t i = 0; i < xm->size(); ++i) {
      double orig = xm->data[i];
      xm->data[i] = orig + h;
      double fp = f(x);
      xm->data[i] = orig - h;
      double fm = f(x);
      xm->data[i] = orig;
      gm->data[i] = (fp - fm) / (2.0 * h);
    }
  }
  return g;
}

// Worst relative error between analytic and numeric model gradients.
inline double max_param_rel_err(const ModelParams& analytic, const ModelParams& numeric) {
  double worst = 0.0;
  auto ae = analytic.entries();
  auto ne = numeric.entries();
  for (size_t e = 0; e < ae.size(); ++e)
    worst = std::max(worst, max_rel_err(*ae[e].second, *ne[e].second));
  return worst;
}

}  // namespace dnpo::testing
