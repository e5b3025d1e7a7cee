#pragma once

#include "qgc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace qgc::testutil {

struct FdReport {
  double max_rel_err = 0.0;
  long components = 0;
};

inline double rel_err(double analytic, double fd) {
  double scale = std::max({std::abs(analytic), std::abs(fd), 1e-6});
  return std::abs(analytic - fd) / scale;
}

// Central finite differences against tape gradients for every component of
// every tensor in `params`. `make_loss` must rebuild the graph from current
// parameter values and return a scalar.
inline FdReport fd_check(const std::function<qgc::Tensor()>& make_loss,
                         const std::vector<qgc::Tensor>& params, double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    qgc::Tape tape;
    qgc::Tensor loss = make_loss();
    tape.backward(loss);
    for (const auto& p : params)
      analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.data().size(), 0.0));
  }
  for (auto p : params) p.zero_grad();

  FdReport report;
  qgc::NoTape guard;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    qgc::Tensor p = params[pi];
    for (size_t i = 0; i < p.data().size(); ++i) {
      double saved = p.data()[i];
      double step = h * std::max(1.0, std::abs(saved));
      p.data()[i] = saved + step;
      double up = make_loss().value();
      p.data()[i] = saved - step;
      double down = make_loss().value();
      p.data()[i] = saved;
      double fd = (up - down) / (2.0 * step);
      report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[pi][i], fd));
      ++report.components;
    }
  }
  return report;
}

}  // namespace qgc::testutil
