#pragma once

// Test-only oracles, kept independent of the library implementation paths
// they are used to check.

#include "longtail/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace oracle {

using longtail::Matrix;
using longtail::Vector;

// Max relative error between analytic gradients and central finite
// differences of `eval` (which recomputes the loss from current parameter
// values, in-place perturbations included).
inline double fd_max_rel_err(const std::vector<Matrix*>& params,
                             const std::vector<Matrix>& analytic,
                             const std::function<double()>& eval,
                             double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Matrix& p = *params[pi];
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.cols(); ++j) {
        const double orig = p(i, j);
        p(i, j) = orig + h;
        const double fp = eval();
        p(i, j) = orig - h;
        const double fm = eval();
        p(i, j) = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double a = analytic[pi](i, j);
        const double denom = std::max({std::abs(a), std::abs(fd), 1e-4});
        worst = std::max(worst, std::abs(a - fd) / denom);
      }
    }
  }
  return worst;
}

// O(n^2) pairwise concordance AUC with ties counted 1/2.
inline double pairwise_auc(const Vector& scores, const Vector& labels) {
  double num = 0.0;
  long pairs = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (labels(i) != 1.0) continue;
    for (Eigen::Index j = 0; j < scores.size(); ++j) {
      if (labels(j) != 0.0) continue;
      ++pairs;
      if (scores(i) > scores(j))
        num += 1.0;
      else if (scores(i) == scores(j))
        num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

}  // namespace oracle
