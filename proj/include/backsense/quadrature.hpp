#pragma once

#include <Eigen/Dense>

namespace backsense::quad {

struct Rule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

// Gauss-Legendre rule with k points on [a, b]; nodes strictly inside the
// interval, weights summing to b - a.
Rule gauss_legendre(int k, double a, double b);

}  // namespace backsense::quad
