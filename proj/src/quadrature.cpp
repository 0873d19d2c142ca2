#include "backsense/quadrature.hpp"

#include <cmath>
#include <stdexcept>

#include "backsense/math.hpp"

namespace backsense::quad {

Rule gauss_legendre(int k, double a, double b) {
  if (k < 1) throw std::invalid_argument("gauss_legendre: need at least one node");
  if (!(a < b)) throw std::invalid_argument("gauss_legendre: empty interval");

  Rule rule;
  rule.nodes.resize(k);
  rule.weights.resize(k);

  // Newton iteration on P_k with the Chebyshev-like initial guess; converges
  // to machine precision in a handful of steps.
  const int half = (k + 1) / 2;
  for (int i = 0; i < half; ++i) {
    double x = std::cos(kPi * (i + 0.75) / (k + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int j = 2; j <= k; ++j) {
        const double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      pp = k * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / pp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    const double w = 2.0 / ((1.0 - x * x) * pp * pp);
    rule.nodes[i] = -x;
    rule.nodes[k - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[k - 1 - i] = w;
  }

  const double mid = 0.5 * (a + b);
  const double hw = 0.5 * (b - a);
  for (int i = 0; i < k; ++i) {
    rule.nodes[i] = mid + hw * rule.nodes[i];
    rule.weights[i] *= hw;
  }
  return rule;
}

}  // namespace backsense::quad
