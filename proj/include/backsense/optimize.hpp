#pragma once

#include <cmath>
#include <functional>

namespace backsense::opt {

// Golden-section maximization of a unimodal f on [lo, hi]; returns the
// abscissa of the maximum to within xtol.
inline double golden_section_max(const std::function<double(double)>& f, double lo, double hi,
                                 double xtol, int max_iter = 200) {
  constexpr double kInvPhi = 0.6180339887498948482;
  double a = lo, b = hi;
  double x1 = b - kInvPhi * (b - a);
  double x2 = a + kInvPhi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < max_iter && (b - a) > xtol; ++it) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + kInvPhi * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - kInvPhi * (b - a);
      f1 = f(x1);
    }
  }
  return 0.5 * (a + b);
}

// Bisection root of g on [lo, hi]; requires a sign change on the bracket.
// Returns the midpoint of the final bracket; NaN if the bracket is invalid.
inline double bisect_root(const std::function<double(double)>& g, double lo, double hi,
                          double xtol, int max_iter = 200) {
  double glo = g(lo), ghi = g(hi);
  if (glo == 0.0) return lo;
  if (ghi == 0.0) return hi;
  if ((glo > 0.0) == (ghi > 0.0)) return std::nan("");
  for (int it = 0; it < max_iter && (hi - lo) > xtol; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double gm = g(mid);
    if (gm == 0.0) return mid;
    if ((gm > 0.0) == (glo > 0.0)) {
      lo = mid;
      glo = gm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace backsense::opt
