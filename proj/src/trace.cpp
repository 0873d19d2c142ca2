#include "backsense/trace.hpp"

#include <cstdio>
#include <ostream>

namespace backsense {

void EmTrace::serialize(std::ostream& out) const {
  out << "# iteration loglik theta sigma_h2 sigma_w2\n";
  char buf[64];
  for (const auto& rec : records) {
    out << rec.iteration << ' ';
    std::snprintf(buf, sizeof(buf), "%.12g", rec.loglik);
    out << buf << ' ';
    for (Eigen::Index k = 0; k < rec.theta.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.12g", rec.theta[k]);
      out << (k ? ";" : "") << buf;
    }
    std::snprintf(buf, sizeof(buf), " %.12g", rec.sigma_h2);
    out << buf;
    std::snprintf(buf, sizeof(buf), " %.12g", rec.sigma_w2);
    out << buf << '\n';
  }
}

}  // namespace backsense
