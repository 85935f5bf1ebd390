#include "mmim/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mmim/rng.hpp"

namespace mmim {

double fd_check(const std::function<Tensor()>& f, std::vector<Tensor> params, const FdCheckOptions& opts) {
  if (opts.step <= 0.0) throw std::invalid_argument("fd_check: step must be positive");

  const double v1 = f().item();
  const double v2 = f().item();
  if (v1 != v2) throw std::runtime_error("fd_check: function is not deterministic");

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  backward(f());

  Rng rng(opts.sample_seed);
  double worst = 0.0;
  for (auto& p : params) {
    const size_t n = p.size();
    std::vector<size_t> coords;
    if (opts.max_coords_per_param == 0 || n <= opts.max_coords_per_param) {
      coords.resize(n);
      for (size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      coords.reserve(opts.max_coords_per_param);
      for (size_t i = 0; i < opts.max_coords_per_param; ++i) coords.push_back(rng.below(n));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (size_t c : coords) {
      const double saved = p.data()[c];
      double fp, fm;
      {
        NoGradGuard ng;
        p.data()[c] = saved + opts.step;
        fp = f().item();
        p.data()[c] = saved - opts.step;
        fm = f().item();
        p.data()[c] = saved;
      }
      const double cd = (fp - fm) / (2.0 * opts.step);
      const double an = p.grad()[c];
      const double rel = std::abs(an - cd) / std::max({std::abs(an), std::abs(cd), 1e-12});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace mmim
