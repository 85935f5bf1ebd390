#pragma once

#include <functional>
#include <vector>

#include "mmim/tensor.hpp"

namespace mmim {

struct FdCheckOptions {
  double step = 1e-5;
  /// 0 checks every coordinate; otherwise check at most this many per
  /// parameter, sampled deterministically.
  size_t max_coords_per_param = 0;
  uint64_t sample_seed = 12345;
};

/// Compares analytic gradients against central finite differences.
///
/// `f` must rebuild the scalar loss from the current parameter values on
/// every call and must be deterministic; nondeterminism is detected by
/// evaluating twice and throwing if the two values differ. Returns the
/// maximum over checked coordinates of
///   |analytic - central_difference| / max(|analytic|, |cd|, 1e-12).
double fd_check(const std::function<Tensor()>& f, std::vector<Tensor> params, const FdCheckOptions& opts = {});

}  // namespace mmim
