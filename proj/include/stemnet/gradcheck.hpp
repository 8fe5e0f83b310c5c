#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stemnet/tensor.hpp"

namespace stemnet {

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::int64_t entries_checked = 0;

  bool pass(double tol) const { return max_rel_error <= tol; }
};

// Central finite differences against an analytic gradient, 64-bit only.
// `loss` must recompute the scalar objective from the current contents of
// `inputs`; it is the forward path alone, so the check is independent of the
// backward implementation it validates. The relative error per input tensor
// is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12) with |.| the
// Euclidean norm over the checked entries; max_rel_error is the worst tensor.
// max_entries_per_input = 0 checks every entry; > 0 checks a seeded sample.
GradCheckReport gradcheck(const std::string& op_name, const std::function<double()>& loss,
                          const std::vector<Tensor<double>*>& inputs,
                          const std::vector<const Tensor<double>*>& analytic, double step = 1e-5,
                          std::int64_t max_entries_per_input = 0, std::uint64_t sample_seed = 0);

}  // namespace stemnet
