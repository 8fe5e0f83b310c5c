#include "stemnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "stemnet/errors.hpp"
#include "stemnet/rng.hpp"

namespace stemnet {

GradCheckReport gradcheck(const std::string& op_name, const std::function<double()>& loss,
                          const std::vector<Tensor<double>*>& inputs,
                          const std::vector<const Tensor<double>*>& analytic, double step,
                          std::int64_t max_entries_per_input, std::uint64_t sample_seed) {
  if (inputs.size() != analytic.size())
    throw ShapeError("gradcheck: inputs and analytic gradients differ in count");
  GradCheckReport report;
  report.op = op_name;
  Rng rng(hash_seed(sample_seed, 0x67726164));

  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor<double>& x = *inputs[t];
    const Tensor<double>& g = *analytic[t];
    require_same_shape(x, g, "gradcheck analytic gradient");

    std::vector<std::int64_t> entries;
    if (max_entries_per_input > 0 && x.numel() > max_entries_per_input) {
      entries.reserve(static_cast<std::size_t>(max_entries_per_input));
      for (std::int64_t i = 0; i < max_entries_per_input; ++i)
        entries.push_back(static_cast<std::int64_t>(rng.uniform_index(
            static_cast<std::uint64_t>(x.numel()))));
      std::sort(entries.begin(), entries.end());
      entries.erase(std::unique(entries.begin(), entries.end()), entries.end());
    } else {
      entries.resize(static_cast<std::size_t>(x.numel()));
      for (std::int64_t i = 0; i < x.numel(); ++i) entries[static_cast<std::size_t>(i)] = i;
    }

    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    for (std::int64_t i : entries) {
      const double saved = x[i];
      x[i] = saved + step;
      const double up = loss();
      x[i] = saved - step;
      const double down = loss();
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = g[i];
      diff_sq += (a - numeric) * (a - numeric);
      a_sq += a * a;
      n_sq += numeric * numeric;
      ++report.entries_checked;
    }
    const double rel = std::sqrt(diff_sq) /
                       std::max({std::sqrt(a_sq), std::sqrt(n_sq), 1e-12});
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  return report;
}

}  // namespace stemnet
