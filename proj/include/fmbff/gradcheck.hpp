#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fmbff/param_store.hpp"
#include "fmbff/tensor.hpp"

namespace fmbff {

// Scalar-valued function of whatever leaves it closes over.
template <typename T>
using ScalarFn = std::function<Tensor<T>()>;

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

// Compares the analytic gradient of f w.r.t. leaf `x` with central
// differences. Error per element is
//   |a - n| / (|a| + |n| + 1e-12),  n = (f(x + h e) - f(x - h e)) / (2h)
// and the maximum over checked elements is returned. `max_elements` > 0
// checks an evenly strided subset. Throws UsageError when f is not
// deterministic or not scalar.
template <typename T>
GradCheckResult finite_diff_check(const ScalarFn<T>& f, Tensor<T> x, double h = 1e-5,
                                  std::int64_t max_elements = 0);

// Runs finite_diff_check for each tensor in `leaves` against one analytic
// backward pass.
template <typename T>
std::vector<GradCheckResult> finite_diff_check_all(
    const ScalarFn<T>& f, const std::vector<std::pair<std::string, Tensor<T>>>& leaves,
    double h = 1e-5, std::int64_t max_elements = 0);

// Convenience: every trainable entry of `store` plus any extra inputs.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> gradcheck_leaves(
    const ParamStore<T>& store, const std::vector<std::pair<std::string, Tensor<T>>>& inputs = {});

// Adds U(-scale, scale) noise to every trainable entry, moving the check
// point off exact zeros (ReLU kinks, max-pool ties) left by initialization.
template <typename T>
void perturb_params(ParamStore<T>& store, std::uint64_t seed, double scale);

}  // namespace fmbff
