#include "fmbff/gradcheck.hpp"

#include <cmath>
#include <random>

#include "fmbff/ops.hpp"

namespace fmbff {

namespace {

template <typename T>
double eval_scalar(const ScalarFn<T>& f) {
  Tensor<T> out = f();
  if (!out.defined() || out.numel() != 1) {
    throw UsageError("finite_diff_check: function must return a scalar tensor");
  }
  return static_cast<double>(out.item());
}

}  // namespace

template <typename T>
std::vector<GradCheckResult> finite_diff_check_all(
    const ScalarFn<T>& f, const std::vector<std::pair<std::string, Tensor<T>>>& leaves, double h,
    std::int64_t max_elements) {
  for (const auto& [name, leaf] : leaves) {
    if (!leaf.is_leaf() || !leaf.requires_grad()) {
      throw UsageError("finite_diff_check: '" + name + "' must be a gradient-tracked leaf");
    }
  }
  const double first = eval_scalar(f);
  const double second = eval_scalar(f);
  if (first != second) {
    throw UsageError("finite_diff_check: function is not deterministic");
  }

  for (const auto& [name, leaf] : leaves) Tensor<T>(leaf).clear_grad();
  {
    Tensor<T> loss = f();
    if (!loss.is_leaf()) backward(loss);
  }
  std::vector<std::vector<T>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& [name, leaf] : leaves) {
    analytic.emplace_back(static_cast<std::size_t>(leaf.numel()), T{0});
    if (leaf.has_grad()) {
      std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.back().begin());
    }
  }

  std::vector<GradCheckResult> results;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    GradCheckResult r;
    r.name = leaves[li].first;
    Tensor<T> leaf = leaves[li].second;
    auto data = leaf.mutable_data();
    const std::int64_t n = leaf.numel();
    const std::int64_t stride = (max_elements > 0 && n > max_elements)
                                    ? (n + max_elements - 1) / max_elements
                                    : 1;
    for (std::int64_t i = 0; i < n; i += stride) {
      const T saved = data[i];
      data[i] = static_cast<T>(saved + h);
      const double up = eval_scalar(f);
      data[i] = static_cast<T>(saved - h);
      const double down = eval_scalar(f);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[li][i];
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      if (r.worst_index < 0 || err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_index = i;
        r.analytic = a;
        r.numeric = numeric;
      }
    }
    results.push_back(r);
  }
  for (const auto& [name, leaf] : leaves) Tensor<T>(leaf).clear_grad();
  return results;
}

template <typename T>
GradCheckResult finite_diff_check(const ScalarFn<T>& f, Tensor<T> x, double h,
                                  std::int64_t max_elements) {
  return finite_diff_check_all<T>(f, {{"x", x}}, h, max_elements).front();
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> gradcheck_leaves(
    const ParamStore<T>& store, const std::vector<std::pair<std::string, Tensor<T>>>& inputs) {
  std::vector<std::pair<std::string, Tensor<T>>> out(inputs);
  for (const auto& e : store.entries())
    if (e.trainable) out.emplace_back(e.name, e.value);
  return out;
}

template <typename T>
void perturb_params(ParamStore<T>& store, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    Tensor<T> t = e.value;
    for (T& v : t.mutable_data()) v += static_cast<T>(scale * (2.0 * uniform01(rng) - 1.0));
  }
}

template void perturb_params(ParamStore<float>&, std::uint64_t, double);
template void perturb_params(ParamStore<double>&, std::uint64_t, double);
template GradCheckResult finite_diff_check(const ScalarFn<float>&, Tensor<float>, double,
                                           std::int64_t);
template GradCheckResult finite_diff_check(const ScalarFn<double>&, Tensor<double>, double,
                                           std::int64_t);
template std::vector<GradCheckResult> finite_diff_check_all(
    const ScalarFn<float>&, const std::vector<std::pair<std::string, Tensor<float>>>&, double,
    std::int64_t);
template std::vector<GradCheckResult> finite_diff_check_all(
    const ScalarFn<double>&, const std::vector<std::pair<std::string, Tensor<double>>>&, double,
    std::int64_t);
template std::vector<std::pair<std::string, Tensor<float>>> gradcheck_leaves(
    const ParamStore<float>&, const std::vector<std::pair<std::string, Tensor<float>>>&);
template std::vector<std::pair<std::string, Tensor<double>>> gradcheck_leaves(
    const ParamStore<double>&, const std::vector<std::pair<std::string, Tensor<double>>>&);

}  // namespace fmbff
