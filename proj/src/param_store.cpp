#include "fmbff/param_store.hpp"

#include <algorithm>
#include <cmath>

#include "fmbff/ops.hpp"

namespace fmbff {

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::insert(const std::string& name, Tensor<T> value,
                                                     bool trainable) {
  if (contains(name)) {
    throw ConfigError("parameter name '" + name + "' registered twice");
  }
  value.set_requires_grad(trainable);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, std::move(value), trainable});
  return entries_.back();
}

template <typename T>
Tensor<T> ParamStore<T>::add(const std::string& name, Shape shape, Init init) {
  Tensor<T> t(shape, T{0});
  auto d = t.mutable_data();
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(d.begin(), d.end(), T{1});
      break;
    case Init::fan_in_uniform: {
      const Index fan_in = std::max<Index>(1, t.numel() / shape[0]);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (T& v : d) v = static_cast<T>((2.0 * uniform01(rng_) - 1.0) * bound);
      break;
    }
  }
  return insert(name, std::move(t), true).value;
}

template <typename T>
Tensor<T> ParamStore<T>::add_buffer(const std::string& name, Shape shape, T fill) {
  return insert(name, Tensor<T>(std::move(shape), fill), false).value;
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw UsageError("no parameter named '" + name + "'");
  }
  return entries_[it->second];
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  return entry(name).value;
}

template <typename T>
std::int64_t ParamStore<T>::param_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.value.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

template <typename T>
void ParamStore<T>::clear_grad() {
  for (auto& e : entries_) e.value.clear_grad();
}

template <typename T>
std::vector<std::vector<T>> ParamStore<T>::snapshot() const {
  std::vector<std::vector<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.value.data().begin(), e.value.data().end());
  return out;
}

template <typename T>
void ParamStore<T>::restore(const std::vector<std::vector<T>>& values) {
  if (values.size() != entries_.size()) {
    throw UsageError("snapshot does not match parameter store layout");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    Tensor<T> v = entries_[i].value;
    auto d = v.mutable_data();
    if (d.size() != values[i].size()) {
      throw UsageError("snapshot extent mismatch for '" + entries_[i].name + "'");
    }
    std::copy(values[i].begin(), values[i].end(), d.begin());
  }
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace fmbff
