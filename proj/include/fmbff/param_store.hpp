#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "fmbff/tensor.hpp"

namespace fmbff {

enum class Init {
  zeros,
  ones,
  fan_in_uniform,  // U(-b, b), b = sqrt(6 / fan_in); fan_in = numel / shape[0]
};

// Ordered, name-addressed collection of leaf tensors.
//
// Trainable entries require gradients; buffer entries (batch-norm running
// statistics) do not, but are checkpointed alongside them. Iteration order
// is insertion order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}

  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Tensor<T> add(const std::string& name, Shape shape, Init init);
  Tensor<T> add_buffer(const std::string& name, Shape shape, T fill);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& get(const std::string& name) const;
  const Entry& entry(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::uint64_t seed() const { return seed_; }

  // Learnable scalar count (buffers excluded).
  std::int64_t param_count() const;
  void zero_grad();
  void clear_grad();

  // Value snapshot of every entry, restorable into this store.
  std::vector<std::vector<T>> snapshot() const;
  void restore(const std::vector<std::vector<T>>& values);

 private:
  Entry& insert(const std::string& name, Tensor<T> value, bool trainable);

  std::uint64_t seed_;
  std::mt19937_64 rng_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fmbff
