#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "fmbff/model.hpp"
#include "fmbff/training.hpp"

namespace fmbff {

struct DataConfig {
  double split_ratio = 0.8;
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  void validate() const {
    model.validate();
    train.validate();
    if (!(data.split_ratio > 0 && data.split_ratio < 1)) throw ConfigError("data.split_ratio: must be in (0, 1)");
  }
};

// `key = value` lines with dotted keys; '#' starts a comment. Unknown keys,
// duplicate keys and malformed values raise ConfigError naming the key and
// line. The result is not validated.
RunConfig parse_config(std::string_view text, RunConfig base = {});

// Applies a single assignment, e.g. from a command-line override.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// Canonical text form; parse_config(format_config(c)) reproduces c.
std::string format_config(const RunConfig& cfg);

std::vector<std::string> config_keys();

// Numeric encoding for checkpoints: one f64 vector per key. 64-bit seeds are
// split into two 32-bit halves.
std::vector<double> config_numbers(const RunConfig& cfg, const std::string& key);
void set_config_numbers(RunConfig& cfg, const std::string& key, const std::vector<double>& values);

}  // namespace fmbff
