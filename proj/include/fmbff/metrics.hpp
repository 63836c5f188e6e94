#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fmbff/tensor.hpp"

namespace fmbff {

struct Confusion {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::int64_t total() const { return tp + tn + fp + fn; }
};

// Per-image counts; pred is binarized with pred >= threshold.
// pred and gt are N x 1 x H x W (or any equal shapes with a leading N).
std::vector<Confusion> confusion(const Tensor<float>& pred, const Tensor<float>& gt, double threshold = 0.5);

struct Metrics {
  double acc = 0, sn = 0, sp = 0, j = 0, d = 0, pr = 0;

  static constexpr std::size_t kCount = 6;
  static constexpr const char* kNames[kCount] = {"acc", "sn", "sp", "j", "d", "pr"};
  std::array<double, kCount> values() const { return {acc, sn, sp, j, d, pr}; }
};

// A zero denominator means every count it sums is zero, so the ratio is
// vacuously perfect and reported as 1.
Metrics metrics_from(const Confusion& c);

struct Summary {
  Metrics mean, std;  // population std
};

struct MetricsReport {
  std::vector<std::string> ids;
  std::vector<Metrics> per_image;
  Summary aggregate;
  std::vector<Summary> folds;
};

Summary summarize(const std::vector<Metrics>& values);

// fold_of[i] assigns per_image[i] to a fold in [0, k); empty means no folds.
MetricsReport aggregate(std::vector<std::string> ids, std::vector<Metrics> per_image,
                        const std::vector<int>& fold_of = {});

std::string report_csv(const MetricsReport& r, bool with_precision);
std::string report_table(const MetricsReport& r, bool with_precision);

}  // namespace fmbff
