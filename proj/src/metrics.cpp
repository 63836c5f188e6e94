#include "fmbff/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace fmbff {

std::vector<Confusion> confusion(const Tensor<float>& pred, const Tensor<float>& gt, double threshold) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("confusion: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  }
  if (pred.rank() < 2) throw DimensionError("confusion: expected a leading batch axis");
  const Index n = pred.dim(0), per = pred.numel() / n;
  std::vector<Confusion> out(static_cast<std::size_t>(n));
  const auto p = pred.data();
  const auto g = gt.data();
  for (Index i = 0; i < n; ++i) {
    Confusion& c = out[i];
    for (Index k = i * per; k < (i + 1) * per; ++k) {
      const bool yes = p[k] >= threshold, truth = g[k] > 0.5f;
      c.tp += yes && truth;
      c.fp += yes && !truth;
      c.fn += !yes && truth;
      c.tn += !yes && !truth;
    }
  }
  return out;
}

namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

Metrics metrics_from(const Confusion& c) {
  Metrics m;
  m.acc = ratio(c.tp + c.tn, c.total());
  m.sn = ratio(c.tp, c.tp + c.fn);
  m.sp = ratio(c.tn, c.tn + c.fp);
  m.j = ratio(c.tp, c.tp + c.fp + c.fn);
  m.d = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  m.pr = ratio(c.tp, c.tp + c.fp);
  return m;
}

Summary summarize(const std::vector<Metrics>& values) {
  if (values.empty()) throw UsageError("aggregate: no per-image metrics");
  // Welford updates: identical inputs reproduce themselves exactly.
  std::array<double, Metrics::kCount> mean{}, m2{};
  double n = 0;
  for (const Metrics& m : values) {
    n += 1;
    const auto v = m.values();
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double delta = v[k] - mean[k];
      mean[k] += delta / n;
      m2[k] += delta * (v[k] - mean[k]);
    }
  }
  auto pack = [](const std::array<double, Metrics::kCount>& a) { return Metrics{a[0], a[1], a[2], a[3], a[4], a[5]}; };
  std::array<double, Metrics::kCount> sd{};
  for (std::size_t k = 0; k < sd.size(); ++k) sd[k] = std::sqrt(m2[k] / n);
  return {pack(mean), pack(sd)};
}

MetricsReport aggregate(std::vector<std::string> ids, std::vector<Metrics> per_image, const std::vector<int>& fold_of) {
  if (ids.size() != per_image.size()) throw UsageError("aggregate: ids and metrics differ in length");
  MetricsReport r;
  r.aggregate = summarize(per_image);
  if (!fold_of.empty()) {
    if (fold_of.size() != per_image.size()) throw UsageError("aggregate: fold assignment length mismatch");
    int k = 0;
    for (int f : fold_of) {
      if (f < 0) throw UsageError("aggregate: negative fold index");
      k = std::max(k, f + 1);
    }
    std::vector<std::vector<Metrics>> groups(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < per_image.size(); ++i) groups[fold_of[i]].push_back(per_image[i]);
    for (const auto& g : groups) r.folds.push_back(summarize(g));
  }
  r.ids = std::move(ids);
  r.per_image = std::move(per_image);
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string row(const std::string& head, const Metrics& m, std::size_t cols, const char* sep) {
  std::string s = head;
  const auto v = m.values();
  for (std::size_t k = 0; k < cols; ++k) s += sep + fmt(v[k]);
  return s + "\n";
}

}  // namespace

std::string report_csv(const MetricsReport& r, bool with_precision) {
  const std::size_t cols = with_precision ? 6 : 5;
  std::string s = "id";
  for (std::size_t k = 0; k < cols; ++k) s += std::string(",") + Metrics::kNames[k];
  s += "\n";
  for (std::size_t i = 0; i < r.per_image.size(); ++i) s += row(r.ids[i], r.per_image[i], cols, ",");
  return s;
}

std::string report_table(const MetricsReport& r, bool with_precision) {
  const std::size_t cols = with_precision ? 6 : 5;
  char buf[64];
  std::string s;
  std::snprintf(buf, sizeof buf, "%-10s", "");
  s += buf;
  for (std::size_t k = 0; k < cols; ++k) {
    std::snprintf(buf, sizeof buf, "  %-17s", Metrics::kNames[k]);
    s += buf;
  }
  s += "\n";
  auto line = [&](const std::string& name, const Summary& sm) {
    std::snprintf(buf, sizeof buf, "%-10s", name.c_str());
    s += buf;
    const auto mu = sm.mean.values(), sd = sm.std.values();
    for (std::size_t k = 0; k < cols; ++k) {
      std::snprintf(buf, sizeof buf, "  %7.4f +- %6.4f", mu[k], sd[k]);
      s += buf;
    }
    s += "\n";
  };
  for (std::size_t f = 0; f < r.folds.size(); ++f) line("fold " + std::to_string(f), r.folds[f]);
  line("all (n=" + std::to_string(r.per_image.size()) + ")", r.aggregate);
  return s;
}

}  // namespace fmbff
