#include "fmbff/training.hpp"

#include <cmath>
#include <cstdio>

#include "fmbff/ops.hpp"

namespace fmbff {

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (!(lr0 > 0) || !std::isfinite(lr0)) fail("train.lr0", "must be positive");
  if (max_epochs < 1) fail("train.max_epochs", "must be >= 1");
  if (plateau_patience < 1) fail("train.plateau_patience", "must be >= 1");
  if (!(plateau_factor > 0 && plateau_factor < 1)) fail("train.plateau_factor", "must be in (0, 1)");
  if (early_stop_patience < 1) fail("train.early_stop_patience", "must be >= 1");
  if (batch_size < 1) fail("train.batch_size", "must be >= 1");
  if (w_bce < 0 || w_dice < 0 || w_bce + w_dice == 0) fail("train.loss_weights", "must be nonnegative, not both 0");
  if (!(beta1 >= 0 && beta1 < 1)) fail("train.beta1", "must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("train.beta2", "must be in [0, 1)");
  if (!(adam_eps > 0)) fail("train.adam_eps", "must be positive");
  if (max_steps < 0) fail("train.max_steps", "must be >= 0");
}

// ---------------------------------------------------------------- loss

template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& pred, const Tensor<T>& gt, double w_bce, double w_dice) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("loss: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  }
  if (pred.rank() != 4 || pred.dim(1) != 1) throw DimensionError("loss: expected N x 1 x H x W, got " + shape_str(pred.shape()));
  constexpr double clip = 1e-7;
  const Index n = pred.dim(0), per = pred.numel() / n;
  const auto p = pred.data();
  const auto g = gt.data();

  double bce = 0, dice = 0;
  // Per image: sum p*g, sum p, sum g.
  std::vector<double> spg(n), sp(n), sg(n);
  for (Index i = 0; i < n; ++i) {
    for (Index k = i * per; k < (i + 1) * per; ++k) {
      const double pc = std::clamp<double>(p[k], clip, 1 - clip);
      bce -= g[k] * std::log(pc) + (1 - g[k]) * std::log(1 - pc);
      spg[i] += double(p[k]) * g[k];
      sp[i] += p[k];
      sg[i] += g[k];
    }
    dice += (2 * spg[i] + 1) / (sp[i] + sg[i] + 1);
  }
  bce /= double(pred.numel());
  dice /= double(n);
  const double value = w_bce * bce + w_dice * (1 - dice);

  return Tensor<T>::from_op(
      {1}, {static_cast<T>(value)}, "segmentation_loss", {pred},
      [gt, n, per, w_bce, w_dice, spg = std::move(spg), sp = std::move(sp), sg = std::move(sg)](
          detail::Node<T>& self) {
        auto gp = detail::input_grad(self, 0);
        const auto& pv = self.inputs[0]->data;
        const auto gv = gt.data();
        const double up = self.grad[0];
        const double inv_total = 1.0 / double(n * per);
        for (Index i = 0; i < n; ++i) {
          const double den = sp[i] + sg[i] + 1, num = 2 * spg[i] + 1;
          for (Index k = i * per; k < (i + 1) * per; ++k) {
            double d = 0;
            if (pv[k] > clip && pv[k] < 1 - clip) d += w_bce * inv_total * (pv[k] - gv[k]) / (double(pv[k]) * (1 - pv[k]));
            d -= w_dice / double(n) * (2 * gv[k] * den - num) / (den * den);
            gp[k] += static_cast<T>(up * d);
          }
        }
      });
}

// ---------------------------------------------------------------- optimizer

template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr, double beta1, double beta2, double eps) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size()) {
    if (state.step != 0) throw UsageError("adam_step: optimizer state does not match the parameter store");
    state.m.assign(entries.size(), {});
    state.v.assign(entries.size(), {});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].trainable) continue;
      state.m[i].assign(static_cast<std::size_t>(entries[i].value.numel()), T{0});
      state.v[i].assign(static_cast<std::size_t>(entries[i].value.numel()), T{0});
    }
  }
  for (const auto& e : entries)
    if (e.trainable && !e.value.has_grad()) throw UsageError("adam_step: no gradient for '" + e.name + "'");

  ++state.step;
  const double c1 = 1 - std::pow(beta1, double(state.step));
  const double c2 = 1 - std::pow(beta2, double(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    Tensor<T> p = entries[i].value;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size()) throw UsageError("adam_step: moment extent mismatch for '" + entries[i].name + "'");
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = beta1 * m[k] + (1 - beta1) * gk;
      const double vk = beta2 * v[k] + (1 - beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      w[k] = static_cast<T>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + eps));
    }
  }
  params.clear_grad();
}

// ---------------------------------------------------------------- schedule

PlateauSchedule PlateauSchedule::from(const TrainConfig& cfg) {
  PlateauSchedule s;
  s.lr0 = s.lr = cfg.lr0;
  s.factor = cfg.plateau_factor;
  s.plateau_patience = cfg.plateau_patience;
  s.stop_patience = cfg.early_stop_patience;
  return s;
}

bool PlateauSchedule::update(double metric) {
  if (metric > best) {
    best = metric;
    plateau_count = stale_count = 0;
    return true;
  }
  ++stale_count;
  if (++plateau_count >= plateau_patience) {
    ++reductions;
    lr = lr0 * std::pow(factor, reductions);
    plateau_count = 0;
  }
  return false;
}

// ---------------------------------------------------------------- loop

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename V>
void shuffle(std::vector<V>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

Tensor<float> predict_samples(const Model<float>& model, const std::vector<Sample>& samples, int batch_size) {
  if (samples.empty()) throw UsageError("predict: no samples");
  std::vector<float> out;
  const Index h = samples[0].image.dim(1), w = samples[0].image.dim(2);
  for (std::size_t at = 0; at < samples.size(); at += static_cast<std::size_t>(batch_size)) {
    std::vector<const Sample*> batch;
    for (std::size_t i = at; i < std::min(samples.size(), at + batch_size); ++i) batch.push_back(&samples[i]);
    const Tensor<float> p = model.predict(stack_images(batch));
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<float>({static_cast<Index>(samples.size()), 1, h, w}, std::move(out));
}

MetricsReport evaluate(const Model<float>& model, const std::vector<Sample>& samples, int batch_size) {
  const Tensor<float> pred = predict_samples(model, samples, batch_size);
  std::vector<const Sample*> all;
  for (const Sample& s : samples) all.push_back(&s);
  std::vector<Metrics> per;
  std::vector<std::string> ids;
  for (const Confusion& c : confusion(pred, stack_masks(all))) per.push_back(metrics_from(c));
  for (const Sample& s : samples) ids.push_back(s.id);
  return aggregate(std::move(ids), std::move(per));
}

TrainResult train(Model<float>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw UsageError("train: empty training set");
  if (val_set.empty()) throw UsageError("train: empty validation set");

  TrainResult result;
  TrainState& st = result.state;
  st.schedule = PlateauSchedule::from(cfg);
  ParamStore<float>& params = model.params();
  auto best = params.snapshot();

  while (st.epoch < cfg.max_epochs) {
    if (cfg.max_steps > 0 && st.steps >= cfg.max_steps) break;
    const int epoch = st.epoch + 1;
    std::mt19937_64 rng(mix(cfg.seed, static_cast<std::uint64_t>(epoch)));

    // (sample index, variant) pairs; variant -1 means the sample as is.
    std::vector<std::pair<std::size_t, int>> order;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      if (cfg.augment == AugmentMode::full) {
        for (int k = 0; k < 36; ++k) order.emplace_back(i, k);
      } else {
        order.emplace_back(i, -1);
      }
    }
    shuffle(order, rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = st.schedule.lr;
    double loss_sum = 0;
    std::size_t loss_count = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && st.steps >= cfg.max_steps) break;
      std::vector<Sample> views;
      for (std::size_t i = at; i < std::min(order.size(), at + cfg.batch_size); ++i) {
        const Sample& s = train_set[order[i].first];
        const int k = order[i].second;
        if (k >= 0) {
          views.push_back(augment(s, (k / 3) * kRotationStep, kBrightnessFactors[k % 3]));
        } else if (cfg.augment == AugmentMode::random) {
          views.push_back(random_augmentation(s, rng));
        } else {
          views.push_back(s);
        }
      }
      std::vector<const Sample*> batch;
      for (const Sample& s : views) batch.push_back(&s);

      const Tensor<float> x = stack_images(batch), y = stack_masks(batch);
      Tensor<float> loss = segmentation_loss(model.forward(x, {Mode::train, &rng}).f_out, y, cfg.w_bce, cfg.w_dice);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("training diverged: loss " + std::to_string(lv) + " at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(st.steps + 1) + ", lr " + std::to_string(st.schedule.lr));
      }
      backward(loss);
      adam_step(params, st.adam, st.schedule.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
      ++st.steps;
      loss_sum += lv * double(batch.size());
      loss_count += batch.size();
    }
    if (loss_count == 0) break;
    rec.train_loss = loss_sum / double(loss_count);

    rec.val = evaluate(model, val_set, cfg.batch_size).aggregate;
    rec.improved = st.schedule.update(rec.val.mean.d);
    st.epoch = epoch;
    if (rec.improved) {
      best = params.snapshot();
      result.best_epoch = epoch;
      result.best_val_dice = rec.val.mean.d;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (st.schedule.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }
  params.restore(best);
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string s = "epoch,train_loss,lr,val_acc,val_sn,val_sp,val_j,val_d,val_d_std,improved\n";
  char buf[256];
  for (const EpochRecord& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n", r.epoch, r.train_loss, r.lr,
                  r.val.mean.acc, r.val.mean.sn, r.val.mean.sp, r.val.mean.j, r.val.mean.d, r.val.std.d,
                  r.improved ? 1 : 0);
    s += buf;
  }
  return s;
}

template Tensor<float> segmentation_loss(const Tensor<float>&, const Tensor<float>&, double, double);
template Tensor<double> segmentation_loss(const Tensor<double>&, const Tensor<double>&, double, double);
template void adam_step(ParamStore<float>&, AdamState<float>&, double, double, double, double);
template void adam_step(ParamStore<double>&, AdamState<double>&, double, double, double, double);

}  // namespace fmbff
