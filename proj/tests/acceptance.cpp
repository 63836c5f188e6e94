// Acceptance suite: one PASS/FAIL line per criterion. Exit status is 0 only
// when every selected criterion passes.
//
//   acceptance            run criteria 1-7
//   acceptance 3 4        run a subset

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "fmbff/blocks.hpp"
#include "fmbff/checkpoint.hpp"
#include "fmbff/config_file.hpp"
#include "fmbff/data.hpp"
#include "fmbff/image_io.hpp"
#include "fmbff/metrics.hpp"
#include "fmbff/model.hpp"
#include "fmbff/ops.hpp"
#include "fmbff/training.hpp"
#include "fmbff/verify.hpp"

#ifndef FMBFF_CLI
#error "FMBFF_CLI must name the command-line binary"
#endif

using namespace fmbff;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------- pinned bounds

constexpr double kBlockGradTol = 1e-5;
constexpr double kModelGradTol = 1e-4;
constexpr double kGradcheckSeconds = 120;
constexpr double kSpecialCaseTol = 1e-6;
constexpr double kConvTol = 1e-6;
constexpr int kMetricMasks = 1000;
constexpr double kDiceJaccardTol = 1e-12;
constexpr double kRowSumTol = 1e-6;
constexpr double kPlateauFactor = 0.75;
constexpr int kPlateauEpochs = 7;
constexpr int kStopEpochs = 10;
constexpr int kOverfitSamples = 8;
constexpr int kOverfitSteps = 200;
constexpr double kOverfitDice = 0.95;
constexpr double kOverfitSeconds = 300;
constexpr int kToyTrain = 200, kToyVal = 50, kToyEpochs = 30;
constexpr double kToyDice = 0.85;
constexpr double kToySeconds = 1200;

// ---------------------------------------------------------------- reporting

struct Checker {
  int checks = 0;
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  bool expect(bool ok, const std::string& what) {
    ++checks;
    if (!ok) failures.push_back(what);
    return ok;
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor<double> random_d(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = lo + (hi - lo) * uniform01(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

Tensor<float> random_f(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (float& x : v) x = static_cast<float>(lo + (hi - lo) * uniform01(rng));
  return Tensor<float>(std::move(shape), std::move(v));
}

template <typename T>
void fill(Tensor<T> t, T v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

template <typename T>
void set_identity(const Conv2d<T>& conv) {
  Tensor<T> w = conv.weight;
  auto d = w.mutable_data();
  std::fill(d.begin(), d.end(), T{0});
  for (Index c = 0; c < conv.out_channels(); ++c) d[c * conv.in_channels() + c] = 1;
}

struct RunOutput {
  int status = -1;
  std::string out;
};

// Runs the CLI with stdout captured and stderr discarded.
RunOutput run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + FMBFF_CLI + "' " + args + " 2>/dev/null";
  RunOutput r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) r.out += buf;
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

// Relative path -> bytes for every regular file under `root`.
std::vector<std::pair<std::string, std::string>> tree(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), root).string(), read_file(e.path().string()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void check_unit_interval(Checker& c, const Probe<double>& probe, const std::string& where) {
  for (const auto& [name, g] : probe.gates) {
    bool ok = g.numel() > 0;
    for (double v : g.data()) ok = ok && v > 0.0 && v < 1.0;
    c.expect(ok, where + ": gate " + name + " outside (0,1)");
  }
}

void check_rows(Checker& c, const Probe<double>& probe, const std::string& where) {
  for (const auto& [name, s] : probe.attention) {
    const Index cols = s.dim(s.rank() - 1);
    double worst = 0;
    bool nonneg = true;
    for (Index r = 0; r < s.numel() / cols; ++r) {
      double t = 0;
      for (Index j = 0; j < cols; ++j) {
        nonneg = nonneg && s[r * cols + j] >= 0.0;
        t += s[r * cols + j];
      }
      worst = std::max(worst, std::abs(t - 1.0));
    }
    c.expect(nonneg && worst <= kRowSumTol, where + ": attention " + name + " row sum off by " + fmt("%.2e", worst));
  }
}

// ---------------------------------------------------------------- 1

void gradient_correctness(Checker& c) {
  const auto t0 = Clock::now();
  const RunOutput all = run_cli("gradcheck --blocks all");
  const double secs = seconds_since(t0);
  c.expect(all.status == 0, "gradcheck --blocks all exited " + std::to_string(all.status));
  c.expect(secs < kGradcheckSeconds, "gradcheck took " + fmt("%.1f s", secs));
  for (const std::string& b : gradcheck_block_names()) {
    c.expect(all.out.find(b + " ") != std::string::npos, "gradcheck output lacks block " + b);
  }
  c.note("cli " + fmt("%.1fs", secs));

  // Bounds pinned here, independent of the tolerances the suite reports.
  for (const BlockCheck& b : run_gradcheck_suite("all")) {
    const double tol = b.block == "model" ? kModelGradTol : kBlockGradTol;
    c.expect(b.leaves > 0 && b.max_rel_error <= tol,
             b.block + " max rel err " + fmt("%.3e", b.max_rel_error) + " at " + b.worst_leaf);
    c.note(b.block + " " + fmt("%.1e", b.max_rel_error));
  }

  const RunOutput only = run_cli("gradcheck --blocks fmcab");
  c.expect(only.status == 0 && only.out.find("fmcab") != std::string::npos &&
               only.out.find("biffm") == std::string::npos && only.out.find("model") == std::string::npos,
           "--blocks fmcab did not restrict the suite");
  const RunOutput fault = run_cli("gradcheck --blocks fmcab --inject-fault conv2d");
  c.expect(fault.status == 4, "injected conv2d fault exited " + std::to_string(fault.status));
  c.expect(fault.out.find("failing parameter") != std::string::npos, "fault report names no parameter");
}

// ---------------------------------------------------------------- 2

void equation_fidelity(Checker& c) {
  {  // constant input: FM gate 0.5 under zero bias, output gamma^p * 0.5 * i2
    ParamStore<double> store(5);
    auto p = FmcabParams<double>::make(store, "fmcab", 3, 4, 2.0);
    fill(p.gamma, 1.5);
    Tensor<double> i2({1, 3, 4, 4});
    for (Index ch = 0; ch < 3; ++ch)
      for (Index i = 0; i < 16; ++i) i2.mutable_data()[ch * 16 + i] = 0.3 * (ch + 1);
    Probe<double> probe;
    const auto y = focal_modulation(i2, p, {Mode::eval, nullptr, &probe});
    double gate_err = 0, out_err = 0;
    for (double g : probe.gates.at(0).second.data()) gate_err = std::max(gate_err, std::abs(g - 0.5));
    for (Index i = 0; i < y.numel(); ++i) out_err = std::max(out_err, std::abs(y[i] - std::pow(1.5, 2.0) * 0.5 * i2[i]));
    c.expect(gate_err <= kSpecialCaseTol, "FM gate off 0.5 by " + fmt("%.2e", gate_err));
    c.expect(out_err <= kSpecialCaseTol, "FM output off gamma^p*0.5*i2 by " + fmt("%.2e", out_err));
  }
  {  // gamma = 0 annihilates
    ParamStore<double> store(6);
    auto p = FmcabParams<double>::make(store, "fmcab", 4);
    fill(p.gamma, 0.0);
    std::mt19937_64 rng(6);
    const auto y = focal_modulation(random_d({2, 4, 3, 3}, rng), p);
    bool zero = true;
    for (double v : y.data()) zero = zero && v == 0.0;
    c.expect(zero, "gamma = 0 did not annihilate the FM output");
  }
  {  // zero fuse_1x1: ViTM is the identity
    ParamStore<double> store(17);
    auto p = VitmParams<double>::make(store, "vitm", 16, 4, 4, 4);
    std::mt19937_64 rng(17);
    const auto x = random_d({1, 16, 4, 4}, rng);
    fill(p.fuse_1x1.weight, 0.0);
    const auto y = vitm_forward(x, p);
    double err = 0;
    for (Index i = 0; i < x.numel(); ++i) err = std::max(err, std::abs(y[i] - x[i]));
    c.expect(y.shape() == x.shape() && err <= kSpecialCaseTol, "zero-fuse ViTM is not the identity");
  }
  {  // TSA: identity embeddings, constant input -> uniform c x c attention
    ParamStore<double> store(15);
    auto p = VitmParams<double>::make(store, "vitm", 6, 3, 3, 1);
    set_identity(p.wq);
    set_identity(p.wk);
    set_identity(p.wv);
    Probe<double> probe;
    tsa_forward(Tensor<double>({1, 6, 3, 3}, 0.8), p, {Mode::eval, nullptr, &probe});
    double err = 0;
    for (double v : probe.attention.at(0).second.data()) err = std::max(err, std::abs(v - 1.0 / 6));
    c.expect(err <= kSpecialCaseTol, "TSA constant-input attention not uniform");
  }
  {  // GSA: constant input -> uniform HW x HW attention
    ParamStore<double> store(16);
    auto p = VitmParams<double>::make(store, "vitm", 8, 4, 4, 2);
    Probe<double> probe;
    const auto y = gsa_forward(Tensor<double>({1, 8, 4, 4}, -0.4), p, {Mode::eval, nullptr, &probe});
    const auto& s = probe.attention.at(0).second;
    double err = 0;
    for (double v : s.data()) err = std::max(err, std::abs(v - 1.0 / 16));
    c.expect(s.shape() == Shape{1, 16, 16} && err <= kSpecialCaseTol, "GSA constant-input attention not uniform");
    c.expect(y.shape() == Shape{1, 8, 4, 4}, "GSA extent");
  }
  {  // shape table
    ParamStore<float> store(20);
    std::mt19937_64 rng(20);
    auto up = FrmParams<float>::make(store, "frm_up", 8, 16, true);
    auto flat = FrmParams<float>::make(store, "frm", 8, 16, false);
    const auto x = random_f({1, 8, 4, 4}, rng);
    c.expect(frm_forward(x, up, {Mode::train, &rng}).shape() == Shape{1, 24, 8, 8}, "FRM upsample extent");
    c.expect(frm_forward(x, flat, {Mode::train, &rng}).shape() == Shape{1, 24, 4, 4}, "FRM flat extent");

    auto fm = FmcabParams<float>::make(store, "fmcab", 8);
    c.expect(fmcab_forward(random_f({1, 8, 16, 16}, rng), fm).shape() == Shape{1, 8, 16, 16}, "FMCAB extent");
    auto bf = BiffmParams<float>::make(store, "biffm", 16, 40, 16);
    c.expect(biffm_forward(random_f({1, 16, 8, 8}, rng), random_f({1, 40, 4, 4}, rng), bf).shape() ==
                 Shape{1, 32, 8, 8},
             "BiFFM extent");
    auto vt = VitmParams<float>::make(store, "vitm", 8, 4, 4, 2);
    c.expect(tsa_forward(random_f({1, 8, 4, 4}, rng), vt).shape() == Shape{1, 8, 4, 4}, "TSA extent");
  }
}

// ---------------------------------------------------------------- 3

std::vector<double> naive_conv(const Tensor<float>& x, const Tensor<float>& k, const Tensor<float>& bias,
                               int stride, int pad, int groups) {
  const int n = int(x.dim(0)), cin = int(x.dim(1)), h = int(x.dim(2)), w = int(x.dim(3));
  const int cout = int(k.dim(0)), kh = int(k.dim(2)), kw = int(k.dim(3));
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  const int cg = cin / groups, og = cout / groups;
  std::vector<double> y(static_cast<std::size_t>(n * cout * oh * ow));
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double s = bias[o];
          for (int ci = 0; ci < cg; ++ci)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                const int yy = i * stride + u - pad, xx = j * stride + v - pad;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                const int ch = (o / og) * cg + ci;
                s += double(x[((b * cin + ch) * h + yy) * w + xx]) * double(k[((o * cg + ci) * kh + u) * kw + v]);
              }
          y[static_cast<std::size_t>(((b * cout + o) * oh + i) * ow + j)] = s;
        }
  return y;
}

void oracle_equivalence(Checker& c) {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const int groups = std::array{1, 1, 2, 4}[trial % 4];
    const int cin = groups * (1 + int(rng() % 3)), cout = groups * (1 + int(rng() % 3));
    const int k = std::array{1, 3, 5}[rng() % 3];
    const int stride = 1 + int(rng() % 2), pad = int(rng() % (k / 2 + 1));
    const int h = k + int(rng() % 6), w = k + int(rng() % 6), n = 1 + int(rng() % 2);
    const auto x = random_f({n, cin, h, w}, rng);
    const auto wt = random_f({cout, cin / groups, k, k}, rng);
    const auto b = random_f({cout}, rng);
    const auto y = conv2d(x, wt, b, {stride, stride, pad, pad, groups});
    const auto want = naive_conv(x, wt, b, stride, pad, groups);
    if (!c.expect(static_cast<std::size_t>(y.numel()) == want.size(), "conv2d output extent")) continue;
    for (std::size_t i = 0; i < want.size(); ++i) {
      worst = std::max(worst, std::abs(double(y[i]) - want[i]) / std::max(1.0, std::abs(want[i])));
    }
  }
  c.expect(worst <= kConvTol, "conv2d vs naive summation " + fmt("%.2e", worst));
  c.note("conv " + fmt("%.1e", worst));

  // Brute-force confusion counting over random masks, including empty and full ones.
  int mismatches = 0;
  double dj = 0;
  for (int t = 0; t < kMetricMasks; ++t) {
    const Index h = 1 + Index(rng() % 16), w = 1 + Index(rng() % 16);
    const double pg = t % 10 == 0 ? 0.0 : t % 10 == 1 ? 1.0 : uniform01(rng);
    const double pp = t % 7 == 0 ? 0.0 : t % 7 == 1 ? 1.0 : uniform01(rng);
    std::vector<float> gt(static_cast<std::size_t>(h * w)), pred(gt.size());
    std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool g = uniform01(rng) < pg;
      pred[i] = static_cast<float>(uniform01(rng) < pp ? 0.5 + 0.5 * uniform01(rng) : 0.499 * uniform01(rng));
      gt[i] = g ? 1.0f : 0.0f;
      const bool p = pred[i] >= 0.5f;
      tp += p && g;
      tn += !p && !g;
      fp += p && !g;
      fn += !p && g;
    }
    const auto cm = confusion(Tensor<float>({1, 1, h, w}, pred), Tensor<float>({1, 1, h, w}, gt)).at(0);
    const Metrics m = metrics_from(cm);
    auto r = [](std::int64_t a, std::int64_t b) { return b == 0 ? 1.0 : double(a) / double(b); };
    const bool same = cm.tp == tp && cm.tn == tn && cm.fp == fp && cm.fn == fn && m.acc == r(tp + tn, h * w) &&
                      m.sn == r(tp, tp + fn) && m.sp == r(tn, tn + fp) && m.j == r(tp, tp + fp + fn) &&
                      m.d == r(2 * tp, 2 * tp + fp + fn) && m.pr == r(tp, tp + fp);
    mismatches += !same;
    dj = std::max(dj, std::abs(m.d - 2 * m.j / (1 + m.j)));
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " of " + std::to_string(kMetricMasks) +
                                " masks disagree with brute-force counts");
  c.expect(dj <= kDiceJaccardTol, "D vs 2J/(1+J) " + fmt("%.2e", dj));
  c.note("D-J " + fmt("%.1e", dj));
}

// ---------------------------------------------------------------- 4

void shape_invariants(Checker& c) {
  for (Index size : {16, 32, 64, 128}) {
    ModelConfig mc;
    mc.height = mc.width = size;
    mc.seed = 4;
    Model<float> m(mc);
    std::mt19937_64 rng(size);
    const auto x = random_f({1, 3, size, size}, rng, 0, 1);
    const auto y = m.forward(x, {Mode::train, &rng}).f_out;
    bool open = true;
    for (float v : y.data()) open = open && v > 0.0f && v < 1.0f;
    c.expect(y.shape() == Shape{1, 1, size, size}, "f_out extent at " + std::to_string(size));
    c.expect(open, "f_out outside (0,1) at " + std::to_string(size));
    c.expect(m.predict(x).shape() == Shape{1, 1, size, size}, "predict extent at " + std::to_string(size));
  }

  // Every gate and attention map of a whole network, train and eval mode.
  ModelConfig mc;
  mc.height = mc.width = 32;
  mc.encoder_widths = {8, 16, 16, 32};
  mc.decoder_widths = {16, 16, 8, 8};
  mc.seed = 8;
  Model<double> m(mc);
  std::mt19937_64 rng(8);
  const auto x = random_d({2, 3, 32, 32}, rng, 0, 1);
  Probe<double> train_probe, eval_probe;
  m.forward(x, {Mode::train, &rng, &train_probe});
  m.forward(x, {Mode::eval, nullptr, &eval_probe});
  c.expect(!train_probe.gates.empty() && !train_probe.attention.empty(), "model probe saw no gates or attention");
  check_unit_interval(c, train_probe, "train");
  check_unit_interval(c, eval_probe, "eval");
  check_rows(c, train_probe, "train");
  check_rows(c, eval_probe, "eval");
  c.note(std::to_string(train_probe.gates.size()) + " gates, " + std::to_string(train_probe.attention.size()) +
         " attention maps");

  // Extreme inputs keep block gates open.
  ParamStore<double> store(4);
  auto fm = FmcabParams<double>::make(store, "fmcab", 8);
  auto bf = BiffmParams<double>::make(store, "biffm", 8, 12, 8);
  auto vt = VitmParams<double>::make(store, "vitm", 8, 4, 4, 2);
  Probe<double> probe;
  fmcab_forward(random_d({2, 8, 5, 5}, rng, -20, 20), fm, {Mode::eval, nullptr, &probe});
  biffm_forward(random_d({2, 8, 6, 6}, rng, -20, 20), random_d({2, 12, 3, 3}, rng, -20, 20), bf,
                {Mode::eval, nullptr, &probe});
  tsa_forward(random_d({1, 8, 4, 4}, rng, -5, 5), vt, {Mode::eval, nullptr, &probe});
  gsa_forward(random_d({1, 8, 4, 4}, rng, -5, 5), vt, {Mode::eval, nullptr, &probe});
  check_unit_interval(c, probe, "blocks");
  check_rows(c, probe, "blocks");

  // channel_shuffle is a permutation with an exact inverse.
  for (Index ch : {4, 6, 8, 12, 24}) {
    for (Index g = 1; g <= ch; ++g) {
      if (ch % g != 0) continue;
      Tensor<double> x({2, ch, 2, 3});
      for (Index i = 0; i < x.numel(); ++i) x.mutable_data()[i] = double(i);
      const auto y = channel_shuffle(x, g);
      std::vector<double> sorted(y.data().begin(), y.data().end());
      std::sort(sorted.begin(), sorted.end());
      bool perm = true;
      for (std::size_t i = 0; i < sorted.size(); ++i) perm = perm && sorted[i] == double(i);
      const auto back = channel_shuffle(y, ch / g);
      bool inverse = true;
      for (Index i = 0; i < x.numel(); ++i) inverse = inverse && back[i] == x[i];
      c.expect(perm && inverse, "channel_shuffle C=" + std::to_string(ch) + " g=" + std::to_string(g));
    }
  }
}

// ---------------------------------------------------------------- 5

void protocol_fidelity(Checker& c) {
  TrainConfig tc;
  PlateauSchedule s = PlateauSchedule::from(tc);
  c.expect(tc.plateau_factor == kPlateauFactor && tc.plateau_patience == kPlateauEpochs &&
               tc.early_stop_patience == kStopEpochs,
           "default schedule constants");
  s.update(0.5);
  for (int e = 1; e <= kStopEpochs; ++e) {
    s.update(0.5);
    const double want = e < kPlateauEpochs ? tc.lr0 : tc.lr0 * kPlateauFactor;
    c.expect(s.lr == want, "lr after " + std::to_string(e) + " stagnant epochs is " + fmt("%.6g", s.lr));
    c.expect(s.should_stop() == (e >= kStopEpochs), "early stop state after " + std::to_string(e) + " stagnant epochs");
  }

  // The same schedule driven by the training loop. With a negligible lr and
  // momentum-1 running statistics, evaluation is frozen after epoch 1.
  ModelConfig mc;
  mc.height = mc.width = 16;
  mc.encoder_widths = {4, 4, 4, 4};
  mc.decoder_widths = {4, 4, 4, 4};
  mc.heads = 2;
  mc.frm_dropout = 0.0;
  mc.bn_momentum = 1.0;
  Model<float> model(mc);
  const auto data = generate_synthetic(4, 16, 16, 5);
  TrainConfig frozen;
  frozen.lr0 = 1e-30;
  frozen.batch_size = 4;
  frozen.augment = AugmentMode::none;
  frozen.max_epochs = 50;
  const TrainResult r = train(model, data, data, frozen);
  const std::size_t improved =
      std::count_if(r.history.begin(), r.history.end(), [](const EpochRecord& e) { return e.improved; });
  c.expect(improved == 1 && r.stopped_early && r.history.size() == 1 + kStopEpochs,
           "frozen run stopped after " + std::to_string(r.history.size()) + " epochs");
  if (r.history.size() > kPlateauEpochs + 1) {
    c.expect(r.history[kPlateauEpochs].lr == frozen.lr0 && r.history[kPlateauEpochs + 1].lr == frozen.lr0 * 0.75,
             "loop lr not reduced by 25% after 7 stagnant epochs");
  }

  // Augmentation: 12 rotations in 30 degree steps times brightness {1, 0.8, 1.2}.
  const Sample base = generate_synthetic(1, 24, 24, 9)[0];
  const auto variants = expand_augmentations(base);
  std::set<std::string> ids;
  for (const Sample& v : variants) ids.insert(v.id);
  std::set<std::string> want;
  for (int deg = 0; deg < 360; deg += 30) {
    for (const char* b : {"1", "0.8", "1.2"}) want.insert(base.id + "_r" + std::to_string(deg) + "_b" + b);
  }
  c.expect(variants.size() == 36 && ids == want, "augmentation set is not 12 rotations x 3 brightness factors");
  const Sample same = augment(base, 0, 1.0);
  c.expect(std::equal(same.image.data().begin(), same.image.data().end(), base.image.data().begin()),
           "identity augmentation changed the image");

  // 5-fold partitions: disjoint, covering, sizes within one.
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = trial == 0 ? 103 : 5 + int(rng() % 400);
    std::vector<std::string> all;
    for (int i = 0; i < n; ++i) all.push_back("s" + std::to_string(i));
    const SplitPlan plan = kfold(all, 5, rng());
    std::multiset<std::string> seen;
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& f : plan.folds) {
      seen.insert(f.begin(), f.end());
      lo = std::min(lo, f.size());
      hi = std::max(hi, f.size());
    }
    bool exact = plan.folds.size() == 5 && seen.size() == all.size() && hi - lo <= 1 &&
                 std::set<std::string>(seen.begin(), seen.end()) == std::set<std::string>(all.begin(), all.end());
    for (int k = 0; k < 5 && exact; ++k) {
      const SplitPlan fk = fold_split(plan, k);
      std::set<std::string> tr(fk.train_ids.begin(), fk.train_ids.end());
      for (const auto& id : fk.val_ids) exact = exact && !tr.count(id);
      exact = exact && fk.train_ids.size() + fk.val_ids.size() == all.size();
    }
    if (trial == 0) {
      std::vector<std::size_t> sizes;
      for (const auto& f : plan.folds) sizes.push_back(f.size());
      exact = exact && sizes == std::vector<std::size_t>{21, 21, 21, 20, 20};
    }
    c.expect(exact, "5-fold partition of " + std::to_string(n) + " ids");
  }
}

// ---------------------------------------------------------------- 6

void toy_learning(Checker& c) {
  {
    const auto data = generate_synthetic(kOverfitSamples, 64, 64, 1);
    ModelConfig mc;
    mc.seed = 1;
    Model<float> model(mc);
    TrainConfig tc;
    tc.seed = 1;
    tc.augment = AugmentMode::none;
    tc.max_epochs = kOverfitSteps;  // one batch of eight per epoch
    tc.max_steps = kOverfitSteps;
    tc.early_stop_patience = kOverfitSteps;
    const auto t0 = Clock::now();
    const TrainResult r = train(model, data, data, tc);
    const double secs = seconds_since(t0);
    const double dice = evaluate(model, data).aggregate.mean.d;
    c.expect(r.state.steps <= kOverfitSteps, "overfit used " + std::to_string(r.state.steps) + " steps");
    c.expect(dice >= kOverfitDice, "overfit Dice " + fmt("%.4f", dice));
    c.expect(secs < kOverfitSeconds, "overfit took " + fmt("%.0f s", secs));
    c.note("overfit D " + fmt("%.4f", dice) + " in " + std::to_string(r.state.steps) + " steps, " +
           fmt("%.0fs", secs));
  }
  {
    const auto data = generate_synthetic(kToyTrain + kToyVal, 64, 64, 1);
    const std::vector<Sample> train_set(data.begin(), data.begin() + kToyTrain);
    const std::vector<Sample> val_set(data.begin() + kToyTrain, data.end());
    ModelConfig mc;
    mc.seed = 1;
    Model<float> model(mc);
    TrainConfig tc;
    tc.seed = 1;
    tc.max_epochs = kToyEpochs;
    const auto t0 = Clock::now();
    const TrainResult r = train(model, train_set, val_set, tc, [&](const EpochRecord& e) {
      std::fprintf(stderr, "  toy epoch %2d  loss %.4f  val dice %.4f  (%.0fs)\n", e.epoch, e.train_loss, e.val.mean.d,
                   seconds_since(t0));
    });
    const double secs = seconds_since(t0);
    const double dice = evaluate(model, val_set).aggregate.mean.d;
    c.expect(int(r.history.size()) <= kToyEpochs, "toy run exceeded the epoch budget");
    c.expect(dice >= kToyDice, "toy val Dice " + fmt("%.4f", dice));
    c.expect(secs < kToySeconds, "toy run took " + fmt("%.0f s", secs));
    c.note("toy val D " + fmt("%.4f", dice) + " (epoch " + std::to_string(r.best_epoch) + "), " + fmt("%.0fs", secs));
  }
}

// ---------------------------------------------------------------- 7

void determinism(Checker& c) {
  const fs::path root = fs::temp_directory_path() / ("fmbff_acceptance_" + std::to_string(getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
  write_file((root / "run.cfg").string(),
             "model.input_size = 32\n"
             "model.encoder_widths = 4,8,8,8\n"
             "model.decoder_widths = 4,4,4,4\n"
             "model.heads = 2\n"
             "train.max_epochs = 3\n"
             "train.batch_size = 4\n"
             "train.seed = 11\n");
  const std::string cfg = (root / "run.cfg").string();

  std::array<std::string, 2> run = {(root / "a").string(), (root / "b").string()};
  for (const std::string& dir : run) {
    const int s1 = run_cli("synth --n 10 --size 32 --seed 1 --out '" + dir + "/data'").status;
    const int s2 = run_cli("train --data '" + dir + "/data' --config '" + cfg + "' --out '" + dir + "/train'").status;
    const int s3 = run_cli("eval --data '" + dir + "/data' --ckpt '" + dir + "/train/checkpoint.fmbf' --folds 5 --out '" +
                           dir + "/eval'")
                       .status;
    c.expect(s1 == 0 && s2 == 0 && s3 == 0, "cli run in " + dir + " exited " + std::to_string(s1) + "/" +
                                                std::to_string(s2) + "/" + std::to_string(s3));
  }
  for (const char* part : {"data", "train", "eval"}) {
    const auto a = tree(fs::path(run[0]) / part), b = tree(fs::path(run[1]) / part);
    c.expect(!a.empty() && a == b, std::string(part) + " outputs differ between identical runs");
  }
  const std::string manifest = read_file(run[0] + "/data/run_manifest.json");
  c.expect(manifest.find("\"seed\": 1,") != std::string::npos, "synth manifest does not record seed 1");
  c.expect(fs::exists(run[0] + "/data/images/syn_0009.ppm") && fs::exists(run[0] + "/data/masks/syn_0009_mask.pgm"),
           "synth did not emit 10 images and masks");

  // Checkpoint round trip, bitwise, including Adam moments.
  const Checkpoint ck = load_checkpoint(run[0] + "/train/checkpoint.fmbf");
  const std::string bytes = read_file(run[0] + "/train/checkpoint.fmbf");
  c.expect(ck.state.adam.step > 0 && !ck.state.adam.m.empty(), "checkpoint carries no Adam moments");
  c.expect(encode_checkpoint(*ck.model, ck.config, ck.state) == bytes, "decode/encode is not byte-identical");

  RunConfig rc = parse_config(read_file(cfg));
  Model<float> model(rc.model);
  const auto data = generate_synthetic(6, 32, 32, 3);
  rc.train.max_epochs = 2;
  const TrainResult tr = train(model, data, data, rc.train);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(model, rc, tr.state));
  const auto& want = model.params().entries();
  const auto& got = back.model->params().entries();
  bool exact = want.size() == got.size() && back.state.adam.step == tr.state.adam.step;
  for (std::size_t i = 0; exact && i < want.size(); ++i) {
    exact = std::memcmp(want[i].value.data().data(), got[i].value.data().data(),
                        static_cast<std::size_t>(want[i].value.numel()) * sizeof(float)) == 0 &&
            back.state.adam.m[i] == tr.state.adam.m[i] && back.state.adam.v[i] == tr.state.adam.v[i];
  }
  c.expect(exact, "in-memory checkpoint round trip is not bitwise exact");
  fs::remove_all(root);
}

struct Criterion {
  int id;
  const char* name;
  std::function<void(Checker&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", gradient_correctness},
      {2, "equation-fidelity special cases", equation_fidelity},
      {3, "oracle equivalence", oracle_equivalence},
      {4, "shape and normalization invariants", shape_invariants},
      {5, "protocol fidelity", protocol_fidelity},
      {6, "toy-scale learning", toy_learning},
      {7, "determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const Criterion& cr : criteria) {
    if (!only.empty() && !only.count(cr.id)) continue;
    Checker c;
    const auto t0 = Clock::now();
    try {
      cr.run(c);
    } catch (const std::exception& e) {
      c.failures.push_back(std::string("exception: ") + e.what());
    }
    const bool pass = c.failures.empty();
    failed += !pass;
    std::string detail;
    for (const auto& n : c.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("%s criterion %d (%s): %d checks, %.1fs%s%s\n", pass ? "PASS" : "FAIL", cr.id, cr.name, c.checks,
                seconds_since(t0), detail.empty() ? "" : " | ", detail.c_str());
    for (const auto& f : c.failures) std::printf("    %s\n", f.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
