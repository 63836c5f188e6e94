#include "fmbff/verify.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <sstream>

#include "fmbff/blocks.hpp"
#include "fmbff/error.hpp"
#include "fmbff/gradcheck.hpp"
#include "fmbff/model.hpp"
#include "fmbff/ops.hpp"

namespace fmbff {

namespace {

using Leaves = std::vector<std::pair<std::string, Tensor<double>>>;

Tensor<double> random_input(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = lo + (hi - lo) * uniform01(rng);
  Tensor<double> t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

// sum(y * w) with fixed random w, so normalized outputs still carry gradient.
Tensor<double> probe_loss(const Tensor<double>& y) {
  std::mt19937_64 rng(99);
  std::vector<double> w(static_cast<std::size_t>(y.numel()));
  for (double& v : w) v = 2.0 * uniform01(rng) - 1.0;
  return sum(mul(y, Tensor<double>(y.shape(), std::move(w))));
}

void fill(Tensor<double> t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

BlockCheck collect(const std::string& block, const std::vector<GradCheckResult>& results, double tol) {
  BlockCheck out;
  out.block = block;
  out.tolerance = tol;
  out.leaves = static_cast<int>(results.size());
  for (const auto& r : results) {
    if (out.worst_leaf.empty() || r.max_rel_error > out.max_rel_error) {
      out.max_rel_error = r.max_rel_error;
      out.worst_leaf = r.name;
    }
  }
  out.passed = !results.empty() && out.max_rel_error <= tol;
  return out;
}

// Blocks are checked at a perturbed point: zero biases from initialization
// sit exactly on ReLU kinks.
BlockCheck check_block(const std::string& block, const ScalarFn<double>& f, ParamStore<double>& store,
                       const Leaves& inputs) {
  perturb_params(store, 77, 0.1);
  return collect(block, finite_diff_check_all<double>(f, gradcheck_leaves(store, inputs)), 1e-5);
}

BlockCheck check_fmcab() {
  ParamStore<double> store(3);
  auto p = FmcabParams<double>::make(store, "fmcab", 4);
  std::mt19937_64 rng(3);
  fill(p.gamma, 1.3);
  fill(p.alpha, 0.7);
  auto x = random_input({1, 4, 6, 6}, rng, -1, 1);
  return check_block("fmcab", [&] { return probe_loss(fmcab_forward(x, p)); }, store, {{"x", x}});
}

BlockCheck check_biffm() {
  ParamStore<double> store(12);
  auto p = BiffmParams<double>::make(store, "biffm", 4, 4, 4);
  std::mt19937_64 rng(12);
  auto d = random_input({1, 4, 4, 4}, rng, -1, 1);
  auto s = random_input({1, 4, 4, 4}, rng, -1, 1);
  return check_block("biffm", [&] { return probe_loss(biffm_forward(d, s, p)); }, store, {{"d", d}, {"s", s}});
}

BlockCheck check_vitm() {
  ParamStore<double> store(19);
  auto p = VitmParams<double>::make(store, "vitm", 4, 3, 3, 2);
  std::mt19937_64 rng(19);
  for (double& v : p.pos_embed.mutable_data()) v = 0.2 * (uniform01(rng) - 0.5);
  auto x = random_input({1, 4, 3, 3}, rng, -1, 1);
  return check_block("vitm", [&] { return probe_loss(vitm_forward(x, p)); }, store, {{"x", x}});
}

// Both the upsampling and the flat variant, reported as one block.
BlockCheck check_frm() {
  std::vector<GradCheckResult> all;
  for (bool upsample : {true, false}) {
    ParamStore<double> store(22);
    auto p = FrmParams<double>::make(store, "frm", 4, 4, upsample);
    std::mt19937_64 rng(22);
    auto x = random_input({1, 4, 3, 3}, rng, -1, 1);
    auto f = [&] {
      std::mt19937_64 mask(5);
      return probe_loss(frm_forward(x, p, {Mode::train, &mask}));
    };
    perturb_params(store, 77, 0.1);
    for (auto r : finite_diff_check_all<double>(f, gradcheck_leaves(store, {{"x", x}}))) {
      r.name = (upsample ? "up." : "flat.") + r.name;
      all.push_back(std::move(r));
    }
  }
  return collect("frm", all, 1e-5);
}

// Whole network at 16x16. Width 4 and batch 3 keep every normalization
// group non-degenerate at the 1x1 deepest stage; entries are strided.
BlockCheck check_model() {
  ModelConfig c;
  c.height = c.width = 16;
  c.encoder_widths = {4, 4, 4, 4};
  c.decoder_widths = {4, 4, 4, 4};
  c.heads = 2;
  c.seed = 3;
  Model<double> m(c);
  perturb_params(m.params(), 5, 0.1);
  std::mt19937_64 rng(6);
  auto x = random_input({3, 3, 16, 16}, rng, 0, 1);
  auto f = [&] {
    std::mt19937_64 mask(9);
    return probe_loss(m.forward(x, {Mode::train, &mask}).f_out);
  };
  return collect("model", finite_diff_check_all<double>(f, gradcheck_leaves(m.params(), {{"x", x}}), 1e-5, 24),
                 1e-4);
}

}  // namespace

const std::vector<std::string>& gradcheck_block_names() {
  static const std::vector<std::string> names = {"fmcab", "biffm", "vitm", "frm", "model"};
  return names;
}

std::vector<BlockCheck> run_gradcheck_suite(const std::string& selection) {
  std::vector<std::string> wanted;
  if (selection == "all") {
    wanted = gradcheck_block_names();
  } else {
    std::stringstream ss(selection);
    for (std::string name; std::getline(ss, name, ',');) {
      const auto& known = gradcheck_block_names();
      if (std::find(known.begin(), known.end(), name) == known.end()) {
        throw ConfigError("gradcheck: unknown block '" + name + "' (expected all, fmcab, biffm, vitm, frm, model)");
      }
      if (std::find(wanted.begin(), wanted.end(), name) == wanted.end()) wanted.push_back(name);
    }
    if (wanted.empty()) throw ConfigError("gradcheck: no blocks selected");
  }
  static const std::vector<std::pair<std::string, std::function<BlockCheck()>>> checks = {
      {"fmcab", check_fmcab}, {"biffm", check_biffm}, {"vitm", check_vitm},
      {"frm", check_frm},     {"model", check_model},
  };
  std::vector<BlockCheck> out;
  for (const auto& [name, run] : checks) {
    if (std::find(wanted.begin(), wanted.end(), name) != wanted.end()) out.push_back(run());
  }
  return out;
}

}  // namespace fmbff
