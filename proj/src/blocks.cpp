#include "fmbff/blocks.hpp"

#include <cmath>

namespace fmbff {

namespace {

template <typename T>
void expect_channels(const char* op, const Tensor<T>& x, Index channels) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": expected N x C x H x W, got " + shape_str(x.shape()));
  if (x.dim(1) != channels) {
    throw DimensionError(std::string(op) + ": axis 1 has " + std::to_string(x.dim(1)) +
                         " channels, expected " + std::to_string(channels));
  }
}

template <typename T>
void record(const RunContext<T>& ctx, const std::string& name, const Tensor<T>& t, bool attention) {
  if (!ctx.probe) return;
  (attention ? ctx.probe->attention : ctx.probe->gates).emplace_back(name, t);
}

}  // namespace

// ---- FMCAB ----

template <typename T>
FmcabParams<T> FmcabParams<T>::make(ParamStore<T>& store, const std::string& prefix, Index c,
                                    Index reduction, double p_exponent, bool fm_relu) {
  if (c < 1 || reduction < 1) throw ConfigError(prefix + ": channels and reduction must be positive");
  if (!(p_exponent > 0)) throw ConfigError(prefix + ": p_exponent must be > 0");
  const Index cr = std::max<Index>(1, c / reduction);
  FmcabParams p;
  p.channels = c;
  p.ln = LayerNorm<T>::make(store, prefix + ".ln", c);
  p.conv3a = Conv2d<T>::make(store, prefix + ".conv3a", c, c, 3, 3);
  p.conv1a = Conv2d<T>::make(store, prefix + ".conv1a", c, c, 1, 1);
  p.se_reduce = Conv2d<T>::make(store, prefix + ".se_reduce", c, cr, 1, 1);
  p.se_expand = Conv2d<T>::make(store, prefix + ".se_expand", cr, c, 1, 1);
  p.fm_gate = Conv2d<T>::make(store, prefix + ".fm_gate", c, c, 1, 1);
  p.branch_conv3 = Conv2d<T>::make(store, prefix + ".branch_conv3", c, c, 3, 3);
  p.branch_ln = LayerNorm<T>::make(store, prefix + ".branch_ln", c);
  p.branch_conv1 = Conv2d<T>::make(store, prefix + ".branch_conv1", c, c, 1, 1);
  p.gamma = store.add(prefix + ".gamma", {1}, Init::ones);
  p.alpha = store.add(prefix + ".alpha", {1}, Init::ones);
  p.p_exponent = p_exponent;
  p.fm_relu = fm_relu;
  return p;
}

template <typename T>
Tensor<T> focal_modulation(const Tensor<T>& i2, const FmcabParams<T>& p, const RunContext<T>& ctx) {
  expect_channels("focal_modulation", i2, p.channels);
  Tensor<T> d = mul(sub(global_avg_pool(i2), global_max_pool(i2)), p.alpha);
  if (p.fm_relu) d = relu(d);
  Tensor<T> gate = sigmoid(p.fm_gate(d));
  record(ctx, "fmcab.fm_gate", gate, false);
  return mul(mul(i2, gate), pow_scalar(p.gamma, static_cast<T>(p.p_exponent)));
}

template <typename T>
Tensor<T> fmcab_forward(const Tensor<T>& x, const FmcabParams<T>& p, const RunContext<T>& ctx) {
  expect_channels("fmcab", x, p.channels);
  Tensor<T> i1 = relu(p.conv1a(p.conv3a(p.ln(x))));
  Tensor<T> se = sigmoid(p.se_expand(relu(global_avg_pool(relu(p.se_reduce(i1))))));
  record(ctx, "fmcab.se_gate", se, false);
  Tensor<T> i2 = mul(i1, se);
  Tensor<T> out = focal_modulation(i2, p, ctx);
  out = add(out, p.branch_ln(p.branch_conv3(x)));
  out = add(out, p.branch_conv1(gelu(x)));
  return add(out, i1);
}

// ---- BiFFM ----

template <typename T>
BiffmParams<T> BiffmParams<T>::make(ParamStore<T>& store, const std::string& prefix, Index cd,
                                    Index cs, Index c, Index groups) {
  if (c < 1) throw ConfigError(prefix + ": width must be positive");
  if (groups < 1 || (2 * c) % groups != 0) {
    throw ConfigError(prefix + ": shuffle_groups " + std::to_string(groups) +
                      " does not divide " + std::to_string(2 * c) + " channels");
  }
  BiffmParams p;
  p.width = c;
  p.shuffle_groups = groups;
  p.proj_a = Conv2d<T>::make(store, prefix + ".proj_a", cd, c, 1, 1);
  p.proj_b = Conv2d<T>::make(store, prefix + ".proj_b", cs, c, 1, 1);
  p.norm_a = LayerNorm<T>::make(store, prefix + ".norm_a", c);
  p.norm_b = LayerNorm<T>::make(store, prefix + ".norm_b", c);
  p.gap1x1_a = Conv2d<T>::make(store, prefix + ".gap1x1_a", c, c, 1, 1);
  p.gap1x1_b = Conv2d<T>::make(store, prefix + ".gap1x1_b", c, c, 1, 1);
  p.path1_1x1 = Conv2d<T>::make(store, prefix + ".path1_1x1", 2 * c, c, 1, 1);
  p.path1_3x1 = Conv2d<T>::make(store, prefix + ".path1_3x1", c, c, 3, 1);
  p.path1_1x3 = Conv2d<T>::make(store, prefix + ".path1_1x3", c, c, 1, 3);
  p.path2_in_1x1 = Conv2d<T>::make(store, prefix + ".path2_in_1x1", 2 * c, 2 * c, 1, 1);
  p.path2_out_1x1 = Conv2d<T>::make(store, prefix + ".path2_out_1x1", 2 * c, c, 1, 1);
  return p;
}

template <typename T>
Tensor<T> biffm_forward(const Tensor<T>& d, const Tensor<T>& s, const BiffmParams<T>& p,
                        const RunContext<T>& ctx) {
  expect_channels("biffm(d)", d, p.proj_a.in_channels());
  expect_channels("biffm(s)", s, p.proj_b.in_channels());
  if ((2 * p.width) % p.shuffle_groups != 0) {
    throw ConfigError("biffm: shuffle_groups does not divide " + std::to_string(2 * p.width));
  }
  // Project and normalize the skip at its own (usually smaller) resolution,
  // then resize; a 1x1 projection commutes with bilinear resizing.
  Tensor<T> pd = p.norm_a(p.proj_a(d));
  Tensor<T> ps = bilinear_resize(p.norm_b(p.proj_b(s)), d.dim(2), d.dim(3));

  Tensor<T> x = concat<T>({relu(p.gap1x1_a(global_avg_pool(pd))),
                           relu(p.gap1x1_b(global_avg_pool(ps)))}, 1);
  Tensor<T> g1 = sigmoid(relu(p.path1_1x3(relu(p.path1_3x1(relu(p.path1_1x1(x)))))));
  Tensor<T> g2 = sigmoid(relu(p.path2_out_1x1(channel_shuffle(relu(p.path2_in_1x1(x)), p.shuffle_groups))));
  record(ctx, "biffm.gate1", g1, false);
  record(ctx, "biffm.gate2", g2, false);

  Tensor<T> fused = mul(pd, ps);
  return concat<T>({mul(fused, g1), mul(fused, g2)}, 1);
}

// ---- ViTM ----

template <typename T>
VitmParams<T> VitmParams<T>::make(ParamStore<T>& store, const std::string& prefix, Index c,
                                  Index h, Index w, Index heads) {
  if (heads < 1 || c % heads != 0) {
    throw ConfigError(prefix + ": channels " + std::to_string(c) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (c % 2 != 0) throw ConfigError(prefix + ": channels must be even, got " + std::to_string(c));
  if (h < 1 || w < 1) throw ConfigError(prefix + ": empty spatial extent");
  VitmParams p;
  p.channels = c;
  p.height = h;
  p.width = w;
  p.heads = heads;
  p.wq = Conv2d<T>::make(store, prefix + ".wq", c, c, 1, 1);
  p.wk = Conv2d<T>::make(store, prefix + ".wk", c, c, 1, 1);
  p.wv = Conv2d<T>::make(store, prefix + ".wv", c, c, 1, 1);
  p.pos_embed = store.add(prefix + ".pos_embed", {h * w, c}, Init::zeros);
  p.gsa_embed_c = Conv2d<T>::make(store, prefix + ".gsa_embed_c", c, c, 1, 1);
  p.gsa_embed_half = Conv2d<T>::make(store, prefix + ".gsa_embed_half", c, c / 2, 1, 1);
  p.fuse_1x1 = Conv2d<T>::make(store, prefix + ".fuse_1x1", 2 * c, c, 1, 1);
  return p;
}

template <typename T>
Tensor<T> tsa_forward(const Tensor<T>& x, const VitmParams<T>& p, const RunContext<T>& ctx) {
  expect_channels("tsa", x, p.channels);
  const Index n = x.dim(0), c = p.channels, h = x.dim(2), w = x.dim(3), hw = h * w;
  if (h * w != p.pos_embed.dim(0)) {
    throw ConfigError("tsa: pos_embed covers " + std::to_string(p.pos_embed.dim(0)) +
                      " positions, input has " + std::to_string(hw));
  }
  const Index ch = c / p.heads;
  Tensor<T> pos = permute(reshape(p.pos_embed, {1, h, w, c}), {0, 3, 1, 2});
  Tensor<T> tokens = add(x, pos);
  // Heads are contiguous channel groups: (N*heads) x ch x HW.
  const Shape split{n * p.heads, ch, hw};
  Tensor<T> q = reshape(p.wq(tokens), split);
  Tensor<T> k = reshape(p.wk(tokens), split);
  Tensor<T> v = reshape(p.wv(tokens), split);
  Tensor<T> s = softmax(mul_scalar(bmm(k, transpose(q)), static_cast<T>(1.0 / std::sqrt(double(ch)))), 2);
  record(ctx, "tsa.S", s, true);
  return reshape(bmm(s, v), {n, c, h, w});
}

template <typename T>
Tensor<T> gsa_forward(const Tensor<T>& x, const VitmParams<T>& p, const RunContext<T>& ctx) {
  expect_channels("gsa", x, p.channels);
  const Index n = x.dim(0), c = p.channels, h = x.dim(2), w = x.dim(3), hw = h * w;
  const Index half = c / 2;
  Tensor<T> fc = reshape(p.gsa_embed_c(x), {n, c, hw});
  Tensor<T> fh = reshape(p.gsa_embed_half(x), {n, half, hw});
  Tensor<T> s = softmax(mul_scalar(bmm(transpose(fh), fh), static_cast<T>(1.0 / std::sqrt(double(half)))), 2);
  record(ctx, "gsa.S", s, true);
  // (S * Fc^T)^T == Fc * S^T
  return reshape(bmm(fc, transpose(s)), {n, c, h, w});
}

template <typename T>
Tensor<T> vitm_forward(const Tensor<T>& x, const VitmParams<T>& p, const RunContext<T>& ctx) {
  Tensor<T> both = concat<T>({tsa_forward(x, p, ctx), gsa_forward(x, p, ctx)}, 1);
  return add(p.fuse_1x1(both), x);
}

// ---- FRM ----

template <typename T>
FrmParams<T> FrmParams<T>::make(ParamStore<T>& store, const std::string& prefix, Index cin,
                                Index cout, bool upsample, double dropout, double bn_momentum) {
  if (cin < 1 || cout < 1) throw ConfigError(prefix + ": channels must be positive");
  FrmParams p;
  p.dws = DwsConv<T>::make(store, prefix + ".dws", cin, cout);
  p.bn = BatchNorm<T>::make(store, prefix + ".bn", cout, bn_momentum);
  p.upsample = upsample;
  p.dropout = dropout;
  return p;
}

template <typename T>
Tensor<T> frm_forward(const Tensor<T>& x, const FrmParams<T>& p, const RunContext<T>& ctx) {
  expect_channels("frm", x, p.in_channels());
  const Index f = p.upsample ? 2 : 1;
  Tensor<T> up = bilinear_resize(x, x.dim(2) * f, x.dim(3) * f);
  Tensor<T> branch = p.bn(relu(p.dws(dropout(up, p.dropout, ctx.mode, ctx.rng))), ctx.mode);
  return concat<T>({branch, up}, 1);
}

#define FMBFF_INSTANTIATE_BLOCKS(T)                                                                \
  template struct FmcabParams<T>;                                                                  \
  template struct BiffmParams<T>;                                                                  \
  template struct VitmParams<T>;                                                                   \
  template struct FrmParams<T>;                                                                    \
  template Tensor<T> fmcab_forward(const Tensor<T>&, const FmcabParams<T>&, const RunContext<T>&); \
  template Tensor<T> focal_modulation(const Tensor<T>&, const FmcabParams<T>&,                     \
                                      const RunContext<T>&);                                       \
  template Tensor<T> biffm_forward(const Tensor<T>&, const Tensor<T>&, const BiffmParams<T>&,      \
                                   const RunContext<T>&);                                          \
  template Tensor<T> tsa_forward(const Tensor<T>&, const VitmParams<T>&, const RunContext<T>&);    \
  template Tensor<T> gsa_forward(const Tensor<T>&, const VitmParams<T>&, const RunContext<T>&);    \
  template Tensor<T> vitm_forward(const Tensor<T>&, const VitmParams<T>&, const RunContext<T>&);    \
  template Tensor<T> frm_forward(const Tensor<T>&, const FrmParams<T>&, const RunContext<T>&);

FMBFF_INSTANTIATE_BLOCKS(float)
FMBFF_INSTANTIATE_BLOCKS(double)

}  // namespace fmbff
