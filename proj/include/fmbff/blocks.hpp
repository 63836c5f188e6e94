#pragma once

#include <string>

#include "fmbff/layers.hpp"

namespace fmbff {

// Convolutional attention block with a focal-modulation unit.
template <typename T>
struct FmcabParams {
  Index channels = 0;
  LayerNorm<T> ln;
  Conv2d<T> conv3a, conv1a;
  Conv2d<T> se_reduce, se_expand;
  Conv2d<T> fm_gate;
  Conv2d<T> branch_conv3;
  LayerNorm<T> branch_ln;
  Conv2d<T> branch_conv1;
  Tensor<T> gamma;  // scalar
  Tensor<T> alpha;  // scalar
  double p_exponent = 1.0;
  // Rectify the pooled descriptor before the gate conv. Off by default:
  // GAP - GMP <= 0, so with alpha > 0 the rectifier zeroes it and the gate
  // stops depending on the input.
  bool fm_relu = false;

  static FmcabParams make(ParamStore<T>& store, const std::string& prefix, Index channels,
                          Index reduction = 4, double p_exponent = 1.0, bool fm_relu = false);
};

template <typename T>
Tensor<T> fmcab_forward(const Tensor<T>& x, const FmcabParams<T>& p, const RunContext<T>& ctx = {});

template <typename T>
Tensor<T> focal_modulation(const Tensor<T>& i2, const FmcabParams<T>& p,
                           const RunContext<T>& ctx = {});

// Gated fusion of a decoder feature with a (resized) skip feature.
template <typename T>
struct BiffmParams {
  Index width = 0;  // C; output has 2C channels
  Index shuffle_groups = 4;
  Conv2d<T> proj_a, proj_b;
  LayerNorm<T> norm_a, norm_b;  // keep the fused product near unit scale
  Conv2d<T> gap1x1_a, gap1x1_b;
  Conv2d<T> path1_1x1, path1_3x1, path1_1x3;
  Conv2d<T> path2_in_1x1, path2_out_1x1;

  static BiffmParams make(ParamStore<T>& store, const std::string& prefix, Index decoder_channels,
                          Index skip_channels, Index width, Index shuffle_groups = 4);
};

template <typename T>
Tensor<T> biffm_forward(const Tensor<T>& d, const Tensor<T>& s, const BiffmParams<T>& p,
                        const RunContext<T>& ctx = {});

// Channel (TSA) and spatial (GSA) self-attention with a residual fuse.
template <typename T>
struct VitmParams {
  Index channels = 0, height = 0, width = 0, heads = 1;
  Conv2d<T> wq, wk, wv;
  Tensor<T> pos_embed;  // (H*W) x C
  Conv2d<T> gsa_embed_c, gsa_embed_half;
  Conv2d<T> fuse_1x1;

  static VitmParams make(ParamStore<T>& store, const std::string& prefix, Index channels,
                         Index height, Index width, Index heads = 4);
};

template <typename T>
Tensor<T> tsa_forward(const Tensor<T>& x, const VitmParams<T>& p, const RunContext<T>& ctx = {});
template <typename T>
Tensor<T> gsa_forward(const Tensor<T>& x, const VitmParams<T>& p, const RunContext<T>& ctx = {});
template <typename T>
Tensor<T> vitm_forward(const Tensor<T>& x, const VitmParams<T>& p, const RunContext<T>& ctx = {});

// Feature reconstruction: BN(relu(dws(dropout(up(x))))) concatenated with up(x).
template <typename T>
struct FrmParams {
  DwsConv<T> dws;
  BatchNorm<T> bn;
  bool upsample = true;
  double dropout = 0.5;

  Index in_channels() const { return dws.depthwise.in_channels(); }
  Index out_channels() const { return dws.pointwise.out_channels() + in_channels(); }

  static FrmParams make(ParamStore<T>& store, const std::string& prefix, Index cin, Index cout,
                        bool upsample, double dropout = 0.5, double bn_momentum = 0.1);
};

template <typename T>
Tensor<T> frm_forward(const Tensor<T>& x, const FrmParams<T>& p, const RunContext<T>& ctx = {});

}  // namespace fmbff
