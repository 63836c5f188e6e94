#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include "fmbff/blocks.hpp"

namespace fmbff {

// Which encoder skip each decoder block fuses: the deepest aggregated skip
// for every block, or the skip at the matching stride.
enum class SkipMode { literal_s4, stage_matched };

struct ModelConfig {
  Index in_channels = 3;
  Index height = 64, width = 64;
  std::array<Index, 4> encoder_widths{16, 32, 64, 128};
  std::array<Index, 4> decoder_widths{128, 64, 32, 16};
  Index heads = 4;
  Index fmcab_reduction = 4;
  double p_exponent = 1.0;
  bool fm_relu = false;
  Index shuffle_groups = 4;
  double frm_dropout = 0.5;
  // Running-statistics update rate of every batch-norm layer.
  double bn_momentum = 0.3;
  SkipMode skip_mode = SkipMode::literal_s4;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending config key.
  void validate() const;

  // Channel width of aggregated skip s_{stage+1} (cumulative encoder widths).
  Index skip_width(int stage) const;
  // Channel width of decoder block `block`'s output.
  Index decoder_out_width(int block) const;
};

template <typename T>
struct EncoderOutput {
  std::array<Tensor<T>, 4> stages;  // B1..B4
  std::array<Tensor<T>, 4> skips;   // s1..s4
};

template <typename T>
struct ForwardTrace {
  std::array<Tensor<T>, 4> stages;
  std::array<Tensor<T>, 4> skips;
  Tensor<T> f_enc;
  std::array<Tensor<T>, 4> decoder;
  Tensor<T> f_out;  // N x 1 x H x W, values in (0,1)
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  std::int64_t param_count() const { return store_.param_count(); }

  EncoderOutput<T> encode(const Tensor<T>& x, const RunContext<T>& ctx) const;
  ForwardTrace<T> forward(const Tensor<T>& x, const RunContext<T>& ctx) const;

  // Eval-mode mask probabilities without building a graph.
  Tensor<T> predict(const Tensor<T>& x) const;

 private:
  struct Stage {
    Conv2d<T> conv1;
    BatchNorm<T> bn1;
    Conv2d<T> conv2;
    BatchNorm<T> bn2;
  };
  struct DecoderBlock {
    std::optional<Conv2d<T>> entry;
    FrmParams<T> frm_up;
    BiffmParams<T> biffm;
    FrmParams<T> frm;
  };

  ModelConfig cfg_;
  ParamStore<T> store_;
  std::array<Stage, 4> stages_;
  std::array<FmcabParams<T>, 4> fmcab_;
  VitmParams<T> vitm_;
  std::array<DecoderBlock, 4> decoder_;
  Conv2d<T> head_;
};

template <typename T>
std::int64_t param_count(const Model<T>& m) {
  return m.param_count();
}

}  // namespace fmbff
