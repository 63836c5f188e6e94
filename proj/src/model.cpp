#include "fmbff/model.hpp"

namespace fmbff {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw ConfigError(key + ": " + why);
}

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1) bad("model.in_channels", "must be positive");
  if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0) {
    bad("model.input_size", std::to_string(height) + "x" + std::to_string(width) +
                                " is not a positive multiple of 16");
  }
  for (Index w : encoder_widths)
    if (w < 1) bad("model.encoder_widths", "widths must be positive");
  for (Index w : decoder_widths)
    if (w < 1) bad("model.decoder_widths", "widths must be positive");
  const Index c = encoder_widths[3];
  if (heads < 1 || c % heads != 0) {
    bad("model.heads", std::to_string(heads) + " does not divide bottleneck width " + std::to_string(c));
  }
  if (c % 2 != 0) bad("model.encoder_widths", "bottleneck width must be even");
  if (fmcab_reduction < 1) bad("model.fmcab_reduction", "must be positive");
  if (!(p_exponent > 0)) bad("model.p_exponent", "must be > 0");
  if (shuffle_groups < 1) bad("model.shuffle_groups", "must be positive");
  for (Index w : decoder_widths)
    if ((2 * w) % shuffle_groups != 0) {
      bad("model.shuffle_groups", std::to_string(shuffle_groups) + " does not divide " +
                                      std::to_string(2 * w) + " fused channels");
    }
  if (!(frm_dropout >= 0 && frm_dropout < 1)) bad("model.frm_dropout", "must be in [0, 1)");
  if (!(bn_momentum > 0 && bn_momentum <= 1)) bad("model.bn_momentum", "must be in (0, 1]");
}

Index ModelConfig::skip_width(int stage) const {
  Index w = 0;
  for (int i = 0; i <= stage; ++i) w += encoder_widths[i];
  return w;
}

Index ModelConfig::decoder_out_width(int block) const {
  const Index in = block == 0 ? encoder_widths[3] : decoder_widths[block];
  // frm (Cout + 2C) + up-branch (Cout + Cin), with Cout = C = decoder width
  return in + 4 * decoder_widths[block];
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg), store_(cfg.seed) {
  cfg_.validate();
  const auto& ew = cfg_.encoder_widths;
  const auto& dw = cfg_.decoder_widths;

  Index cin = cfg_.in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string name = "enc" + std::to_string(i + 1);
    // No conv bias: train-mode batch norm cancels it.
    stages_[i].conv1 = Conv2d<T>::make(store_, name + ".conv1", cin, ew[i], 3, 3, 1, false);
    stages_[i].bn1 = BatchNorm<T>::make(store_, name + ".bn1", ew[i], cfg_.bn_momentum);
    stages_[i].conv2 = Conv2d<T>::make(store_, name + ".conv2", ew[i], ew[i], 3, 3, 1, false);
    stages_[i].bn2 = BatchNorm<T>::make(store_, name + ".bn2", ew[i], cfg_.bn_momentum);
    fmcab_[i] = FmcabParams<T>::make(store_, "fmcab" + std::to_string(i + 1), ew[i],
                                     cfg_.fmcab_reduction, cfg_.p_exponent, cfg_.fm_relu);
    cin = ew[i];
  }

  vitm_ = VitmParams<T>::make(store_, "vitm", ew[3], cfg_.height / 16, cfg_.width / 16, cfg_.heads);

  Index prev = ew[3];
  for (int i = 0; i < 4; ++i) {
    const std::string name = "dec" + std::to_string(i + 1);
    DecoderBlock& b = decoder_[i];
    Index in = prev;
    if (i > 0) {
      b.entry = Conv2d<T>::make(store_, name + ".entry", prev, dw[i], 1, 1);
      in = dw[i];
    }
    b.frm_up = FrmParams<T>::make(store_, name + ".frm_up", in, dw[i], true, cfg_.frm_dropout, cfg_.bn_momentum);
    const int skip = cfg_.skip_mode == SkipMode::literal_s4 ? 3 : 3 - i;
    b.biffm = BiffmParams<T>::make(store_, name + ".biffm", b.frm_up.out_channels(),
                                   cfg_.skip_width(skip), dw[i], cfg_.shuffle_groups);
    b.frm = FrmParams<T>::make(store_, name + ".frm", 2 * dw[i], dw[i], false, cfg_.frm_dropout, cfg_.bn_momentum);
    prev = b.frm.out_channels() + b.frm_up.out_channels();
  }
  head_ = Conv2d<T>::make(store_, "head", prev, 1, 1, 1);
}

template <typename T>
EncoderOutput<T> Model<T>::encode(const Tensor<T>& x, const RunContext<T>& ctx) const {
  if (x.rank() != 4) throw DimensionError("model: expected N x C x H x W input, got " + shape_str(x.shape()));
  if (x.dim(1) != cfg_.in_channels) {
    throw DimensionError("model: axis 1 has " + std::to_string(x.dim(1)) + " channels, expected " +
                         std::to_string(cfg_.in_channels));
  }
  if (x.dim(2) != cfg_.height || x.dim(3) != cfg_.width) {
    throw DimensionError("model: input " + shape_str(x.shape()) + " does not match configured " +
                         std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
  }
  EncoderOutput<T> out;
  Tensor<T> h = x;
  for (int i = 0; i < 4; ++i) {
    const Stage& s = stages_[i];
    h = relu(s.bn1(s.conv1(h), ctx.mode));
    h = relu(s.bn2(s.conv2(h), ctx.mode));
    h = max_pool2x2(h);
    out.stages[i] = h;
    Tensor<T> att = fmcab_forward(h, fmcab_[i], ctx);
    out.skips[i] = i == 0 ? att : concat<T>({att, max_pool2x2(out.skips[i - 1])}, 1);
  }
  return out;
}

template <typename T>
ForwardTrace<T> Model<T>::forward(const Tensor<T>& x, const RunContext<T>& ctx) const {
  EncoderOutput<T> enc = encode(x, ctx);
  ForwardTrace<T> t;
  t.stages = enc.stages;
  t.skips = enc.skips;
  t.f_enc = vitm_forward(enc.stages[3], vitm_, ctx);

  Tensor<T> prev = t.f_enc;
  for (int i = 0; i < 4; ++i) {
    const DecoderBlock& b = decoder_[i];
    if (b.entry) prev = (*b.entry)(prev);
    Tensor<T> u = frm_forward(prev, b.frm_up, ctx);
    const Tensor<T>& skip = cfg_.skip_mode == SkipMode::literal_s4 ? enc.skips[3] : enc.skips[3 - i];
    Tensor<T> fused = biffm_forward(u, skip, b.biffm, ctx);
    Tensor<T> refined = frm_forward(fused, b.frm, ctx);
    t.decoder[i] = concat<T>({refined, bilinear_resize(u, refined.dim(2), refined.dim(3))}, 1);
    prev = t.decoder[i];
  }
  t.f_out = sigmoid(head_(prev));
  return t;
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& x) const {
  NoGradGuard guard;
  return forward(x, {Mode::eval}).f_out;
}

template class Model<float>;
template class Model<double>;

}  // namespace fmbff
