#include <gtest/gtest.h>

#include "support.hpp"

using namespace modalseg;
using namespace modalseg::testing;

namespace {

// Direct 3x3 stride-1 zero-padded convolution, no im2col.
Tensor<double> naive_conv3x3(const Tensor<double>& x, ConstMatMap<double> w) {
  Tensor<double> y(static_cast<int>(w.rows()), x.n, x.h, x.w);
  for (int co = 0; co < y.c; ++co)
    for (int n = 0; n < x.n; ++n)
      for (int oy = 0; oy < x.h; ++oy)
        for (int ox = 0; ox < x.w; ++ox) {
          double acc = 0;
          for (int ci = 0; ci < x.c; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy + ky - 1, ix = ox + kx - 1;
                if (iy < 0 || ix < 0 || iy >= x.h || ix >= x.w) continue;
                acc += w(co, ci * 9 + ky * 3 + kx) * x.at(ci, n, iy, ix);
              }
          y.at(co, n, oy, ox) = acc;
        }
  return y;
}

TEST(Ops, ConvolutionMatchesDirectLoop) {
  const auto x = random_images<double>(3, 2, 7, 5, 1);
  RowMat<double> w(4, 27);
  Rng rng(2);
  for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
  const ConstMatMap<double> wm(w.data(), 4, 27);
  const auto y = ops::conv2d(x, wm, static_cast<const double*>(nullptr), ops::conv3x3);
  EXPECT_LT(max_abs_diff(y, naive_conv3x3(x, wm)), 1e-12);
}

TEST(Ops, Col2imIsAdjointOfIm2col) {
  // <im2col(x), c> == <x, col2im(c)> for every window geometry used.
  for (auto win : {ops::conv3x3, ops::down3x3, ops::up4x4}) {
    const auto x = random_images<double>(2, 2, 8, 8, 3);
    const RowMat<double> col = ops::im2col(x, win);
    RowMat<double> c(col.rows(), col.cols());
    Rng rng(4);
    for (int i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(-1, 1);
    Tensor<double> back = Tensor<double>::zeros_like(x);
    ops::col2im_add(c, win, back);
    double lhs = 0, rhs = 0;
    for (int i = 0; i < c.size(); ++i) lhs += col.data()[i] * c.data()[i];
    for (std::size_t i = 0; i < x.data.size(); ++i) rhs += x.data[i] * back.data[i];
    EXPECT_NEAR(lhs, rhs, 1e-9) << "k=" << win.k << " stride=" << win.stride;
  }
}

TEST(Ops, SoftmaxProperties) {
  Tensor<double> logits = random_images<double>(4, 2, 3, 3, 5);
  const auto p = ops::softmax_features(logits);
  for (int j = 0; j < p.cols(); ++j) {
    double s = 0;
    for (int k = 0; k < 4; ++k) s += p.data[k * p.cols() + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  Tensor<double> shifted = logits;
  for (int j = 0; j < p.cols(); ++j)
    for (int k = 0; k < 4; ++k) shifted.data[k * p.cols() + j] += 7.5 * (j % 3);
  EXPECT_LT(max_abs_diff(ops::softmax_features(shifted), p), 1e-12);
  const auto u = ops::softmax_features(Tensor<double>(4, 1, 2, 2));
  for (double v : u.data) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(ModelConfig, RejectsSizesNotDivisibleByDepth) {
  ModelConfig m;
  m.height = 100;
  EXPECT_THROW(m.validate(), ConfigError);
  EXPECT_THROW(init_model<float>(m), ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  ModelConfig m;
  m.decoder_widths = {8, 8, 4};
  m.seed = 99;
  EXPECT_EQ(json(m).get<ModelConfig>(), m);
  json j = m;
  j["depth"] = 3;
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
}

TEST(InitModel, DeterministicInSeed) {
  ModelConfig m;
  m.seed = 4;
  EXPECT_EQ(init_model<float>(m).values, init_model<float>(m).values);
  ModelConfig other = m;
  other.seed = 5;
  EXPECT_NE(init_model<float>(m).values, init_model<float>(other).values);
}

TEST(Encoder, DefaultShapeLaw) {
  ModelConfig m;
  const auto p = init_model<float>(m);
  const auto x = random_images<float>(4, 2, 64, 64, 1);
  const auto enc = encode(p, x, ChannelMask::full(4));
  const auto& deep = enc.level(0, 0);
  EXPECT_EQ(deep.c, 64);
  EXPECT_EQ(deep.h, 8);
  EXPECT_EQ(deep.w, 8);
  EXPECT_EQ(enc.level(0, 1).h, 16);
  EXPECT_EQ(enc.level(0, 3).h, 64);
}

TEST(Encoder, ChannelsAreIndependent) {
  const auto cfg = tiny_model_config();
  const auto p = random_model<double>(cfg, 1);
  auto x = random_images<double>(2, 2, 16, 16, 2);
  const auto before = encode(p, x, ChannelMask::full(2));
  for (std::size_t i = 0; i < x.data.size() / 2; ++i) x.data[i] += 0.3;  // channel 0 only
  const auto after = encode(p, x, ChannelMask::full(2));
  for (int i = 0; i <= cfg.levels; ++i) {
    EXPECT_EQ(before.level(1, i).data, after.level(1, i).data);
    EXPECT_NE(before.level(0, i).data, after.level(0, i).data);
  }
}

TEST(Encoder, ZeroImageLeavesOnlyBiasInFirstLayer) {
  const auto cfg = tiny_model_config();
  const auto p = random_model<double>(cfg, 1);
  const auto enc = encode_channel(p, 0, Tensor<double>(1, 1, 16, 16));
  const double* bias = p.ptr(p.layout.encoder[0][0].conv_b);
  const auto& pre = enc.conv_pre[0];
  for (int c = 0; c < pre.c; ++c)
    for (int k = 0; k < pre.plane(); ++k) EXPECT_EQ(pre.data[c * pre.plane() + k], bias[c]);
}

TEST(Decoder, StageResolutionsDouble) {
  ModelConfig m;
  const auto p = init_model<float>(m);
  const auto pred = forward(p, random_images<float>(4, 1, 64, 64, 3), ChannelMask::full(4));
  ASSERT_EQ(pred.stages(), 3);
  EXPECT_EQ(pred.probs[0].h, 16);
  EXPECT_EQ(pred.probs[1].h, 32);
  EXPECT_EQ(pred.probs[2].h, 64);
  EXPECT_EQ(pred.probs[2].w, 64);
  EXPECT_EQ(pred.probs[2].c, 4);
  for (const auto& probs : pred.probs)
    for (int j = 0; j < probs.cols(); ++j) {
      double s = 0;
      for (int k = 0; k < probs.c; ++k) s += probs.data[k * probs.cols() + j];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(Decoder, ForwardIsDeterministic) {
  const auto cfg = tiny_model_config();
  const auto p = random_model<double>(cfg, 8);
  const auto x = random_images<double>(2, 2, 16, 16, 9);
  const auto a = forward(p, x, ChannelMask::full(2));
  const auto b = forward(p, x, ChannelMask::full(2));
  EXPECT_EQ(max_prediction_diff(a, b), 0.0);
}

TEST(Fusion, SingleChannelMaskIsThatChannelsTerm) {
  ModelConfig cfg = tiny_model_config();
  cfg.channels = 4;
  const auto p = random_model<double>(cfg, 3);
  const auto x = random_images<double>(4, 2, 16, 16, 4);
  const auto enc = encode(p, x, ChannelMask::full(4));
  const auto f0 = fuse_bottleneck(p, enc, ChannelMask::only(4, 2));
  EXPECT_LT(max_abs_diff(f0, naive_conv3x3(enc.level(2, 0), p(p.layout.fuse[2]))), 1e-12);
}

TEST(Fusion, FullMaskSumsEveryChannel) {
  ModelConfig cfg = tiny_model_config();
  cfg.channels = 4;
  const auto p = random_model<double>(cfg, 3);
  const auto enc = encode(p, random_images<double>(4, 2, 16, 16, 4), ChannelMask::full(4));
  Tensor<double> want = naive_conv3x3(enc.level(0, 0), p(p.layout.fuse[0]));
  for (int c = 1; c < 4; ++c) add_into(want, naive_conv3x3(enc.level(c, 0), p(p.layout.fuse[c])));
  EXPECT_LT(max_abs_diff(fuse_bottleneck(p, enc, ChannelMask::full(4)), want), 1e-12);
}

// Sum over the C single-drop bottlenecks equals (C-1) times the full one.
TEST(Fusion, DropSumLinearity) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelConfig cfg = tiny_model_config();
    cfg.channels = 4;
    const auto p = random_model<double>(cfg, seed);
    const auto enc = encode(p, random_images<double>(4, 2, 16, 16, seed + 100), ChannelMask::full(4));
    const auto full = fuse_bottleneck(p, enc, ChannelMask::full(4));
    Tensor<double> sum = Tensor<double>::zeros_like(full);
    for (int c = 0; c < 4; ++c) add_into(sum, fuse_bottleneck(p, enc, ChannelMask::without(4, c)));
    EXPECT_LT(max_abs_diff(sum, scaled(full, 3.0)), 1e-10);
  }
}

// Masked forward equals forward with that channel's encoder outputs replaced by zeros.
TEST(Masking, EqualsZeroingTheChannel) {
  ModelConfig cfg = tiny_model_config();
  cfg.channels = 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = random_model<double>(cfg, seed);
    const auto x = random_images<double>(4, 2, 16, 16, seed + 7);
    for (int c = 0; c < 4; ++c) {
      const auto mask = ChannelMask::without(4, c);
      const auto masked = decode(p, encode(p, x, ChannelMask::full(4)), mask);
      auto zeroed_enc = encode(p, x, ChannelMask::full(4));
      zeroed_enc.zero_channel(c);
      const auto zeroed = decode(p, zeroed_enc, ChannelMask::full(4));
      EXPECT_LT(max_prediction_diff(masked, zeroed), 1e-10);
      // Encoding only the available channels gives the same answer too.
      EXPECT_LT(max_prediction_diff(forward(p, x, mask), masked), 1e-10);
    }
  }
}

TEST(Masking, SinglePrecisionWithinTolerance) {
  ModelConfig cfg;
  const auto p = init_model<float>(cfg);
  const auto x = random_images<float>(4, 1, 64, 64, 3);
  auto enc = encode(p, x, ChannelMask::full(4));
  const auto masked = decode(p, enc, ChannelMask::without(4, 3));
  enc.zero_channel(3);
  EXPECT_LT(max_prediction_diff(masked, decode(p, enc, ChannelMask::full(4))), 1e-4);
}

TEST(Masking, EmptyMaskRejected) {
  const auto cfg = tiny_model_config();
  const auto p = random_model<double>(cfg, 1);
  const ChannelMask none{std::vector<bool>(2, false)};
  EXPECT_THROW(forward(p, random_images<double>(2, 1, 16, 16, 1), none), ConfigError);
}

}  // namespace
