#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "odics/model.hpp"
#include "odics/rng.hpp"

using namespace odics;

namespace {

ModelConfig small(std::size_t classes = 4, std::uint64_t seed = 3) {
  ModelConfig c;
  c.hidden_channels = 5;
  c.num_classes = classes;
  c.init_seed = seed;
  return c;
}

Tensor<double> images(std::size_t n, std::size_t hw, std::uint64_t seed) {
  Tensor<double> t({n, 3, hw, hw});
  Rng rng(seed);
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

LabeledBatch<double> batch(std::size_t classes, std::size_t n, std::size_t hw, std::uint64_t seed) {
  LabeledBatch<double> b{images(n, hw, seed), LabelTensor({n, hw, hw}), 255};
  Rng rng(seed + 1);
  for (auto& v : b.labels.values())
    v = rng.uniform() < 0.2 ? 255 : static_cast<std::int32_t>(rng.uniform_int(0, static_cast<std::int64_t>(classes) - 1));
  return b;
}

// Independent straight-line evaluation of conv → relu → conv → relu → conv,
// one output pixel at a time.
double reference_logit(const ParamSet<double>& p, const Tensor<double>& x, std::size_t n, std::size_t cls,
                       std::size_t y, std::size_t xpos) {
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  auto layer = [&](auto&& self, std::size_t l, std::size_t ch, long i, long j) -> double {
    if (i < 0 || j < 0 || i >= H || j >= W) return 0.0;
    const auto& k = p[2 * l];
    double s = p[2 * l + 1][ch];
    for (std::size_t c = 0; c < k.dim(1); ++c)
      for (long u = -1; u <= 1; ++u)
        for (long v = -1; v <= 1; ++v) {
          double in;
          if (l == 0) {
            const long yy = i + u, xx = j + v;
            in = (yy < 0 || xx < 0 || yy >= H || xx >= W)
                     ? 0.0
                     : x.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          } else {
            const long yy = i + u, xx = j + v;
            in = (yy < 0 || xx < 0 || yy >= H || xx >= W) ? 0.0 : std::max(0.0, self(self, l - 1, c, yy, xx));
          }
          s += k.at(ch, c, static_cast<std::size_t>(u + 1), static_cast<std::size_t>(v + 1)) * in;
        }
    return s;
  };
  return layer(layer, 2, cls, static_cast<long>(y), static_cast<long>(xpos));
}

}  // namespace

TEST(InitModel, DeterministicInSeed) {
  EXPECT_EQ(init_model<double>(small()), init_model<double>(small()));
  EXPECT_FALSE(init_model<double>(small(4, 3)) == init_model<double>(small(4, 4)));
}

TEST(InitModel, ParameterCountMatchesLayerShapes) {
  ModelConfig c;  // 3 -> 16 -> 16 -> 8, 3x3
  c.num_classes = 8;
  const std::size_t hand = (9 * 3 * 16 + 16) + (9 * 16 * 16 + 16) + (9 * 16 * 8 + 8);
  EXPECT_EQ(hand, 3928u);
  EXPECT_EQ(init_model<double>(c).total_size(), hand);
  EXPECT_EQ(parameter_count(c), hand);
}

TEST(InitModel, BiasesZeroWeightsScaled) {
  const auto p = init_model<double>(ModelConfig{});
  for (std::size_t i = 1; i < p.count(); i += 2)
    for (auto v : p[i].values()) EXPECT_EQ(v, 0.0);
  double ss = 0.0;
  for (auto v : p[2].values()) ss += v * v;
  const double var = ss / static_cast<double>(p[2].size());
  EXPECT_NEAR(var, 2.0 / (16 * 9), 0.3 * 2.0 / (16 * 9));
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.kernel_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Forward, ZeroWeightsGiveFinalBias) {
  auto p = init_model<double>(small());
  for (std::size_t i = 0; i < p.count(); ++i) p[i].fill(0.0);
  auto& bias = p[p.count() - 1];
  for (std::size_t c = 0; c < bias.size(); ++c) bias[c] = 0.5 * static_cast<double>(c) - 1.0;
  const auto lg = forward(p, images(2, 4, 1));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(lg.at(n, c, y, x), bias[c]);
}

TEST(Forward, IdenticalImagesGiveIdenticalLogits) {
  const auto p = init_model<double>(small());
  auto x = images(2, 6, 2);
  for (std::size_t i = 0; i < x.size() / 2; ++i) x[x.size() / 2 + i] = x[i];
  const auto lg = forward(p, x);
  const std::size_t half = lg.size() / 2;
  for (std::size_t i = 0; i < half; ++i) EXPECT_EQ(lg[i], lg[half + i]);
}

TEST(Forward, MatchesStraightLineReimplementation) {
  auto p = init_model<double>(small());
  Rng rng(9);
  for (std::size_t i = 0; i < p.count(); ++i)
    for (auto& v : p[i].values()) v += 0.1 * rng.normal();
  const auto x = images(2, 5, 3);
  const auto lg = forward(p, x);
  ASSERT_EQ(lg.shape(), (Shape{2, 4, 5, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t xx = 0; xx < 5; ++xx) EXPECT_NEAR(lg.at(n, c, y, xx), reference_logit(p, x, n, c, y, xx), 1e-10);
}

TEST(Forward, ChannelMismatchIsConfigError) {
  const auto p = init_model<double>(small());
  EXPECT_THROW(forward(p, Tensor<double>({1, 2, 4, 4})), ConfigError);
}

TEST(Predict, ArgmaxAndTies) {
  Tensor<double> lg({1, 3, 1, 3}, std::vector<double>{1, 0, 2, 5, 0, 2, 3, 0, 2});
  const auto m = argmax_classes(lg);
  EXPECT_EQ(m[0], 1);
  EXPECT_EQ(m[1], 0);  // all equal → class 0
  EXPECT_EQ(m[2], 0);  // three-way tie
  EXPECT_EQ(argmax_classes(Tensor<double>({2, 5, 2, 2}, 0.3)), LabelTensor({2, 2, 2}, 0));
}

TEST(Predict, MatchesLinearScanAndIsShiftInvariant) {
  Tensor<double> lg({3, 6, 4, 4});
  Rng rng(10);
  for (auto& v : lg.values()) v = std::round(rng.uniform(-3, 3) * 2) / 2;  // plenty of ties
  const auto m = argmax_classes(lg);
  auto shifted = lg;
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        std::int32_t best = 0;
        for (std::size_t c = 1; c < 6; ++c)
          if (lg.at(n, c, y, x) > lg.at(n, static_cast<std::size_t>(best), y, x)) best = static_cast<std::int32_t>(c);
        EXPECT_EQ(m[(n * 4 + y) * 4 + x], best);
        const double shift = static_cast<double>(n * 7 + y * 3 + x) - 10.0;
        for (std::size_t c = 0; c < 6; ++c) shifted.at(n, c, y, x) += shift;
      }
  EXPECT_EQ(argmax_classes(shifted), m);
}

TEST(LossAndGrads, NoExtraTermsIsDataLoss) {
  const auto cfg = small();
  const auto p = init_model<double>(cfg);
  const auto b = batch(4, 2, 5, 11);
  const auto obj = loss_and_grads(p, b);
  const auto ce = masked_softmax_cross_entropy(forward(p, b.images), b.labels, 255);
  EXPECT_EQ(obj.loss, ce.loss);
  EXPECT_EQ(obj.data_loss, ce.loss);
}

TEST(LossAndGrads, ZeroPenaltyLeavesGradients) {
  const auto p = init_model<double>(small());
  const auto b = batch(4, 2, 5, 12);
  const ParamPenalty<double> zero{"zero", [](const ParamSet<double>&, ParamSet<double>&) { return 0.0; }, {}};
  const auto a = loss_and_grads(p, b), z = loss_and_grads(p, b, {zero});
  EXPECT_EQ(a.loss, z.loss);
  EXPECT_EQ(a.grads, z.grads);
}

TEST(LossAndGrads, FullModelPassesFiniteDifferences) {
  const auto cfg = small();
  auto p = init_model<double>(cfg);
  const auto b = batch(4, 2, 8, 13);
  const auto obj = loss_and_grads(p, b);
  const double err = finite_diff_check<double>([&](const ParamSet<double>& q) { return objective_value(q, b); }, p,
                                               obj.grads, 1e-5, 300);
  EXPECT_LT(err, 1e-4);
}

TEST(LossAndGrads, QuadraticAnchorPenalty) {
  const auto cfg = small();
  auto p = init_model<double>(cfg);
  const auto anchor = init_model<double>(small(4, 99));
  const double lambda = 0.7;
  const ParamPenalty<double> pen{"l2", [&](const ParamSet<double>& q, ParamSet<double>& g) {
                                   double v = 0.0;
                                   for (std::size_t i = 0; i < q.count(); ++i)
                                     for (std::size_t j = 0; j < q[i].size(); ++j) {
                                       const double d = q[i][j] - anchor[i][j];
                                       v += d * d;
                                       g[i][j] += 2 * lambda * d;
                                     }
                                   return lambda * v;
                                 },
                                 {}};
  const auto b = batch(4, 2, 5, 14);
  const auto base = loss_and_grads(p, b), with = loss_and_grads(p, b, {pen});
  for (std::size_t i = 0; i < p.count(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j)
      EXPECT_NEAR(with.grads[i][j] - base.grads[i][j], 2 * lambda * (p[i][j] - anchor[i][j]), 1e-12);
  const double err = finite_diff_check<double>([&](const ParamSet<double>& q) { return objective_value(q, b, {pen}); },
                                               p, with.grads, 1e-5, 300);
  EXPECT_LT(err, 1e-4);
}

TEST(LossAndGrads, AllIgnoredBatchLossAddsNothing) {
  const auto p = init_model<double>(small());
  const auto b = batch(4, 2, 5, 15);
  auto dropped = std::make_shared<LabeledBatch<double>>(batch(4, 3, 5, 16));
  dropped->labels.fill(255);
  const auto a = loss_and_grads(p, b), z = loss_and_grads(p, b, {BatchLoss<double>{"sim", dropped, 3.0}});
  EXPECT_EQ(a.loss, z.loss);
  EXPECT_EQ(a.grads, z.grads);
}

TEST(Snapshot, IndependentOfLaterUpdates) {
  const auto cfg = small();
  auto p = init_model<double>(cfg);
  const auto snap = snapshot(p, cfg);
  const auto copy = snap;
  const auto b = batch(4, 2, 5, 17);
  for (int k = 0; k < 3; ++k) sgd_step(p, loss_and_grads(p, b).grads, 0.1);
  EXPECT_EQ(snap.params(), init_model<double>(cfg));
  EXPECT_EQ(copy.params(), snap.params());
  EXPECT_EQ(snapshot(snap.params(), cfg).params(), snap.params());
  double dist = 0.0;
  for (std::size_t i = 0; i < p.count(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j) dist += std::abs(p[i][j] - snap.params()[i][j]);
  EXPECT_GT(dist, 0.0);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto cfg = small(6, 21);
  auto p = init_model<double>(cfg);
  Rng rng(22);
  for (std::size_t i = 0; i < p.count(); ++i)
    for (auto& v : p[i].values()) v += rng.normal() * 1e-3;
  const auto path = (std::filesystem::temp_directory_path() / "odics_ckpt_test.txt").string();
  save_checkpoint(path, snapshot(p, cfg));
  const auto back = load_checkpoint<double>(path);
  EXPECT_EQ(back.params(), p);
  EXPECT_EQ(back.config(), cfg);

  const auto pf = p.cast<float>();
  save_checkpoint(path, snapshot(pf, cfg));
  EXPECT_EQ(load_checkpoint<float>(path).params(), pf);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = (std::filesystem::temp_directory_path() / "odics_ckpt_bad.txt").string();
  {
    std::ofstream(path) << "something else\n";
  }
  EXPECT_THROW(load_checkpoint<double>(path), DataError);
  std::filesystem::remove(path);
}
