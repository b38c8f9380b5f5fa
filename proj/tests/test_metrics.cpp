#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "odics/metrics.hpp"
#include "odics/stream.hpp"

using namespace odics;

namespace {

LabelTensor labels(std::vector<std::int32_t> v) {
  const auto n = v.size();
  return LabelTensor({n}, std::move(v));
}

ConfusionMatrix from(const std::vector<std::int32_t>& gt, const std::vector<std::int32_t>& pred, std::size_t c) {
  ConfusionMatrix cm(c);
  accumulate(cm, labels(pred), labels(gt), 255);
  return cm;
}

}  // namespace

TEST(Accumulate, PerfectPredictionIsDiagonal) {
  const auto cm = from({0, 1, 2, 2, 1}, {0, 1, 2, 2, 1}, 3);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  EXPECT_EQ(cm.at(2, 2), 2u);
  EXPECT_EQ(cm.total(), 5u);
}

TEST(Accumulate, IgnoredPixelsSkipped) {
  const auto cm = from({255, 255, 255}, {0, 1, 1}, 2);
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_EQ(miou(cm), 0.0);
}

TEST(Accumulate, HandExample) {
  const auto cm = from({0, 0, 1, 1}, {0, 1, 1, 1}, 2);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 0), 0u);
  EXPECT_EQ(cm.at(1, 1), 2u);
}

TEST(Accumulate, OutOfRangeIsDataError) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(accumulate(cm, labels({0}), labels({2}), 255), DataError);
  EXPECT_THROW(accumulate(cm, labels({5}), labels({1}), 255), DataError);
  EXPECT_THROW(accumulate(cm, labels({0}), labels({-1}), 255), DataError);
  EXPECT_THROW(accumulate(cm, labels({0, 1}), labels({0}), 255), ConfigError);
}

TEST(Accumulate, AdditiveOverChunks) {
  Rng rng(3);
  std::vector<std::int32_t> gt(200), pred(200);
  for (auto& v : gt) v = rng.uniform() < 0.1 ? 255 : static_cast<std::int32_t>(rng.uniform_int(0, 4));
  for (auto& v : pred) v = static_cast<std::int32_t>(rng.uniform_int(0, 4));
  const auto whole = from(gt, pred, 5);
  ConfusionMatrix parts(5);
  for (std::size_t s = 0; s < 200; s += 37) {
    const auto e = std::min<std::size_t>(200, s + 37);
    parts += from({gt.begin() + static_cast<long>(s), gt.begin() + static_cast<long>(e)},
                  {pred.begin() + static_cast<long>(s), pred.begin() + static_cast<long>(e)}, 5);
  }
  EXPECT_EQ(parts, whole);
}

TEST(Miou, HandExampleIsSevenTwelfths) {
  const auto cm = from({0, 0, 1, 1}, {0, 1, 1, 1}, 2);
  const auto iou = per_class_iou(cm);
  EXPECT_DOUBLE_EQ(*iou[0], 0.5);
  EXPECT_DOUBLE_EQ(*iou[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(miou(cm), 7.0 / 12.0);
}

TEST(Miou, PerfectIsOne) { EXPECT_EQ(miou(from({0, 1, 2, 3}, {0, 1, 2, 3}, 6)), 1.0); }

TEST(Miou, AbsentClassExcluded) {
  // Class 2 never occurs in either tensor; the mean runs over classes 0 and 1.
  const auto cm = from({0, 0, 1, 1}, {0, 1, 1, 1}, 3);
  EXPECT_FALSE(per_class_iou(cm)[2].has_value());
  EXPECT_DOUBLE_EQ(miou(cm), 7.0 / 12.0);
  // A class only predicted counts with IoU 0.
  const auto fp = from({0, 0}, {0, 2}, 3);
  EXPECT_DOUBLE_EQ(*per_class_iou(fp)[2], 0.0);
  EXPECT_DOUBLE_EQ(miou(fp), 0.25);
}

TEST(Miou, InvariantUnderClassRelabeling) {
  Rng rng(9);
  std::vector<std::int32_t> gt(300), pred(300);
  for (auto& v : gt) v = static_cast<std::int32_t>(rng.uniform_int(0, 5));
  for (std::size_t i = 0; i < 300; ++i)
    pred[i] = rng.uniform() < 0.6 ? gt[i] : static_cast<std::int32_t>(rng.uniform_int(0, 5));
  std::vector<std::int32_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  auto gp = gt, pp = pred;
  for (auto& v : gp) v = perm[static_cast<std::size_t>(v)];
  for (auto& v : pp) v = perm[static_cast<std::size_t>(v)];
  EXPECT_NEAR(miou(from(gt, pred, 6)), miou(from(gp, pp, 6)), 1e-15);
}

TEST(Evaluate, ZeroWeightModelMatchesConstantPredictorOracle) {
  StreamConfig sc;
  sc.train_sizes = {4};
  sc.test_size = 6;
  const Stream s(sc, real_domain_presets(8));
  const auto tests = build_test_sets<double>(s, 4);
  ModelConfig mc;
  mc.hidden_channels = 4;
  mc.num_classes = 19;
  auto p = init_model<double>(mc);
  for (std::size_t i = 0; i < p.count(); ++i)
    for (auto& v : p[i].values()) v = 0.0;
  const auto snap = snapshot(p, mc);
  for (std::size_t d = 0; d < 4; ++d) {
    // Constant prediction 0: IoU_0 = n0 / total, others 0, averaged over classes present.
    std::vector<std::uint64_t> count(19, 0);
    std::uint64_t total = 0;
    for (const auto& smp : generate_range(s.domains()[d], s.split(d).test))
      for (auto m : smp.mask.values()) {
        ++count[static_cast<std::size_t>(m)];
        ++total;
      }
    std::size_t present = count[0] == 0;  // class 0 always has a non-empty union
    for (auto c : count) present += c > 0;
    const double expected = static_cast<double>(count[0]) / static_cast<double>(total) / static_cast<double>(present);
    EXPECT_DOUBLE_EQ(evaluate_domain(snap, tests[d]), expected);
  }
}

TEST(Evaluate, RepeatableAndChunkIndependent) {
  StreamConfig sc;
  sc.train_sizes = {4};
  sc.test_size = 10;
  const Stream s(sc, real_domain_presets(8));
  ModelConfig mc;
  mc.hidden_channels = 4;
  mc.num_classes = 19;
  const auto snap = snapshot(init_model<double>(mc), mc);
  const auto a = build_test_sets<double>(s, 3), b = build_test_sets<double>(s, 32);
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_EQ(evaluate_domain(snap, a[d]), evaluate_domain(snap, a[d]));
    EXPECT_EQ(confusion_on(snap.params(), a[d]), confusion_on(snap.params(), b[d]));
  }
}

TEST(TransferStats, HandExample) {
  const auto st = transfer_stats(TransferMatrix::from_rows({{0.5, 0.2}, {0.4, 0.6}}));
  EXPECT_DOUBLE_EQ(st.backward[0], 0.4 - 0.5);
  EXPECT_EQ(st.backward[1], 0.0);
  EXPECT_FALSE(st.forward[0].has_value());
  EXPECT_DOUBLE_EQ(*st.forward[1], 0.6 - 0.2);
  EXPECT_DOUBLE_EQ(st.mean_backward, 0.4 - 0.5);
  EXPECT_DOUBLE_EQ(st.mean_forward, 0.6 - 0.2);
  EXPECT_EQ(st.forward_column[1], (std::vector<double>{0.2}));
  EXPECT_TRUE(st.forward_column[0].empty());
}

TEST(TransferStats, IdenticalRowsGiveZeroBackward) {
  const std::vector<double> row{0.3, 0.5, 0.7};
  const auto st = transfer_stats(TransferMatrix::from_rows({row, row, row}));
  for (double b : st.backward) EXPECT_EQ(b, 0.0);
  for (std::size_t j = 1; j < 3; ++j) EXPECT_EQ(*st.forward[j], 0.0);
}

TEST(TransferStats, PartialMatrixRejected) {
  TransferMatrix m(3);
  m.set_row(0, {0.1, 0.2, 0.3});
  m.set_row(2, {0.1, 0.2, 0.3});
  EXPECT_THROW(transfer_stats(m), ConfigError);
  EXPECT_THROW(m.set_row(1, {0.1, 1.5, 0.3}), NumericError);
  EXPECT_THROW(m.set_row(3, {0.1, 0.2, 0.3}), ConfigError);
}

TEST(TransferStats, BackwardMonotoneInFinalRow) {
  auto rows = std::vector<std::vector<double>>{{0.5, 0.1, 0.1}, {0.3, 0.5, 0.2}, {0.2, 0.3, 0.6}};
  const auto before = transfer_stats(TransferMatrix::from_rows(rows));
  rows[2][0] += 0.1;
  const auto after = transfer_stats(TransferMatrix::from_rows(rows));
  EXPECT_GT(after.backward[0], before.backward[0]);
  EXPECT_GT(after.mean_backward, before.mean_backward);
  EXPECT_EQ(after.backward[1], before.backward[1]);
}

TEST(TransferStats, SingleDomain) {
  const auto st = transfer_stats(TransferMatrix::from_rows({{0.4}}));
  EXPECT_EQ(st.backward[0], 0.0);
  EXPECT_EQ(st.mean_backward, 0.0);
  EXPECT_EQ(st.mean_forward, 0.0);
}
