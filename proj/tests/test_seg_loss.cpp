#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mpae/autodiff.hpp"
#include "mpae/seg_loss.hpp"
#include "oracle.hpp"

using namespace mpae;

namespace {

LabelVolume labels_of(Shape extents, std::vector<std::uint8_t> l) {
  LabelVolume v;
  v.extents = std::move(extents);
  v.labels = std::move(l);
  return v;
}

Tensor random_logits(Shape s, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = n(g);
  return t;
}

LabelVolume random_labels(Shape extents, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::size_t n = 1;
  for (auto e : extents) n *= e;
  std::vector<std::uint8_t> l(n);
  for (auto& x : l) x = static_cast<std::uint8_t>(g() % 4);
  return labels_of(std::move(extents), std::move(l));
}

// Brute-force soft Dice straight from the definition.
double dice_oracle(const std::vector<double>& y, const LabelVolume& truth, std::size_t J) {
  const std::size_t V = truth.voxels();
  const double eps = 1e-5;
  double acc = 0;
  for (std::size_t j = 0; j < J; ++j) {
    double gy = 0, gg = 0, yy = 0;
    for (std::size_t i = 0; i < V; ++i) {
      const double gv = truth.labels[i] == j ? 1.0 : 0.0;
      gy += gv * y[j * V + i];
      gg += gv * gv;
      yy += y[j * V + i] * y[j * V + i];
    }
    acc += (gy + eps / 2) / (gg + yy + eps);
  }
  return 1.0 - 2.0 / static_cast<double>(J) * acc;
}

}  // namespace

TEST(SoftDice, PerfectPredictionAllClassesPresent) {
  const auto truth = labels_of({2, 2, 1}, {0, 1, 2, 3});
  Tape t;
  Tensor y = one_hot(truth, 4);
  EXPECT_LE(std::abs(soft_dice_loss(t.constant(y.reshaped({4, 2, 2, 1})), truth).value().item()), 1e-4);
}

TEST(SoftDice, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto truth = random_labels({3, 2, 4}, s);
    Tape t;
    Var y = softmax(t.constant(random_logits({4, 3, 2, 4}, 100 + s)), 0);
    EXPECT_NEAR(soft_dice_loss(y, truth).value().item(), dice_oracle(y.value().data(), truth, 4), 1e-14);
  }
}

TEST(SoftDice, AbsentClassScoresLikePerfectOne) {
  // An absent class predicted as zero must not beat a perfect prediction,
  // otherwise training learns to suppress rare classes.
  const auto truth = labels_of({2, 1, 1}, {0, 1});
  Tape t;
  Tensor y = one_hot(truth, 4);
  const double loss = soft_dice_loss(t.constant(y.reshaped({4, 2, 1, 1})), truth).value().item();
  EXPECT_NEAR(loss, dice_oracle(y.data(), truth, 4), 1e-15);
  EXPECT_NEAR(loss, 0.0, 1e-5);
  EXPECT_GE(loss, 0.0);
}

TEST(SoftDice, BoundedInUnitInterval) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto truth = random_labels({2, 2, 2}, 40 + s);
    Tape t;
    Var y = softmax(t.constant(random_logits({4, 2, 2, 2}, 300 + s)), 0);
    const double loss = soft_dice_loss(y, truth).value().item();
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 1.0);
  }
}

TEST(SoftDice, Errors) {
  const auto truth = labels_of({2, 2, 1}, {0, 1, 2, 3});
  Tape t;
  EXPECT_THROW(soft_dice_loss(t.constant(Tensor(Shape{4, 3, 2, 1}, 0.25)), truth), ShapeError);
  EXPECT_THROW(soft_dice_loss(t.constant(Tensor(Shape{1, 2, 2, 1}, 1.0)), truth), ShapeError);
  EXPECT_THROW(one_hot(labels_of({1, 1, 1}, {5}), 4), ValidationError);
}

TEST(DiceScore, Examples) {
  const std::vector<std::uint8_t> a = {1, 1, 0, 0, 1};
  EXPECT_EQ(dice_score(a, a), 1.0);
  // |A and B| = 2, |A| = 4, |B| = 6
  std::vector<std::uint8_t> p(10, 0), g(10, 0);
  p[0] = p[1] = p[2] = p[3] = 1;
  g[2] = g[3] = g[4] = g[5] = g[6] = g[7] = 1;
  EXPECT_DOUBLE_EQ(dice_score(p, g), 0.4);
  EXPECT_EQ(dice_score({1, 0, 0}, {0, 1, 0}), 0.0);
  EXPECT_EQ(dice_score({0, 0}, {0, 0}), 1.0);
  EXPECT_THROW(dice_score({1}, {1, 0}), ShapeError);
}

TEST(Regions, EmptyAndSingleVoxel) {
  const auto bg = region_decompose(labels_of({2, 2, 2}, std::vector<std::uint8_t>(8, 0)));
  for (auto* m : {&bg.whole_tumor, &bg.tumor_core, &bg.enhancing_tumor}) {
    EXPECT_EQ(std::count(m->begin(), m->end(), 1), 0);
  }
  std::vector<std::uint8_t> l(8, 0);
  l[5] = 3;
  const auto one = region_decompose(labels_of({2, 2, 2}, l));
  for (auto* m : {&one.whole_tumor, &one.tumor_core, &one.enhancing_tumor}) {
    EXPECT_EQ(std::count(m->begin(), m->end(), 1), 1);
    EXPECT_EQ((*m)[5], 1);
  }
}

TEST(Regions, BruteForceMembership) {
  const auto truth = random_labels({5, 4, 3}, 7);
  const auto r = region_decompose(truth);
  for (std::size_t i = 0; i < truth.voxels(); ++i) {
    const int c = truth.labels[i];
    EXPECT_EQ(r.whole_tumor[i], c == 1 || c == 2 || c == 3);
    EXPECT_EQ(r.tumor_core[i], c == 1 || c == 3);
    EXPECT_EQ(r.enhancing_tumor[i], c == 3);
  }
}

TEST(Kd, StudentEqualsTeacherIsZero) {
  const Tensor z = random_logits({4, 2, 3, 2}, 3);
  Tape t;
  EXPECT_NEAR(pixelwise_kd_loss(t.constant(z), t.constant(z), 1.0, KdKind::kl).value().item(), 0.0, 1e-12);
  EXPECT_NEAR(pixelwise_kd_loss(t.constant(z), t.constant(z), 2.0, KdKind::holder, HolderParams::conjugate(2.0)).value().item(), 0.0,
              1e-12);
}

TEST(Kd, HolderSingleVoxelExample) {
  Tape t;
  Tensor s(Shape{2, 1, 1, 1}, 0.0), q(Shape{2, 1, 1, 1}, 0.0);
  q[0] = std::log(4.0);
  const double d = pixelwise_kd_loss(t.constant(s), t.constant(q), 1.0, KdKind::holder, HolderParams::conjugate(2.0)).value().item();
  EXPECT_NEAR(d, oracle::big_hpd({0.5, 0.5}, {0.8, 0.2}, 2).convert_to<double>(), 1e-14);
}

TEST(Kd, KlSingleVoxelIsStudentFirst) {
  Tape t;
  Tensor s(Shape{2, 1, 1, 1}, 0.0), q(Shape{2, 1, 1, 1}, 0.0);
  q[0] = std::log(4.0);
  const double d = pixelwise_kd_loss(t.constant(s), t.constant(q), 1.0, KdKind::kl).value().item();
  EXPECT_NEAR(d, oracle::big_kl({0.5, 0.5}, {0.8, 0.2}).convert_to<double>(), 1e-14);
  EXPECT_GT(std::abs(d - oracle::big_kl({0.8, 0.2}, {0.5, 0.5}).convert_to<double>()), 1e-3);
}

TEST(Kd, MeanOverVoxelsMatchesOracle) {
  const Tensor zs = random_logits({4, 2, 2, 3}, 4), zt = random_logits({4, 2, 2, 3}, 5);
  const double tau = 1.7;
  const auto h = HolderParams::conjugate(1.6);
  Tape t;
  const double kl = pixelwise_kd_loss(t.constant(zs), t.constant(zt), tau, KdKind::kl).value().item();
  const double hd = pixelwise_kd_loss(t.constant(zs), t.constant(zt), tau, KdKind::holder, h).value().item();
  const std::size_t V = 12;
  double ekl = 0, ehd = 0;
  for (std::size_t i = 0; i < V; ++i) {
    std::vector<double> a(4), b(4);
    for (std::size_t j = 0; j < 4; ++j) {
      a[j] = zs[j * V + i];
      b[j] = zt[j * V + i];
    }
    const auto p = oracle::softmax(a, tau), q = oracle::softmax(b, tau);
    ekl += oracle::big_kl(p, q).convert_to<double>();
    ehd += oracle::big_hpd(p, q, oracle::Big(1.6)).convert_to<double>();
  }
  EXPECT_NEAR(kl, ekl / V, 1e-13);
  EXPECT_NEAR(hd, ehd / V, 1e-13);
}

TEST(Kd, TeacherReceivesNoGradient) {
  Tape t;
  Var s = t.leaf(random_logits({4, 2, 2, 2}, 6));
  Var q = t.leaf(random_logits({4, 2, 2, 2}, 7));
  t.backward(pixelwise_kd_loss(s, q, 1.0, KdKind::holder));
  EXPECT_TRUE(t.has_grad(s));
  const std::vector<double>* g = t.grad_if_any(q.id());
  if (g) {
    for (double v : *g) EXPECT_EQ(v, 0.0);
  }
}

TEST(Kd, Errors) {
  Tape t;
  Var a = t.constant(Tensor(Shape{4, 2, 2, 2}, 0.0));
  EXPECT_THROW(pixelwise_kd_loss(a, t.constant(Tensor(Shape{4, 2, 2, 1}, 0.0)), 1.0, KdKind::kl), ShapeError);
  EXPECT_THROW(pixelwise_kd_loss(a, a, 0.0, KdKind::kl), DomainError);
  EXPECT_THROW(pixelwise_kd_loss(a, a, 1.0, KdKind::none), ValidationError);
}

TEST(FinetuneLoss, Reductions) {
  const auto truth = random_labels({2, 3, 2}, 8);
  const Tensor zs = random_logits({4, 2, 3, 2}, 9), zt = random_logits({4, 2, 3, 2}, 10);
  Tape t;
  Var s = t.constant(zs);
  const double dice = soft_dice_loss(softmax(s, 0), truth).value().item();
  EXPECT_EQ(finetune_loss(s, truth, std::nullopt, 1.0, 1.0, KdKind::holder).value().item(), dice);
  EXPECT_NEAR(finetune_loss(s, truth, t.constant(zt), 0.0, 1.0, KdKind::holder).value().item(), dice, 1e-15);
  EXPECT_NEAR(finetune_loss(s, truth, t.constant(zs), 1.0, 1.0, KdKind::kl).value().item(), dice, 1e-12);
  const double kd = pixelwise_kd_loss(s, t.constant(zt), 2.0, KdKind::kl).value().item();
  EXPECT_NEAR(finetune_loss(s, truth, t.constant(zt), 0.3, 2.0, KdKind::kl).value().item(), dice + 0.3 * kd, 1e-14);
}

TEST(FinetuneLoss, ClassMismatch) {
  const auto truth = random_labels({2, 2, 2}, 11);
  Tape t;
  EXPECT_THROW(finetune_loss(t.constant(random_logits({4, 2, 2, 2}, 1)), truth, t.constant(random_logits({3, 2, 2, 2}, 2)), 1.0, 1.0,
                             KdKind::kl),
               Error);
}

TEST(FinetuneLoss, GradientStepDecreasesLoss) {
  const auto truth = random_labels({2, 2, 2}, 12);
  const Tensor zt = random_logits({4, 2, 2, 2}, 13);
  Tensor z = random_logits({4, 2, 2, 2}, 14);
  auto eval = [&](const Tensor& x, Tensor* grad) {
    Tape t;
    Var s = t.leaf(x);
    Var l = finetune_loss(s, truth, t.constant(zt), 1.0, 1.0, KdKind::holder);
    if (grad) {
      t.backward(l);
      *grad = t.grad(s);
    }
    return l.value().item();
  };
  Tensor g;
  const double before = eval(z, &g);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] -= 1e-3 * g[i];
  EXPECT_LT(eval(z, nullptr), before);
}
