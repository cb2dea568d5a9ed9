#include <gtest/gtest.h>

#include <cmath>

#include "f2at/losses.hpp"
#include "gradient_cases.hpp"

namespace f2at {
namespace {

using testing::random_labels;
using testing::random_tensor;

double pd_value(const Tensor& nat, const Tensor& pert, const Tensor& adv, double tau) {
  Graph g;
  return g.value(pattern_dependent_loss(g, g.input(nat), g.input(pert), g.input(adv), tau)).item();
}

double soft_margin_graph(const Tensor& logits, const std::vector<std::size_t>& y, double upsilon) {
  Graph g;
  return g.value(soft_margin_loss(g, g.input(logits), y, upsilon)).item();
}

// Averaged with the same reduction as the loss so the bound can be compared
// without a rounding allowance.
double mean_margin(const Tensor& logits, const std::vector<std::size_t>& y) {
  const std::size_t c = logits.dim(1);
  Tensor margins({y.size()});
  for (std::size_t i = 0; i < y.size(); ++i) margins[i] = margin(logits.data().subspan(i * c, c), y[i]);
  Graph g;
  return g.value(g.mean(g.constant(std::move(margins)))).item();
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : {+[](LossConfig& x) { x.tau = 0.0; }, +[](LossConfig& x) { x.upsilon = -1.0; },
                      +[](LossConfig& x) { x.alpha = -0.1; }, +[](LossConfig& x) { x.gamma = -1.0; }}) {
    LossConfig bad;
    mutate(bad);
    EXPECT_THROW(bad.validate(), std::invalid_argument);
  }
}

TEST(Margin, Examples) {
  const double z[] = {2.0, 0.5, 0.1};
  EXPECT_DOUBLE_EQ(margin(z, 0), 1.5);
  EXPECT_DOUBLE_EQ(margin(z, 1), -1.5);
  const double one[] = {1.0};
  EXPECT_THROW(margin(one, 0), std::invalid_argument);
  EXPECT_THROW(margin(z, 3), std::invalid_argument);
}

TEST(MarginLoss, Examples) {
  EXPECT_EQ(margin_loss(Tensor({2, 2}, {3, 1, 0, 2}), {0, 1}), 0.0);
  EXPECT_EQ(margin_loss(Tensor({1, 2}, {0, 1}), {0}), 1.0);
  EXPECT_EQ(margin_loss(Tensor({2, 2}, {3, 1, 0, 1}), {0, 0}), 0.5);
}

TEST(MarginLoss, NonNegativeAndZeroOnlyWhenCorrect) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = random_tensor(rng, {8, 4}, -3.0, 3.0);
    const auto y = random_labels(rng, 8, 4);
    const double loss = margin_loss(z, y);
    EXPECT_GE(loss, 0.0);
    bool all_correct = true;
    for (std::size_t i = 0; i < 8; ++i) all_correct = all_correct && margin(z.data().subspan(i * 4, 4), y[i]) > 0;
    EXPECT_EQ(loss == 0.0, all_correct);
    Graph g;
    EXPECT_DOUBLE_EQ(g.value(margin_loss(g, g.input(z), y)).item(), loss);
  }
}

TEST(SoftMarginLoss, TwoClassAnalytic) {
  EXPECT_NEAR(soft_margin_loss(Tensor({1, 2}, {1, 0}), {0}, 1.0), -1.0, 1e-15);
  EXPECT_NEAR(soft_margin_graph(Tensor({1, 2}, {1, 0}), {0}, 1.0), -1.0, 1e-15);
}

// The smooth max exceeds the max by (1/u) log sum_j exp(-u d_j) over the gaps
// d_j below the runner-up: between 0 and log(C-1)/u.
TEST(SoftMarginLoss, SandwichedAboveTheMargin) {
  Rng rng(2);
  for (double upsilon : {0.995, 10.0, 1e3}) {
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t c = 2 + rng.below(9);
      const Tensor z = random_tensor(rng, {8, c}, -3.0, 3.0);
      const auto y = random_labels(rng, 8, c);
      const double soft = soft_margin_loss(z, y, upsilon), hard = -mean_margin(z, y);
      EXPECT_GE(soft, hard);
      EXPECT_LE(soft - hard, std::log(static_cast<double>(c - 1)) / upsilon + 1e-12);
    }
  }
}

TEST(SoftMarginLoss, EqualsTheMarginForTwoClasses) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = random_tensor(rng, {6, 2}, -3.0, 3.0);
    const auto y = random_labels(rng, 6, 2);
    EXPECT_NEAR(soft_margin_loss(z, y, 0.995), -mean_margin(z, y), 1e-15);
  }
}

// Away from near-ties among the other logits the gap at u = 1e3 is far below
// 1e-6: runner-up gaps of at least 0.02 contribute at most 9 e^-20 / 1e3.
TEST(SoftMarginLoss, ApproachesTheMarginForLargeSharpness) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z({8, 10});
    for (std::size_t i = 0; i < 8; ++i) {
      std::vector<double> levels(10);
      for (std::size_t j = 0; j < 10; ++j) levels[j] = 0.05 * static_cast<double>(j) - 0.25;
      rng.shuffle(std::span<double>(levels));
      for (std::size_t j = 0; j < 10; ++j) z[i * 10 + j] = levels[j] + rng.uniform(0.0, 0.01);
    }
    const auto y = random_labels(rng, 8, 10);
    const double soft = soft_margin_loss(z, y, 1e3);
    EXPECT_NEAR(soft, -mean_margin(z, y), 1e-6);
    EXPECT_GE(soft, -mean_margin(z, y));
  }
}

TEST(SoftMarginLoss, NonIncreasingInTheTrueLogit) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = random_tensor(rng, {1, 4}, -2.0, 2.0);
    const std::size_t y = rng.below(4);
    const double before = soft_margin_loss(z, {y}, 0.995);
    z[y] += 1e-3;
    EXPECT_LT(soft_margin_loss(z, {y}, 0.995), before);
  }
}

TEST(PatternDependentLoss, SingleExampleAnalytic) {
  const Tensor adv({1, 3}, {1, 2, -1});
  const Tensor nat = adv;
  const Tensor pert({1, 3}, {-1, -2, 1});
  EXPECT_NEAR(pd_value(nat, pert, adv, 1.0), -2.0, 1e-12);
  // Equal scores for the positive and the single negative cancel.
  EXPECT_NEAR(pd_value(nat, nat, adv, 1.0), 0.0, 1e-12);
}

TEST(PatternDependentLoss, NaturalScoresPullDownPerturbedScoresPushUp) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    // Moving a pattern row halfway toward an adversarial row raises their cosine.
    auto toward = [](Tensor t, const Tensor& target, std::size_t row, std::size_t d) {
      for (std::size_t j = 0; j < d; ++j) t[row * d + j] = 0.5 * t[row * d + j] + 0.5 * target[row * d + j];
      return t;
    };
    // A natural row enters only its own positive score.
    const Tensor adv = random_tensor(rng, {3, 4});
    const Tensor nat = random_tensor(rng, {3, 4});
    const Tensor pert = random_tensor(rng, {3, 4});
    const double base = pd_value(nat, pert, adv, 0.5);
    EXPECT_LT(pd_value(toward(nat, adv, rng.below(3), 4), pert, adv, 0.5), base);
    // A perturbed row enters every example's negatives; with one example the
    // single negative score is the one that moves.
    const Tensor adv1 = random_tensor(rng, {1, 4});
    const Tensor nat1 = random_tensor(rng, {1, 4});
    const Tensor pert1 = random_tensor(rng, {1, 4});
    EXPECT_GT(pd_value(nat1, toward(pert1, adv1, 0, 4), adv1, 0.5), pd_value(nat1, pert1, adv1, 0.5));
  }
}

TEST(PatternDependentLoss, RejectsShapeMismatch) {
  Graph g;
  const NodeId a = g.input(Tensor({2, 3}));
  const NodeId b = g.input(Tensor({3, 3}));
  EXPECT_THROW(pattern_dependent_loss(g, a, b, a, 1.0), std::invalid_argument);
}

struct Fixture {
  NetworkParams params = init_network(testing::tiny_network_config(), 3);
  Tensor clean;
  Tensor adv;
  std::vector<std::size_t> labels;
  explicit Fixture(std::uint64_t seed) {
    Rng rng(seed);
    clean = random_tensor(rng, {5, 1, 8, 8}, 0.0, 1.0);
    adv = clean;
    for (double& v : adv.data()) v = std::clamp(v + rng.uniform(-0.03, 0.03), 0.0, 1.0);
    labels = random_labels(rng, 5, 3);
  }
};

double plain_cross_entropy(const NetworkParams& params, const Tensor& batch, const std::vector<std::size_t>& y) {
  Graph g;
  const BoundNetwork net = bind(g, params, false);
  return g.value(g.mean(g.softmax_cross_entropy(forward(g, net, g.input(batch)).logits, y))).item();
}

TEST(TotalLoss, BreakdownSumsExactly) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Fixture f(seed);
    LossConfig c;
    c.alpha = 0.3;
    c.gamma = 0.7;
    const LossBreakdown b = total_loss(f.params, f.clean, f.adv, f.labels, c, 2);
    EXPECT_NEAR(b.total, b.ce + c.alpha * b.pd + c.gamma * b.mg_soft, 1e-12);
    EXPECT_NEAR(b.ce, plain_cross_entropy(f.params, f.adv, f.labels), 1e-12);
  }
}

TEST(TotalLoss, ZeroWeightsLeaveCrossEntropy) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Fixture f(seed);
    LossConfig c;
    c.alpha = 0.0;
    c.gamma = 0.0;
    const LossBreakdown b = total_loss(f.params, f.clean, f.adv, f.labels, c, 2);
    EXPECT_EQ(b.total, b.ce);
    EXPECT_NEAR(b.total, plain_cross_entropy(f.params, f.adv, f.labels), 1e-12);
  }
}

TEST(TotalLoss, SoftMarginUsesTheNaturalPattern) {
  const Fixture f(11);
  LossConfig c;
  const LossBreakdown b = total_loss(f.params, f.clean, f.adv, f.labels, c, 2);
  const auto [nat, pert] = slice_batch(f.adv, 2);
  const Tensor logits = forward(f.params, nat).logits;
  EXPECT_NEAR(b.mg_soft, soft_margin_loss(logits, f.labels, c.upsilon), 1e-12);
}

TEST(TotalLoss, FullSplitZeroesThePerturbedPattern) {
  const Fixture f(12);
  LossConfig c;
  const LossBreakdown b = total_loss(f.params, f.clean, f.adv, f.labels, c, 8);
  const auto [nat, pert] = slice_batch(f.adv, 8);
  for (double v : pert.data()) EXPECT_EQ(v, 0.0);
  // Every negative is then the cosine with the features of an all-zero image.
  const Tensor f_adv = forward(f.params, f.adv).features;
  const Tensor f_nat = forward(f.params, nat).features;
  const Tensor f_pert = forward(f.params, pert).features;
  EXPECT_NEAR(b.pd, pd_value(f_nat, f_pert, f_adv, c.tau), 1e-12);
}

TEST(TotalLoss, Reproducible) {
  const Fixture f(13);
  const LossBreakdown a = total_loss(f.params, f.clean, f.adv, f.labels, LossConfig{}, 2);
  const LossBreakdown b = total_loss(f.params, f.clean, f.adv, f.labels, LossConfig{}, 2);
  EXPECT_EQ(a.ce, b.ce);
  EXPECT_EQ(a.pd, b.pd);
  EXPECT_EQ(a.mg_soft, b.mg_soft);
  EXPECT_EQ(a.total, b.total);
}

TEST(TotalLoss, RejectsShapeMismatch) {
  const Fixture f(14);
  EXPECT_THROW(total_loss(f.params, Tensor({4, 1, 8, 8}), f.adv, f.labels, LossConfig{}, 2), std::invalid_argument);
  EXPECT_THROW(total_loss(f.params, f.clean, f.adv, f.labels, LossConfig{}, 9), std::invalid_argument);
}

class LossGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LossGradient, MatchesCentralDifferences) {
  const testing::GradientCase c = testing::loss_cases()[GetParam()];
  Rng rng(derive_seed(200, GetParam()));
  for (int trial = 0; trial < 20; ++trial) {
    const auto [point, builder] = testing::draw_smooth(c, rng);
    const GradCheckResult r = grad_check(builder, point, 1e-5);
    EXPECT_TRUE(r.passed(1e-4)) << c.name << " trial " << trial << " error " << r.max_relative_error;
  }
}

INSTANTIATE_TEST_SUITE_P(AllLosses, LossGradient, ::testing::Range<std::size_t>(0, testing::loss_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           std::string name = testing::loss_cases()[info.param].name;
                           for (char& ch : name) {
                             if (ch == '.') ch = '_';
                           }
                           return name;
                         });

}  // namespace
}  // namespace f2at
