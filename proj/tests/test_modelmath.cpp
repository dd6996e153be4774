#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pseudoseg/modelmath.hpp"

namespace pseudoseg {
namespace {

TEST(Bce, Examples) {
  EXPECT_NEAR(bce(0.5, 1), std::log(2.0), 1e-12);
  EXPECT_LE(bce(1.0 - 1e-7, 1), 1.1e-7);
  EXPECT_NEAR(bce(1e-7, 1), 16.1181, 1e-4);
  EXPECT_NEAR(bce(1e-7, 1), -std::log(1e-7), 1e-12);
  EXPECT_EQ(bce(0.0, 1), bce(1e-7, 1));  // clamped
  EXPECT_THROW(bce(0.5, 2), ContractError);
}

TEST(Bce, VectorFormIsMean) {
  const std::vector<double> p = {0.1, 0.7, 0.5};
  const std::vector<int> y = {0, 1, 1};
  EXPECT_NEAR(bce(p, y), (bce(0.1, 0) + bce(0.7, 1) + bce(0.5, 1)) / 3.0, 1e-15);
  EXPECT_THROW(bce(p, std::vector<int>{0, 1}), ContractError);
}

TEST(Bce, NonnegativeAndMonotone) {
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 1000; ++i) {
    const double p = i / 1000.0;
    const double l = bce(p, 1);
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, prev);
    prev = l;
  }
}

TEST(Dfl, Examples) {
  std::vector<double> onehot(6, 0.0);
  onehot[3] = 1.0;
  EXPECT_LE(dfl(onehot, 3.0), 1.1e-7);
  EXPECT_NEAR(dfl(std::vector<double>{0, 0, 0.5, 0.5, 0}, 2.5), std::log(2.0), 1e-12);
  EXPECT_NEAR(dfl(std::vector<double>{0, 0, 0.75, 0.25}, 2.25), 0.562335, 1e-6);
  EXPECT_NEAR(dfl(std::vector<double>{0, 0, 0.75, 0.25}, 2.25), -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)),
              1e-12);
}

TEST(Dfl, IntegerTargetsAndContinuity) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> d(8);
    double s = 0;
    for (auto& v : d) s += (v = u(rng));
    for (auto& v : d) v /= s;
    for (int t = 0; t < 8; ++t) {
      EXPECT_NEAR(dfl(d, t), -std::log(d[t]), 1e-12);
      if (t > 0) EXPECT_NEAR(dfl(d, t - 1e-12), dfl(d, t), 1e-9);
      if (t < 7) EXPECT_NEAR(dfl(d, t + 1e-12), dfl(d, t), 1e-9);
    }
  }
}

TEST(Dfl, Contracts) {
  EXPECT_THROW(dfl(std::vector<double>{0.5, 0.4}, 0.5), ContractError);
  EXPECT_THROW(dfl(std::vector<double>{0.5, 0.5}, 1.5), ContractError);
  EXPECT_THROW(dfl(std::vector<double>{1.0}, 0.0), ContractError);
}

TEST(IouLoss, Examples) {
  EXPECT_EQ(iou_loss({1, 2, 3, 4}, {1, 2, 3, 4}), 0.0);
  EXPECT_EQ(iou_loss({0, 0, 1, 1}, {5, 5, 1, 1}), 1.0);
  EXPECT_NEAR(iou_loss({0, 0, 1, 1}, {0.5, 0, 1, 1}), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(iou_loss({0, 0, 0, 0}, {0, 0, 0, 0}), 1.0);
  EXPECT_THROW(iou_loss({0, 0, -1, 1}, {0, 0, 1, 1}), ContractError);
}

TEST(IouLoss, SymmetricAndBounded) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const BoxXywh a{u(rng), u(rng), u(rng), u(rng)}, b{u(rng), u(rng), u(rng), u(rng)};
    EXPECT_EQ(iou_loss(a, b), iou_loss(b, a));
    EXPECT_GE(iou_loss(a, b), 0.0);
    EXPECT_LE(iou_loss(a, b), 1.0);
  }
}

TEST(CompositeLoss, Examples) {
  EXPECT_NEAR(composite_loss({1, 1, 1, 1}, {}), 10.468, 1e-12);
  EXPECT_EQ(composite_loss({0, 0, 0, 0}, {}), 0.0);
  const LossComponents c{0.3, 1.2, 0.8, 0.05};
  const GainCoefficients g;
  const GainCoefficients g2{2 * g.lambda_b, 2 * g.lambda_c, 2 * g.lambda_s, 2 * g.lambda_f};
  EXPECT_NEAR(composite_loss(c, g2), 2 * composite_loss(c, g), 1e-12);
  EXPECT_THROW(composite_loss({-1, 0, 0, 0}, {}), ContractError);
  EXPECT_THROW(composite_loss({0, 0, 0, 0}, {-1, 0, 0, 0}), ContractError);
}

TEST(CompositeLoss, LinearityAndZeroGains) {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const LossComponents c{u(rng), u(rng), u(rng), u(rng)};
    const GainCoefficients g1{u(rng), u(rng), u(rng), u(rng)}, g2{u(rng), u(rng), u(rng), u(rng)};
    const double a = u(rng), b = u(rng);
    const GainCoefficients mix{a * g1.lambda_b + b * g2.lambda_b, a * g1.lambda_c + b * g2.lambda_c,
                               a * g1.lambda_s + b * g2.lambda_s, a * g1.lambda_f + b * g2.lambda_f};
    const double lhs = composite_loss(c, mix);
    const double rhs = a * composite_loss(c, g1) + b * composite_loss(c, g2);
    EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::abs(rhs)));
    GainCoefficients only_b{g1.lambda_b, 0, 0, 0};
    EXPECT_EQ(composite_loss(c, only_b), g1.lambda_b * c.l_b);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint random_checkpoint(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 3.0);
  Checkpoint c;
  for (const auto& [name, shape] : std::vector<std::pair<std::string, std::vector<std::int64_t>>>{
           {"backbone.conv1.weight", {2, 2}}, {"head.bias", {3}}, {"scalar", {}}}) {
    Tensor t{shape, {}};
    for (std::int64_t i = 0; i < element_count(shape); ++i) t.data.push_back(n(rng));
    c.tensors[name] = t;
  }
  return c;
}

TEST(AverageCheckpoints, FiveIdenticalIsFixedPoint) {
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    const Checkpoint c = random_checkpoint(rng);
    const std::vector<Checkpoint> five(5, c);
    EXPECT_EQ(average_checkpoints(five), c);
  }
}

TEST(AverageCheckpoints, TwoValues) {
  Checkpoint a, b;
  a.tensors["w"] = {{1}, {0.0}};
  b.tensors["w"] = {{1}, {2.0}};
  EXPECT_EQ(average_checkpoints(std::vector{a, b}).tensors.at("w").data, std::vector<double>{1.0});
}

TEST(AverageCheckpoints, MatchesMeanOracleAndIsPermutationInvariant) {
  std::mt19937_64 rng(45);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Checkpoint> ckpts;
    const int n = 2 + static_cast<int>(rng() % 5);
    for (int k = 0; k < n; ++k) ckpts.push_back(random_checkpoint(rng));
    const Checkpoint avg = average_checkpoints(ckpts);
    for (const auto& [name, t] : avg.tensors) {
      for (std::size_t e = 0; e < t.data.size(); ++e) {
        std::vector<double> col;
        for (const auto& c : ckpts) col.push_back(c.tensors.at(name).data[e]);
        EXPECT_NEAR(t.data[e], oracle::mean(col), 1e-12);
      }
    }
    auto shuffled = ckpts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_EQ(average_checkpoints(shuffled), avg);
    std::reverse(shuffled.begin(), shuffled.end());
    EXPECT_EQ(average_checkpoints(shuffled), avg);
  }
}

TEST(AverageCheckpoints, MismatchNamesTensor) {
  std::mt19937_64 rng(46);
  Checkpoint a = random_checkpoint(rng), b = random_checkpoint(rng);
  b.tensors["head.bias"].shape = {1, 3};
  try {
    average_checkpoints(std::vector{a, b});
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("head.bias"), std::string::npos);
  }
  b = random_checkpoint(rng);
  b.tensors.erase("scalar");
  EXPECT_THROW(average_checkpoints(std::vector{a, b}), ContractError);
  EXPECT_THROW(average_checkpoints(std::vector<Checkpoint>{}), ContractError);
}

TEST(CheckpointFormat, RoundTripAndValidation) {
  std::mt19937_64 rng(47);
  const Checkpoint c = random_checkpoint(rng);
  const std::string text = write_checkpoint(c);
  EXPECT_EQ(parse_checkpoint(text), c);
  EXPECT_EQ(write_checkpoint(parse_checkpoint(text)), text);
  EXPECT_THROW(parse_checkpoint(R"({"tensors": {"w": {"shape": [2], "data": [1]}}})"), ValidationError);
  EXPECT_THROW(parse_checkpoint(R"({"tensors": {"w": {"shape": [1], "data": ["x"]}}})"), ValidationError);
  EXPECT_THROW(parse_checkpoint("{\"tensors\": "), ParseError);
  EXPECT_THROW(parse_checkpoint("[]"), ValidationError);
}

}  // namespace
}  // namespace pseudoseg
