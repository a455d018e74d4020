#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "unlearn/mask.hpp"

using namespace unlearn;
using namespace unlearn::test_support;

namespace {

// Two-parameter "model": a LinearRegression checkpoint has no classifier.
Checkpoint linear_checkpoint(std::size_t d) {
  auto c = initialize(vector_spec(ModelKind::LinearRegression, d, 1), 1);
  std::iota(c.parameters.begin(), c.parameters.end(), 1.0);
  return c;
}

FisherDiagonal diagonal(std::vector<double> forget, std::vector<double> remain) {
  FisherDiagonal f;
  f.forget = std::move(forget);
  f.remain = std::move(remain);
  f.full.resize(f.forget.size());
  for (std::size_t j = 0; j < f.full.size(); ++j) f.full[j] = f.forget[j] + f.remain[j];
  return f;
}

// Profile with `per_layer` channels in each layer; channel j owns params {10 j .. 10 j + 9}.
ActivationProfile synthetic_profile(std::vector<std::size_t> per_layer, const std::vector<std::vector<double>>& rows,
                                    std::vector<int> labels) {
  ActivationProfile p;
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    for (std::size_t k = 0; k < per_layer[l]; ++k) {
      const std::size_t j = p.channel_layer.size();
      p.channel_layer.push_back(l);
      std::vector<std::size_t> params(10);
      std::iota(params.begin(), params.end(), 10 * j);
      p.channel_params.push_back(params);
    }
  }
  p.channels = p.channel_layer.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    p.sample_ids.push_back(i);
    p.table.insert(p.table.end(), rows[i].begin(), rows[i].end());
  }
  p.labels = std::move(labels);
  return p;
}

}  // namespace

TEST(TopK, OrdersByScoreThenIndex) {
  EXPECT_EQ(top_k({1.0, 3.0, 3.0, 2.0}, 3), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(top_k({0.0, 0.0, 0.0}, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_TRUE(top_k({1.0}, 0).empty());
}

TEST(FisherMask, ForcedRankingExample) {
  const auto m = fisher_mask(diagonal({3, 1}, {1, 2}), linear_checkpoint(2), 0.5);
  EXPECT_EQ(m.indices, (std::vector<std::size_t>{0}));
  ASSERT_TRUE(m.scores.has_value());
  EXPECT_EQ((*m.scores)[0], 2.0);
  EXPECT_EQ((*m.scores)[1], -1.0);
}

TEST(FisherMask, EqualBucketsTieBreakByIndex) {
  const auto m = fisher_mask(diagonal({1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}), linear_checkpoint(5), 0.4);
  EXPECT_EQ(m.indices, (std::vector<std::size_t>{0, 1}));
}

TEST(FisherMask, MatchesFullSortOracle) {
  const auto c = initialize(vector_spec(ModelKind::MLP, 6, 4, {10}), 1);
  ASSERT_EQ(c.maskable_indices().size(), 70u);
  auto rng = make_rng(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> ff(c.parameters.size()), fr(c.parameters.size());
    for (auto& v : ff) v = std::round(u(rng) * 8.0);  // coarse values force ties
    for (auto& v : fr) v = std::round(u(rng) * 8.0);
    const double ratio = 0.05 + 0.9 * u(rng);
    const auto m = fisher_mask(diagonal(ff, fr), c, ratio);

    auto order = c.maskable_indices();
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = ff[a] - fr[a], sb = ff[b] - fr[b];
      return sa != sb ? sa > sb : a < b;
    });
    order.resize(ratio_count(70, ratio));
    std::sort(order.begin(), order.end());
    EXPECT_EQ(m.indices, order);
    for (auto idx : m.indices) EXPECT_LT(idx, c.entry("classifier.weight").offset);
  }
}

TEST(FisherMask, CommonShiftLeavesSelectionUnchanged) {
  const auto c = initialize(vector_spec(ModelKind::MLP, 6, 4, {10}), 1);
  auto rng = make_rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> ff(c.parameters.size()), fr(c.parameters.size()), shift(c.parameters.size());
  for (std::size_t j = 0; j < ff.size(); ++j) {
    ff[j] = u(rng);
    fr[j] = u(rng);
    shift[j] = 10.0 * u(rng);
  }
  auto ff2 = ff, fr2 = fr;
  for (std::size_t j = 0; j < ff.size(); ++j) {
    ff2[j] += shift[j];
    fr2[j] += shift[j];
  }
  EXPECT_EQ(fisher_mask(diagonal(ff, fr), c, 0.2).indices, fisher_mask(diagonal(ff2, fr2), c, 0.2).indices);
}

TEST(FisherMask, ZeroCountGivesWarningAndRatioChecked) {
  const auto m = fisher_mask(diagonal({1, 2, 3}, {0, 0, 0}), linear_checkpoint(3), 0.1);
  EXPECT_TRUE(m.empty());
  EXPECT_FALSE(m.warning.empty());
  EXPECT_THROW(fisher_mask(diagonal({1}, {0}), linear_checkpoint(1), 0.0), std::invalid_argument);
  EXPECT_THROW(fisher_mask(diagonal({1}, {0}), linear_checkpoint(1), 1.5), std::invalid_argument);
  EXPECT_EQ(fisher_mask(diagonal({1, 2, 3}, {0, 0, 0}), linear_checkpoint(3), 1.0).size(), 3u);
  EXPECT_THROW(fisher_mask(diagonal({1, 2}, {0, 0}), linear_checkpoint(3), 0.5), std::invalid_argument);
}

TEST(ActivationMask, DominantChannelFirst) {
  // channel 2 fires only on forget rows (0, 1)
  const auto p = synthetic_profile({4}, {{1, 1, 5, 1}, {1, 1, 6, 1}, {1, 1, 0, 1}, {1, 1, 0, 1}}, {0, 0, 1, 1});
  const auto m = activation_mask(p, {0, 1}, {2, 3}, 0.25);
  EXPECT_EQ(m.channels, (std::vector<std::size_t>{2}));
  std::vector<std::size_t> expected(10);
  std::iota(expected.begin(), expected.end(), 20);
  EXPECT_EQ(m.indices, expected);
}

TEST(ActivationMask, EqualSetsTieBreakByChannel) {
  // remain rows repeat the forget rows, so every score is 0
  const auto p = synthetic_profile({4}, {{1, 2, 3, 4}, {4, 3, 2, 1}, {1, 2, 3, 4}, {4, 3, 2, 1}}, {0, 1, 0, 1});
  const auto m = activation_mask(p, {0, 1}, {2, 3}, 0.5);
  EXPECT_EQ(m.channels, (std::vector<std::size_t>{0, 1}));
}

TEST(ActivationMask, RejectsEmptyForgetSetAndUncoveredIds) {
  const auto p = synthetic_profile({2}, {{1, 2}, {3, 4}}, {0, 1});
  EXPECT_THROW(activation_mask(p, {}, {0, 1}, 0.5), std::invalid_argument);
  EXPECT_THROW(activation_mask(p, {7}, {0, 1}, 0.5), std::invalid_argument);
}

TEST(ActivationMask, SixteenChannelLayerQuarterRatio) {
  const auto c = initialize(tiny_cnn_spec({16}, 8, 3), 1);
  const auto data = random_images(12, 8, 3, 2);
  const auto profile = record_activations(c, data);
  std::set<SampleId> f, r;
  for (std::size_t i = 0; i < data.size(); ++i) (data.labels[i] == 0 ? f : r).insert(data.ids[i]);
  const auto m = activation_mask(profile, f, r, 0.25);
  ASSERT_EQ(m.channels.size(), 4u);
  std::size_t expected = 0;
  std::set<std::size_t> seen;
  for (auto ch : m.channels) {
    expected += profile.channel_params[ch].size();
    for (auto idx : profile.channel_params[ch]) EXPECT_TRUE(seen.insert(idx).second) << "channel sets overlap";
  }
  EXPECT_EQ(m.size(), expected);
  EXPECT_EQ(m.size(), 4u * 9u);
}

TEST(TfIdf, HandEvaluatedExample) {
  TfIdfOptions opt;
  opt.threshold = 0.2;
  const auto s = tfidf_scores({{0.9, 0.1}, {0.5, 0.5}}, 0, opt);
  EXPECT_NEAR(s[0], 0.9 * std::log(2.0), 1e-15);
  EXPECT_NEAR(s[1], 0.0, 1e-15);
}

TEST(TfIdf, ExclusiveChannelWinsAndUbiquitousScoresZero) {
  // rows: 3 classes; channel 0 only on class 0, channel 1 everywhere
  const std::vector<std::vector<double>> tf{{0.6, 0.0, 0.0}, {0.4, 0.5, 0.5}, {0.0, 0.5, 0.5}};
  const auto s = tfidf_scores(tf, 0);
  EXPECT_NEAR(s[0], 0.6 * std::log(3.0), 1e-12);
  EXPECT_EQ(s[1], 0.0);
  EXPECT_GT(s[0], s[1]);
}

TEST(TfIdf, MaskNeedsPreBatchNormProfile) {
  const auto c = initialize(tiny_cnn_spec({4}, 8, 3), 1);
  const auto data = random_images(9, 8, 3, 2);
  const auto post = record_activations(c, data, ActivationSite::PostBatchNormRelu);
  EXPECT_THROW(tfidf_mask(post, 3, 0, 0.5), std::invalid_argument);
  const auto pre = record_activations(c, data, ActivationSite::PreBatchNorm);
  const auto m = tfidf_mask(pre, 3, 0, 0.5);
  EXPECT_EQ(m.channels.size(), 2u);
  EXPECT_EQ(m.strategy, MaskStrategy::TfIdf);
}

TEST(RandomMask, CountsSeedsAndExclusion) {
  const auto c = initialize(vector_spec(ModelKind::MLP, 99, 10, {100}), 1);
  ASSERT_EQ(c.maskable_indices().size(), 10000u);
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_EQ(random_mask(c, 0.02, seed).size(), 200u);
  EXPECT_EQ(random_mask(c, 0.02, 3).indices, random_mask(c, 0.02, 3).indices);
  EXPECT_NE(random_mask(c, 0.02, 3).indices, random_mask(c, 0.02, 4).indices);
  EXPECT_EQ(random_mask(c, 1.0, 1).indices, c.maskable_indices());
}

TEST(ClassifierMask, RowAndBias) {
  const auto spec = vector_spec(ModelKind::MLP, 10, 10, {64});
  const auto c = initialize(spec, 2);
  const auto m = classifier_mask(c, 0);
  EXPECT_EQ(m.size(), 65u);
  const auto masked = apply_mask(c, m);
  const auto data = make_synthetic_gaussians(10, 10, 3, 2.0, 1);
  Tape tape;
  BoundModel bound(tape, masked, false);
  const auto logits = bound.forward(data.inputs, Mode::Eval).value();
  const auto predicted = predict(masked, data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(logits[i * 10], 0.0);
    bool other_positive = false;
    for (std::size_t k = 1; k < 10; ++k) other_positive |= logits[i * 10 + k] > 0.0;
    if (other_positive) EXPECT_NE(predicted[i], 0.0);
  }
  EXPECT_THROW(classifier_mask(c, 10), std::out_of_range);
  EXPECT_THROW(classifier_mask(linear_checkpoint(3), 0), std::invalid_argument);
}

TEST(ApplyMask, IdentityIdempotenceAndBounds) {
  const auto c = initialize(tiny_cnn_spec(), 3);
  ParameterMask none;
  EXPECT_TRUE(bitwise_equal(apply_mask(c, none), c));
  ParameterMask all;
  all.indices = c.maskable_indices();
  const auto once = apply_mask(c, all);
  for (auto idx : all.indices) EXPECT_EQ(once.parameters[idx], 0.0);
  for (auto idx : c.classifier_indices()) EXPECT_EQ(once.parameters[idx], c.parameters[idx]);
  EXPECT_TRUE(bitwise_equal(apply_mask(once, all), once));
  EXPECT_EQ(once.batchnorm[0].running_var, c.batchnorm[0].running_var);
  ParameterMask bad;
  bad.indices = {c.parameters.size()};
  EXPECT_THROW(apply_mask(c, bad), std::out_of_range);
}

TEST(FisherNoise, ScaleAndLimits) {
  const auto c = initialize(vector_spec(ModelKind::MLP, 20, 5, {50}), 1);
  const std::vector<double> h(c.parameters.size(), 1.0);
  FisherNoiseParams p;
  p.lambda = 16.0;
  p.sigma = 1.0;
  p.seed = 3;
  const auto noisy = fisher_noise(c, h, p);
  double sq = 0.0;
  for (std::size_t j = 0; j < h.size(); ++j) sq += std::pow(noisy.parameters[j] - c.parameters[j], 2);
  const double std_dev = std::sqrt(sq / static_cast<double>(h.size()));
  EXPECT_NEAR(std_dev, 2.0, 0.1);  // (16)^(1/4) with ~1300 draws

  EXPECT_TRUE(bitwise_equal(fisher_noise(c, h, p), noisy));
  p.sigma = 1e-12;  // scale (16e-24)^(1/4) = 2e-6
  const auto quiet = fisher_noise(c, h, p);
  for (std::size_t j = 0; j < h.size(); ++j) EXPECT_NEAR(quiet.parameters[j], c.parameters[j], 2e-5);
  p.sigma = 0.0;
  EXPECT_THROW(fisher_noise(c, h, p), std::invalid_argument);

  p.sigma = 1.0;
  auto zeros = h;
  zeros[3] = 0.0;
  p.clamp = false;
  EXPECT_THROW(fisher_noise(c, zeros, p), std::invalid_argument);
  p.clamp = true;
  const auto clamped = fisher_noise(c, zeros, p);
  EXPECT_TRUE(std::isfinite(clamped.parameters[3]));
}

TEST(MaskIo, JsonRoundTrip) {
  const auto dir = temp_dir("mask");
  const auto m = fisher_mask(diagonal({3, 1, 2, 0}, {1, 2, 0, 0}), linear_checkpoint(4), 0.5);
  save_mask(m, dir / "m.json");
  const auto back = load_mask(dir / "m.json");
  EXPECT_EQ(back.indices, m.indices);
  EXPECT_EQ(back.strategy, m.strategy);
  EXPECT_EQ(back.ratio, m.ratio);
  for (auto s : {MaskStrategy::Fisher, MaskStrategy::Activation, MaskStrategy::TfIdf, MaskStrategy::Random,
                 MaskStrategy::Classifier, MaskStrategy::BoundGuided}) {
    EXPECT_EQ(parse_mask_strategy(to_string(s)), s);
  }
}
