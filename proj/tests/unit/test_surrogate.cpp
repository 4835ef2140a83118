#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "proard/presets.hpp"
#include "proard/surrogate.hpp"

using namespace proard;
using surrogate::EvalRow;
using surrogate::Prediction;

namespace {

/// Rows over desk-space features with targets given by `f(features)`.
template <class F>
std::vector<EvalRow> synthetic_rows(std::size_t n, std::uint64_t seed, F f) {
  const auto space = presets::desk_space();
  Rng rng = make_rng(seed, "test.rows");
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cfg = dynet::sample_config(space, train::elastic_dims(space), rng);
    EvalRow r;
    r.features = dynet::encode_config(space, cfg);
    const auto [a, b] = f(r.features);
    r.natural = a;
    r.robust = b;
    r.flops = dynet::count_flops(space, cfg).flops;
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<double> fixed_weights(std::size_t n, std::uint64_t seed, double scale) {
  Rng rng = make_rng(seed, "test.weights");
  std::vector<double> w(n);
  for (double& v : w) v = uniform(rng, -scale, scale);
  return w;
}

std::vector<EvalRow> subset(const std::vector<EvalRow>& rows, const std::vector<std::size_t>& idx) {
  std::vector<EvalRow> out;
  for (std::size_t i : idx) out.push_back(rows[i]);
  return out;
}

}  // namespace

TEST(Rmse, ZeroWhenPredictionsMatch) {
  std::vector<EvalRow> rows{{{0.0}, 0.5, 0.25, 1}, {{1.0}, 0.75, 0.125, 2}};
  std::vector<Prediction> p{{0.5, 0.25}, {0.75, 0.125}};
  const auto r = surrogate::rmse(p, rows);
  EXPECT_EQ(r.accuracy, 0.0);
  EXPECT_EQ(r.robustness, 0.0);
}

TEST(Rmse, SingleRowIsAbsoluteError) {
  std::vector<EvalRow> rows{{{0.0}, 0.5, 0.5, 1}};
  std::vector<Prediction> p{{0.5 - 0.125, 0.5 + 0.125}};
  const auto r = surrogate::rmse(p, rows);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.125);
  EXPECT_DOUBLE_EQ(r.robustness, 0.125);
}

TEST(Rmse, ThreeRowsMatchDirectFormula) {
  std::vector<EvalRow> rows{{{0.0}, 0.1, 0.9, 1}, {{0.0}, 0.4, 0.3, 1}, {{0.0}, 0.8, 0.2, 1}};
  std::vector<Prediction> p{{0.2, 0.7}, {0.4, 0.5}, {0.5, 0.1}};
  const double ea = std::sqrt((0.01 + 0.0 + 0.09) / 3.0);
  const double er = std::sqrt((0.04 + 0.04 + 0.01) / 3.0);
  const auto r = surrogate::rmse(p, rows);
  EXPECT_NEAR(r.accuracy, ea, 1e-15);
  EXPECT_NEAR(r.robustness, er, 1e-15);
}

TEST(Rmse, EmptyRowsAreAnError) {
  std::vector<EvalRow> rows;
  std::vector<Prediction> p;
  EXPECT_THROW(surrogate::rmse(p, rows), Error);
}

TEST(Rmse, InvariantUnderRowPermutation) {
  const auto w = fixed_weights(dynet::feature_length(presets::desk_space()), 3, 0.02);
  auto rows = synthetic_rows(60, 4, [&](const std::vector<double>& f) {
    double s = 0.5;
    for (std::size_t i = 0; i < f.size(); ++i) s += w[i] * f[i];
    return std::pair{std::clamp(s, 0.0, 1.0), std::clamp(s * 0.5, 0.0, 1.0)};
  });
  const auto p = surrogate::train_predictor(rows, {.epochs = 3});
  const auto before = surrogate::rmse(p, rows);
  Rng rng = make_rng(9, "test.perm");
  const auto perm = data::shuffled_indices(rows.size(), rng);
  const auto after = surrogate::rmse(p, subset(rows, perm));
  EXPECT_NEAR(before.accuracy, after.accuracy, 1e-15);
  EXPECT_NEAR(before.robustness, after.robustness, 1e-15);
}

TEST(Predictor, ConstantTargetsConverge) {
  auto rows = synthetic_rows(100, 1, [](const auto&) { return std::pair{0.62, 0.31}; });
  const auto p = surrogate::train_predictor(rows, {});
  EXPECT_LT(p.val_rmse_accuracy, 1e-3);
  EXPECT_LT(p.val_rmse_robustness, 1e-3);
}

TEST(Predictor, LinearTargetsAreLearned) {
  // Linear in the one-hot features: every depth, width and expansion choice
  // adds a fixed amount. Spread is comparable to real subnet accuracies.
  const auto space = presets::desk_space();
  Rng rng = make_rng(2, "test.linear");
  std::vector<EvalRow> rows;
  double mean = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const auto cfg = dynet::sample_config(space, train::elastic_dims(space), rng);
    double a = 0.3;
    for (const auto& sc : cfg.stages) {
      a += 0.03 * double(sc.depth);
      for (const auto& l : sc.layers) a += 0.01 * double(l.width) + 0.005 * double(l.expansion);
    }
    rows.push_back({dynet::encode_config(space, cfg), a, 0.8 * a - 0.1, 0});
    mean += a / 2000.0;
  }
  double var = 0.0;
  for (const auto& r : rows) var += (r.natural - mean) * (r.natural - mean) / 2000.0;
  ASSERT_GT(std::sqrt(var), 0.05);  // predicting the mean would fail
  const auto p = surrogate::train_predictor(rows, {});
  EXPECT_LT(p.val_rmse_accuracy, 1e-2);
  EXPECT_LT(p.val_rmse_robustness, 1e-2);
}

TEST(Predictor, SmoothTargetsWithinDeskTolerance) {
  const std::size_t k = dynet::feature_length(presets::desk_space());
  const auto w = fixed_weights(k, 5, 0.4);
  auto rows = synthetic_rows(400, 6, [&](const std::vector<double>& f) {
    double z = -1.0;
    for (std::size_t i = 0; i < k; ++i) z += w[i] * f[i];
    const double a = 1.0 / (1.0 + std::exp(-z));
    return std::pair{a, 0.6 * a * a};
  });
  const auto p = surrogate::train_predictor(rows, {});
  EXPECT_LE(p.val_rmse_accuracy, 0.05);
  EXPECT_LE(p.val_rmse_robustness, 0.05);
}

TEST(Predictor, TrainingLossSettlesOverFinalEpochs) {
  const std::size_t k = dynet::feature_length(presets::desk_space());
  const auto w = fixed_weights(k, 7, 0.03);
  auto rows = synthetic_rows(200, 8, [&](const std::vector<double>& f) {
    double a = 0.4;
    for (std::size_t i = 0; i < k; ++i) a += w[i] * f[i];
    return std::pair{a, 0.5 * a};
  });
  const auto p = surrogate::train_predictor(rows, {});
  ASSERT_EQ(p.train_loss.size(), 30u);
  for (std::size_t e = p.train_loss.size() - 5; e < p.train_loss.size(); ++e)
    EXPECT_LE(p.train_loss[e], p.train_loss[e - 1] + 1e-3) << "epoch " << e;
}

TEST(Predictor, FixedSeedGivesIdenticalWeights) {
  auto rows = synthetic_rows(80, 3, [](const std::vector<double>& f) {
    return std::pair{0.3 + 0.1 * f[0], 0.2 + 0.1 * f[1]};
  });
  const auto a = surrogate::train_predictor(rows, {.epochs = 5, .seed = 11});
  const auto b = surrogate::train_predictor(rows, {.epochs = 5, .seed = 11});
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i)
    EXPECT_EQ(max_abs_diff(a.params[i], b.params[i]), 0.0);
  const auto c = surrogate::train_predictor(rows, {.epochs = 5, .seed = 12});
  EXPECT_GT(max_abs_diff(a.params[0], c.params[0]), 0.0);
}

TEST(Predictor, DegenerateSplitIsRejected) {
  auto rows = synthetic_rows(1, 1, [](const auto&) { return std::pair{0.5, 0.5}; });
  EXPECT_THROW(surrogate::train_predictor(rows, {}), Error);
  auto two = synthetic_rows(2, 1, [](const auto&) { return std::pair{0.5, 0.5}; });
  EXPECT_NO_THROW(surrogate::train_predictor(two, {.epochs = 1}));
  EXPECT_THROW(surrogate::split_rows(2, 0.9, 0), Error);
}

TEST(Predictor, PredictIsPureAndChecksLength) {
  const auto space = presets::desk_space();
  auto rows = synthetic_rows(40, 5, [](const auto&) { return std::pair{0.5, 0.4}; });
  const auto p = surrogate::train_predictor(rows, {.epochs = 2});
  const auto cfg = dynet::max_config(space);
  const auto x = surrogate::predict(p, space, cfg);
  const auto y = surrogate::predict(p, space, cfg);
  EXPECT_EQ(x.accuracy, y.accuracy);
  EXPECT_EQ(x.robustness, y.robustness);
  EXPECT_TRUE(std::isfinite(x.accuracy) && std::isfinite(x.robustness));
  std::vector<double> short_features(3, 0.0);
  EXPECT_THROW(surrogate::predict(p, short_features), Error);
}

TEST(Predictor, ClippingIsForDisplayOnly) {
  const Prediction raw{1.25, -0.5};
  const Prediction shown = surrogate::clipped(raw);
  EXPECT_EQ(shown.accuracy, 1.0);
  EXPECT_EQ(shown.robustness, 0.0);
  EXPECT_EQ(raw.accuracy, 1.25);
}

TEST(Predictor, TrainingRowsWithinResidualBound) {
  const std::size_t k = dynet::feature_length(presets::desk_space());
  const auto w = fixed_weights(k, 9, 0.03);
  auto rows = synthetic_rows(120, 10, [&](const std::vector<double>& f) {
    double a = 0.5;
    for (std::size_t i = 0; i < k; ++i) a += w[i] * f[i];
    return std::pair{a, a * 0.5};
  });
  const surrogate::PredictorHp hp;
  const auto p = surrogate::train_predictor(rows, hp);
  const auto split = surrogate::split_rows(rows.size(), hp.val_fraction, hp.seed);
  const auto train_rows = subset(rows, split.train);
  const auto fit = surrogate::rmse(p, train_rows);
  // The worst single residual is bounded by sqrt(n) times the RMSE.
  const double bound = std::sqrt(double(train_rows.size()));
  for (const auto& r : train_rows) {
    const auto e = surrogate::predict(p, r.features);
    EXPECT_LE(std::abs(e.accuracy - r.natural), bound * fit.accuracy + 1e-12);
    EXPECT_LE(std::abs(e.robustness - r.robust), bound * fit.robustness + 1e-12);
  }
}

TEST(Predictor, BundleRoundTripPreservesOutputs) {
  auto rows = synthetic_rows(50, 6, [](const std::vector<double>& f) {
    return std::pair{0.5 + 0.1 * f[2], 0.3};
  });
  const auto p = surrogate::train_predictor(rows, {.epochs = 3});
  const auto path = std::filesystem::temp_directory_path() / "proard_predictor_test.bin";
  surrogate::save(path, p);
  const auto q = surrogate::load(path);
  for (const auto& r : rows) {
    const auto a = surrogate::predict(p, r.features), b = surrogate::predict(q, r.features);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.robustness, b.robustness);
  }
  EXPECT_EQ(p.train_loss, q.train_loss);
  std::filesystem::remove(path);
}

TEST(Predictor, WrongCheckpointKindIsRejected) {
  io::Bundle b;
  b.meta["kind"] = "shared_weights";
  EXPECT_THROW(surrogate::from_bundle(b), Error);
}

TEST(EvalRows, CsvRoundTrip) {
  auto rows = synthetic_rows(7, 2, [](const std::vector<double>& f) {
    return std::pair{0.1 + 0.3 * f[0], 1.0 / 3.0};
  });
  const auto path = std::filesystem::temp_directory_path() / "proard_rows_test.csv";
  surrogate::write_rows(path, rows);
  const auto back = surrogate::read_rows(path);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].features, rows[i].features);
    EXPECT_EQ(back[i].natural, rows[i].natural);
    EXPECT_EQ(back[i].robust, rows[i].robust);
    EXPECT_EQ(back[i].flops, rows[i].flops);
  }
  std::filesystem::remove(path);
}

namespace {

struct EvalFixture {
  dynet::SearchSpace space = presets::desk_space(4, {1, 4, 4});
  dynet::SharedWeights shared;
  data::Dataset test;
  surrogate::EvalSetup setup;

  EvalFixture() {
    Rng rng = make_rng(1, "test.init");
    shared = dynet::SharedWeights::init(space, rng);
    const auto all = data::gen_synthetic({4, 12, {1, 4, 4}, 1.0, 0.2}, 2);
    const auto split = data::train_test_split(all, 0.25);
    test = split.test;
    setup.eval = &test;
    setup.calib = {split.train.x};
    setup.attack = adv::pgd_spec(0.05, 3, 0.02, true);
    setup.eval_seed = 7;
  }
};

}  // namespace

TEST(BuildEvalDataset, MaxConfigMatchesDirectEvaluation) {
  EvalFixture f;
  const auto cfg = dynet::max_config(f.space);
  const auto rows = surrogate::build_eval_dataset(f.shared, {cfg}, f.setup);
  ASSERT_EQ(rows.size(), 1u);
  const auto stats = dynet::recalibrate_bn(f.shared, cfg, f.setup.calib);
  const dynet::Subnet net(f.shared, cfg, {dynet::BnMode::Fixed, &stats});
  const auto direct = adv::evaluate(net, f.test, {f.setup.attack}, f.setup.eval_seed);
  EXPECT_EQ(rows[0].natural, direct.natural);
  EXPECT_EQ(rows[0].robust, direct.robust[0]);
  EXPECT_EQ(rows[0].features, dynet::encode_config(f.space, cfg));
  EXPECT_EQ(rows[0].flops, dynet::count_flops(f.space, cfg).flops);
}

TEST(BuildEvalDataset, DuplicateConfigsScoreIdentically) {
  EvalFixture f;
  Rng rng = make_rng(3, "test.cfg");
  const auto cfg = dynet::sample_config(f.space, train::elastic_dims(f.space), rng);
  const auto rows = surrogate::build_eval_dataset(f.shared, {cfg, cfg}, f.setup);
  EXPECT_EQ(rows[0].natural, rows[1].natural);
  EXPECT_EQ(rows[0].robust, rows[1].robust);
}

TEST(BuildEvalDataset, ReproducibleUnderFixedSeed) {
  EvalFixture f;
  Rng r1 = make_rng(5, "test.sample"), r2 = make_rng(5, "test.sample");
  const auto a = surrogate::build_eval_dataset(f.shared, 4, f.setup, r1);
  const auto b = surrogate::build_eval_dataset(f.shared, 4, f.setup, r2);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].features, b[i].features);
    EXPECT_EQ(a[i].natural, b[i].natural);
    EXPECT_EQ(a[i].robust, b[i].robust);
    EXPECT_GE(a[i].natural, 0.0);
    EXPECT_LE(a[i].natural, 1.0);
  }
}

TEST(BuildEvalDataset, ZeroConfigsIsAnError) {
  EvalFixture f;
  Rng rng = make_rng(1, "x");
  EXPECT_THROW(surrogate::build_eval_dataset(f.shared, 0, f.setup, rng), Error);
}
