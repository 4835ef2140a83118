#include <gtest/gtest.h>

#include <filesystem>

#include "proard/dynet/flops.hpp"
#include "proard/dynet/network.hpp"
#include "proard/presets.hpp"

using namespace proard;
using namespace proard::dynet;

namespace {

Array random_input(Rng& rng, std::size_t n, const Shape& per_example) {
  Shape s{n};
  s.insert(s.end(), per_example.begin(), per_example.end());
  Array x(s);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = uniform(rng, 0.0, 1.0);
  return x;
}

Array view_forward(const SharedWeights& sw, const ArchConfig& c, const Array& x,
                   ForwardOptions opt) {
  Tape t(false);
  Subnet net(sw, c, opt);
  return t.value(net.forward(t, t.input(x, false)));
}

Array copy_forward(const MaterializedNet& m, const Array& x, ForwardOptions opt) {
  Tape t(false);
  MaterializedModel model{&m, opt};
  return t.value(model.forward(t, t.input(x, false)));
}

SearchSpace tiny_dense_space() {
  SearchSpace s;
  s.kind = BlockKind::Dense;
  s.input = {1, 2, 2};
  s.num_classes = 3;
  s.stem_channels = 4;
  StageSpec st;
  st.max_depth = 2;
  st.depth_choices = {1, 2};
  st.width_choices = {0.5, 1.0};
  st.expansion_choices = {0.5, 1.0};
  st.channels = 4;
  st.expansion_base = 4;
  s.stages = {st};
  return s;
}

}  // namespace

class SharingTest : public ::testing::TestWithParam<int> {
 protected:
  SearchSpace space() const {
    return GetParam() == 0 ? presets::desk_space() : presets::desk_kernel_space();
  }
};

TEST_P(SharingTest, MaxConfigEqualsFullNetworkBitwise) {
  const SearchSpace s = space();
  Rng rng(1);
  SharedWeights sw = SharedWeights::init(s, rng);
  const Array x = random_input(rng, 6, s.input);
  const ArchConfig full = max_config(s);
  MaterializedNet m = materialize(sw, full);
  // the materialized max config holds every parameter whole
  for (const auto& [id, a] : m.params) EXPECT_EQ(a, sw.param(id));
  EXPECT_EQ(m.params.size(), sw.params().size());
  for (BnMode mode : {BnMode::Batch, BnMode::Fixed})
    EXPECT_EQ(view_forward(sw, full, x, {mode}), copy_forward(m, x, {mode}));
}

TEST_P(SharingTest, ViewEqualsMaterializedCopyForRandomConfigs) {
  const SearchSpace s = space();
  Rng rng(2);
  SharedWeights sw = SharedWeights::init(s, rng);
  const Array x = random_input(rng, 5, s.input);
  for (int k = 0; k < 100; ++k) {
    const ArchConfig c = sample_config(s, DimSet::all(), rng);
    MaterializedNet m = materialize(sw, c);
    for (BnMode mode : {BnMode::Batch, BnMode::Fixed})
      ASSERT_EQ(view_forward(sw, c, x, {mode}), copy_forward(m, x, {mode}))
          << to_string(s, c);
  }
}

TEST_P(SharingTest, GradientsTouchOnlySlicedRegions) {
  const SearchSpace s = space();
  Rng rng(3);
  SharedWeights sw = SharedWeights::init(s, rng);
  const Array x = random_input(rng, 4, s.input);
  std::vector<int> labels{0, 1, 2, 3};
  for (auto& y : labels) y %= static_cast<int>(s.num_classes);
  for (int k = 0; k < 20; ++k) {
    const ArchConfig c = sample_config(s, DimSet::all(), rng);
    MaterializedNet m = materialize(sw, c);
    Tape t;
    Subnet net(sw, c);
    auto g = t.backward(t.cross_entropy(net.forward(t, t.input(x, false)), labels));
    for (const auto& [id, grad] : g.params) {
      const auto& mask = g.touched.at(id);
      std::size_t touched = 0;
      for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!mask[i]) {
          EXPECT_EQ(grad[i], 0.0);
        }
        touched += mask[i];
      }
      EXPECT_EQ(touched, m.params.at(id).size()) << sw.names()[id];
    }
    // parameters the config never reads get no gradient entry at all
    for (std::size_t id = 0; id < sw.params().size(); ++id)
      EXPECT_EQ(g.params.count(id), m.params.count(id));
  }
}

INSTANTIATE_TEST_SUITE_P(DenseAndConv, SharingTest, ::testing::Values(0, 1));

TEST(Subnet, HalfWidthKeepsFirstTwoChannels) {
  const SearchSpace s = tiny_dense_space();
  Rng rng(4);
  SharedWeights sw = SharedWeights::init(s, rng);
  ArchConfig c = max_config(s);
  c.stages[0].layers[0].width = 0;  // 0.5 of 4 channels
  const NetPlan plan = make_plan(s, c);
  EXPECT_EQ(plan.blocks[0].out, 2u);
  MaterializedNet m = materialize(sw, c);
  const ParamId w2 = sw.layout().blocks[0][0].w2;
  const Array& full = sw.param(w2);
  const Array& kept = m.params.at(w2);
  ASSERT_EQ(kept.shape(), (Shape{2, 4}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t col = 0; col < 4; ++col) EXPECT_EQ(kept(r, col), full(r, col));
}

TEST(Subnet, CentredKernelCrop) {
  const SearchSpace s = presets::desk_kernel_space();
  Rng rng(5);
  SharedWeights sw = SharedWeights::init(s, rng);
  ArchConfig c = max_config(s);
  c.stages[0].layers[0].kernel = 0;  // 3 out of 5
  MaterializedNet m = materialize(sw, c);
  const ParamId w2 = sw.layout().blocks[0][0].w2;
  const Array& full = sw.param(w2);
  const Array& crop = m.params.at(w2);
  ASSERT_EQ(crop.dim(2), 3u);
  const std::size_t mid = crop.dim(0);
  for (std::size_t o = 0; o < mid; ++o)
    for (std::size_t i = 0; i < mid; ++i)
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b)
          EXPECT_EQ(crop[((o * mid + i) * 3 + a) * 3 + b],
                    full[((o * full.dim(1) + i) * 5 + a + 1) * 5 + b + 1]);
}

TEST(Subnet, RejectsForeignConfig) {
  Rng rng(6);
  SharedWeights sw = SharedWeights::init(presets::desk_space(), rng);
  EXPECT_THROW(extract_subnet(sw, max_config(presets::desk_kernel_space())), Error);
}

TEST(Subnet, RejectsWrongInputShape) {
  Rng rng(6);
  SharedWeights sw = SharedWeights::init(presets::desk_space(), rng);
  Subnet net(sw, max_config(sw.space()));
  Tape t;
  EXPECT_THROW(net.forward(t, t.input(Array(Shape{2, 1, 4, 4}), false)), Error);
}

TEST(Flops, DenseLayerFourToThree) {
  // nested-loop oracle
  std::uint64_t macs = 0;
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i) ++macs;
  const std::uint64_t params = 4 * 3 + 3;
  FlopsReport r = count_layers({LayerDesc{LayerDesc::Kind::Dense, 4, 3, 1, 1, 1, true, 0}});
  EXPECT_EQ(r.flops, 2 * macs);
  EXPECT_EQ(r.flops, 24u);
  EXPECT_EQ(r.params, params);
  EXPECT_EQ(r.params, 15u);
}

TEST(Flops, ConvLayerMatchesNestedLoops) {
  // 3x3 conv, 2 -> 4 channels, 5x5 input, stride 2, pad 1
  const std::size_t k = 3, cin = 2, cout = 4, h = 5, stride = 2, pad = 1;
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  std::uint64_t macs = 0;
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < ho; ++x)
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) ++macs;
  FlopsReport r = count_layers({LayerDesc{LayerDesc::Kind::Conv, cin, cout, k, ho, ho, false, 0}});
  EXPECT_EQ(r.macs, macs);
  EXPECT_EQ(r.flops, 2 * macs);
}

TEST(Flops, ZeroLayerNetworkIsFree) {
  FlopsReport r = count_layers({});
  EXPECT_EQ(r.flops, 0u);
  EXPECT_EQ(r.params, 0u);
}

TEST(Flops, ParamCountOfMaxConfigEqualsStoreSize) {
  for (const SearchSpace& s : {presets::desk_space(), presets::desk_kernel_space()}) {
    Rng rng(7);
    SharedWeights sw = SharedWeights::init(s, rng);
    EXPECT_EQ(count_flops(s, max_config(s)).params, sw.num_scalars());
  }
}

TEST(Flops, ExtraBlockStrictlyIncreases) {
  const SearchSpace s = presets::desk_space();
  Rng rng(8);
  for (int k = 0; k < 200; ++k) {
    ArchConfig c = sample_config(s, DimSet::all(), rng);
    for (std::size_t st = 0; st < s.stages.size(); ++st) {
      if (c.stages[st].depth + 1 >= s.stages[st].depth_choices.size()) continue;
      ArchConfig d = c;
      d.stages[st].depth += 1;
      d.stages[st].layers.push_back(c.stages[st].layers.back());
      EXPECT_GT(count_flops(s, d).flops, count_flops(s, c).flops);
    }
  }
}

TEST(Flops, MonotoneInEveryDimension) {
  for (const SearchSpace& s : {presets::desk_space(), presets::desk_kernel_space()}) {
    Rng rng(9);
    for (int k = 0; k < 200; ++k) {
      const ArchConfig c = sample_config(s, DimSet::all(), rng);
      const FlopsReport base = count_flops(s, c);
      for (std::size_t st = 0; st < s.stages.size(); ++st)
        for (std::size_t j = 0; j < c.stages[st].layers.size(); ++j) {
          for (int dim = 0; dim < 3; ++dim) {
            ArchConfig d = c;
            LayerChoice& l = d.stages[st].layers[j];
            std::size_t* idx = dim == 0 ? &l.width : dim == 1 ? &l.expansion : &l.kernel;
            const std::size_t n = dim == 0   ? s.stages[st].width_choices.size()
                                  : dim == 1 ? s.stages[st].expansion_choices.size()
                                             : kernel_count(s, s.stages[st]);
            if (*idx + 1 >= n) continue;
            ++*idx;
            const FlopsReport bigger = count_flops(s, d);
            EXPECT_GE(bigger.flops, base.flops);
            EXPECT_GE(bigger.params, base.params);
          }
        }
    }
  }
}

TEST(Recalibrate, ConstantInputGivesZeroVariance) {
  const SearchSpace s = presets::desk_space();
  Rng rng(10);
  SharedWeights sw = SharedWeights::init(s, rng);
  Array x(Shape{16, 1, 8, 8}, 0.3);
  BnStats stats = recalibrate_bn(sw, sample_config(s, DimSet::all(), rng), {x});
  ASSERT_FALSE(stats.empty());
  for (const auto& [idx, m] : stats)
    for (double v : m.var) EXPECT_NEAR(v, 0.0, 1e-20);
}

TEST(Recalibrate, IsIdempotentAndLeavesWeightsAlone) {
  const SearchSpace s = presets::desk_space();
  Rng rng(11);
  SharedWeights sw = SharedWeights::init(s, rng);
  const SharedWeights before = sw;
  std::vector<Array> batches{random_input(rng, 32, s.input), random_input(rng, 20, s.input)};
  const ArchConfig c = sample_config(s, DimSet::all(), rng);
  BnStats a = recalibrate_bn(sw, c, batches);
  BnStats b = recalibrate_bn(sw, c, batches);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [idx, m] : a) {
    EXPECT_EQ(m.mean, b.at(idx).mean);
    EXPECT_EQ(m.var, b.at(idx).var);
  }
  EXPECT_TRUE(sw == before);
}

TEST(Recalibrate, MatchesConvergedRunningStatisticsForMaxConfig) {
  const SearchSpace s = presets::desk_space();
  Rng rng(12);
  SharedWeights sw = SharedWeights::init(s, rng);
  const Array data = random_input(rng, 128, s.input);
  const ArchConfig full = max_config(s);
  // fixed weights, repeated training-mode passes over the same data
  for (int it = 0; it < 300; ++it) {
    BnStats moments;
    Tape t(false);
    Subnet(sw, full, {BnMode::Batch, nullptr, &moments}).forward(t, t.input(data, false));
    update_running_stats(sw, moments);
  }
  BnStats stats = recalibrate_bn(sw, full, {data});
  for (const auto& [idx, m] : stats)
    for (std::size_t c = 0; c < m.mean.size(); ++c) {
      EXPECT_NEAR(m.mean[c], sw.running_mean()[idx][c], 1e-3);
      EXPECT_NEAR(m.var[c], sw.running_var()[idx][c], 1e-3);
    }
  // pooling over a split agrees with the direct first-layer moments
  std::vector<Array> halves;
  std::vector<std::size_t> lo(64), hi(64);
  for (std::size_t i = 0; i < 64; ++i) lo[i] = i, hi[i] = 64 + i;
  halves.push_back(take_rows(data, lo));
  halves.push_back(take_rows(data, hi));
  BnStats split = recalibrate_bn(sw, full, halves);
  const std::size_t stem = sw.layout().stem_bn.stats;
  for (std::size_t c = 0; c < split.at(stem).mean.size(); ++c) {
    EXPECT_NEAR(split.at(stem).mean[c], stats.at(stem).mean[c], 1e-12);
    EXPECT_NEAR(split.at(stem).var[c], stats.at(stem).var[c], 1e-12);
  }
}

TEST(Recalibrate, EmptyCalibrationSetIsAnError) {
  Rng rng(13);
  SharedWeights sw = SharedWeights::init(presets::desk_space(), rng);
  EXPECT_THROW(recalibrate_bn(sw, max_config(sw.space()), {}), Error);
}

TEST(Recalibrate, StatsOverrideDrivesFixedMode) {
  const SearchSpace s = presets::desk_space();
  Rng rng(14);
  SharedWeights sw = SharedWeights::init(s, rng);
  const ArchConfig c = sample_config(s, DimSet::all(), rng);
  const Array x = random_input(rng, 64, s.input);
  BnStats stats = recalibrate_bn(sw, c, {x});
  // with statistics equal to the batch's own moments, fixed-mode output
  // equals batch-mode output up to rounding
  Array fixed = view_forward(sw, c, x, {BnMode::Fixed, &stats, nullptr});
  Array batch = view_forward(sw, c, x, {BnMode::Batch});
  EXPECT_LT(max_abs_diff(fixed, batch), 1e-9);
}

TEST(Checkpoint, SaveLoadRoundTripsBitwise) {
  Rng rng(15);
  SharedWeights sw = SharedWeights::init(presets::desk_kernel_space(), rng);
  sw.running_mean()[0][1] = 0.123456789;
  const auto path = std::filesystem::temp_directory_path() / "proard_test_ckpt.bin";
  sw.save(path);
  SharedWeights back = SharedWeights::load(path);
  EXPECT_TRUE(back == sw);
  EXPECT_EQ(io::encode(back.to_bundle()), io::encode(sw.to_bundle()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  Rng rng(16);
  SharedWeights sw = SharedWeights::init(presets::desk_space(), rng);
  std::string bytes = io::encode(sw.to_bundle());
  EXPECT_THROW(io::decode(bytes.substr(0, bytes.size() - 3)), Error);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(io::decode(bad), Error);
  // header layout: magic, u32 version little-endian
  EXPECT_EQ(bytes.substr(0, 7), "PROARDW");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);
  EXPECT_EQ(bytes[9], 0);
}
