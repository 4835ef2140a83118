#include <gtest/gtest.h>

#include <set>

#include "proard/presets.hpp"
#include "proard/protrain.hpp"

using namespace proard;
using namespace proard::train;

namespace {

struct Fixture {
  SearchSpace space = presets::desk_space(4, {1, 4, 4});
  data::Dataset ds = data::gen_synthetic({4, 12, {1, 4, 4}, 1.0, 0.15}, 7);
  TrainSetup setup;

  Fixture() {
    setup.train = &ds;
    setup.hp.batch_size = 16;
    setup.attack = adv::pgd_spec(0.03, 2, 0.015, true);
  }

  PhasePlan plan(std::size_t teacher, std::size_t each) const {
    PhasePlan p = default_plan(space, each, teacher);
    return p;
  }
};

std::string bytes(const TrainState& st) { return io::encode(to_bundle(st)); }

Array random_array(Rng& rng, const Shape& s) {
  Array a(s);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = uniform(rng, -1, 1);
  return a;
}

}  // namespace

TEST(Sgd, ZeroGradientZeroDecayLeavesParams) {
  Hyperparams hp;
  hp.weight_decay = 0.0;
  Rng rng(1);
  Array p = random_array(rng, {3, 2}), v(Shape{3, 2});
  const Array before = p;
  sgd_step(p, Array(Shape{3, 2}), v, hp, hp.lr);
  EXPECT_EQ(p, before);
}

TEST(Sgd, NoMomentumNoDecayIsGradientDescent) {
  Hyperparams hp;
  hp.momentum = 0.0;
  hp.weight_decay = 0.0;
  Rng rng(2);
  Array p = random_array(rng, {4}), g = random_array(rng, {4}), v(Shape{4});
  const Array before = p;
  sgd_step(p, g, v, hp, 0.1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p[i], before[i] - 0.1 * g[i]);
}

TEST(Sgd, ThreeStepsOnQuadraticMatchRecursion) {
  // f(p) = a/2 (p - c)^2
  const double a = 1.7, c = 0.4, p0 = 2.0, lr = 0.05, mu = 0.9, wd = 0.01;
  Hyperparams hp;
  hp.momentum = mu;
  hp.weight_decay = wd;
  Array p(Shape{1}, p0), v(Shape{1});
  for (int k = 0; k < 3; ++k) sgd_step(p, Array(Shape{1}, a * (p[0] - c)), v, hp, lr);
  const double v1 = a * (p0 - c) + wd * p0;
  const double p1 = p0 - lr * v1;
  const double v2 = mu * v1 + a * (p1 - c) + wd * p1;
  const double p2 = p1 - lr * v2;
  const double v3 = mu * v2 + a * (p2 - c) + wd * p2;
  const double p3 = p2 - lr * v3;
  EXPECT_NEAR(p[0], p3, 1e-15);
  EXPECT_NEAR(v[0], v3, 1e-15);
}

TEST(Sgd, ShapeMismatchIsAnError) {
  Hyperparams hp;
  Array p(Shape{2}), v(Shape{2});
  EXPECT_THROW(sgd_step(p, Array(Shape{3}), v, hp, 0.1), Error);
}

TEST(Sgd, ActiveOnlyLeavesUntouchedRegionsAlone) {
  Fixture f;
  TrainState st = init_state(f.space, 3);
  dynet::ArchConfig c = dynet::max_config(f.space);
  for (auto& s : c.stages)
    for (auto& l : s.layers) l.width = 0, l.expansion = 0;
  c.stages[2].depth = 0;
  c.stages[2].layers.resize(1);
  const SharedWeights before = st.shared;
  Rng arng(4);
  const data::Dataset b = f.ds.range(0, 8);
  Array tz = teacher_logits(st.shared, b.x);
  auto g = distill_gradients(st.shared, tz, b.x, {c}, f.setup.attack, f.setup.distill, arng);

  // a warm velocity everywhere makes a stray update visible
  for (auto& v : st.opt.velocity) v.fill(0.5);
  sgd_step(st.shared.params(), g, st.opt, f.setup.hp, 0.01);
  std::size_t untouched = 0;
  for (std::size_t id = 0; id < before.params().size(); ++id) {
    const Array& p0 = before.params()[id];
    const Array& p1 = st.shared.params()[id];
    const auto it = g.touched.find(id);
    for (std::size_t i = 0; i < p0.size(); ++i) {
      const bool touched = it != g.touched.end() && it->second[i];
      if (!touched) {
        EXPECT_EQ(p1[i], p0[i]);
        EXPECT_EQ(st.opt.velocity[id][i], 0.5);
        ++untouched;
      }
    }
  }
  EXPECT_GT(untouched, 0u);
}

TEST(Sgd, DecayAllChangesUntouchedRegionsOnlyByDecay) {
  Fixture f;
  TrainState st = init_state(f.space, 5);
  dynet::ArchConfig c = dynet::max_config(f.space);
  c.stages[0].layers[0].width = 0;
  const SharedWeights before = st.shared;
  Rng arng(6);
  const data::Dataset b = f.ds.range(0, 8);
  auto g = distill_gradients(st.shared, teacher_logits(st.shared, b.x), b.x, {c},
                             f.setup.attack, f.setup.distill, arng);
  Hyperparams hp = f.setup.hp;
  hp.decay_scope = DecayScope::All;
  const double lr = 0.01;
  sgd_step(st.shared.params(), g, st.opt, hp, lr);
  std::size_t untouched = 0;
  for (std::size_t id = 0; id < before.params().size(); ++id) {
    const auto it = g.touched.find(id);
    for (std::size_t i = 0; i < before.params()[id].size(); ++i) {
      if (it != g.touched.end() && it->second[i]) continue;
      const double p0 = before.params()[id][i];
      EXPECT_EQ(st.shared.params()[id][i], p0 - lr * (0.0 + hp.weight_decay * p0));
      ++untouched;
    }
  }
  EXPECT_GT(untouched, 0u);
}

TEST(Teacher, ZeroEpochsKeepsInitialization) {
  Fixture f;
  TrainState st = train_teacher(f.space, f.setup, 0, 11);
  EXPECT_TRUE(st.shared == init_state(f.space, 11).shared);
  EXPECT_EQ(st.step, 0u);
}

TEST(Teacher, LearnsSeparableDataOnThreeSeeds) {
  const SearchSpace space = presets::desk_space(3, {1, 2, 2});
  for (std::uint64_t seed : {1, 2, 3}) {
    data::Dataset ds = data::gen_synthetic({3, 30, {1, 2, 2}, 2.0, 0.05}, seed);
    TrainSetup s;
    s.train = &ds;
    s.hp.batch_size = 16;
    s.attack = adv::pgd_spec(0.02, 2, 0.01, true);
    TrainState st = train_teacher(space, s, 20, seed);
    dynet::Subnet net(st.shared, dynet::max_config(space), {dynet::BnMode::Fixed});
    auto r = adv::evaluate(net, ds, {}, 0);
    EXPECT_GE(r.natural, 0.95) << "seed " << seed;
  }
}

TEST(Teacher, FixedSeedIsBitwiseReproducible) {
  Fixture f;
  TrainState a = train_teacher(f.space, f.setup, 2, 12);
  TrainState b = train_teacher(f.space, f.setup, 2, 12);
  EXPECT_EQ(bytes(a), bytes(b));
  TrainState c = train_teacher(f.space, f.setup, 2, 13);
  EXPECT_NE(bytes(a), bytes(c));
}

TEST(Teacher, EmptyDatasetIsAnError) {
  Fixture f;
  data::Dataset empty;
  f.setup.train = &empty;
  EXPECT_THROW(train_teacher(f.space, f.setup, 1, 0), Error);
}

TEST(Phase, WidthPhaseKeepsDepthAndExpansionMaximal) {
  Fixture f;
  TrainState st = train_teacher(f.space, f.setup, 1, 14);
  const std::size_t before = st.log.size();
  run_phase(st, {StageKind::Distill, "phase1", DimSet{Dim::Width}, 2}, f.setup);
  ASSERT_GT(st.log.size(), before);
  std::set<std::size_t> widths;
  for (std::size_t i = before; i < st.log.size(); ++i) {
    const auto cfg = dynet::parse_config(f.space, st.log[i].config);
    for (std::size_t s = 0; s < f.space.stages.size(); ++s) {
      EXPECT_EQ(cfg.stages[s].depth, f.space.stages[s].depth_choices.size() - 1);
      for (const auto& l : cfg.stages[s].layers) {
        EXPECT_EQ(l.expansion, f.space.stages[s].expansion_choices.size() - 1);
        widths.insert(l.width);
      }
    }
  }
  EXPECT_GT(widths.size(), 1u);
}

TEST(Phase, KernelPhaseIsRejectedForDenseSpace) {
  Fixture f;
  TrainState st = init_state(f.space, 0);
  EXPECT_THROW(run_phase(st, {StageKind::Distill, "k", DimSet{Dim::Kernel}, 1}, f.setup), Error);
}

TEST(Phase, IdenticalStudentsDoubleTheGradient) {
  Fixture f;
  TrainState st = init_state(f.space, 15);
  Rng rng(16);
  const auto cfg = dynet::sample_config(f.space, DimSet::all(), rng);
  const data::Dataset b = f.ds.range(0, 8);
  const Array tz = teacher_logits(st.shared, b.x);
  const adv::AttackSpec atk = adv::pgd_spec(0.03, 2, 0.015, false);
  Rng r1(0), r2(0);
  auto one = distill_gradients(st.shared, tz, b.x, {cfg}, atk, f.setup.distill, r1);
  auto two = distill_gradients(st.shared, tz, b.x, {cfg, cfg}, atk, f.setup.distill, r2);
  ASSERT_EQ(one.params.size(), two.params.size());
  for (const auto& [id, g] : one.params)
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(two.params.at(id)[i], 2.0 * g[i]);
}

TEST(Phase, FixedSeedGivesIdenticalLossTrajectory) {
  Fixture f;
  auto run = [&] {
    TrainState st = train_teacher(f.space, f.setup, 1, 17);
    run_phase(st, {StageKind::Distill, "p", elastic_dims(f.space), 2}, f.setup);
    return st.log;
  };
  EXPECT_EQ(run(), run());
}

TEST(Plan, DefaultsAndValidation) {
  Fixture f;
  PhasePlan p = default_plan(f.space);
  EXPECT_EQ(p.teacher_epochs, 300u);
  ASSERT_EQ(p.phases.size(), 3u);
  for (const auto& ph : p.phases) EXPECT_EQ(ph.epochs, 120u);
  EXPECT_EQ(p.phases[0].free, (DimSet{Dim::Width}));
  EXPECT_EQ(p.phases[1].free, (DimSet{Dim::Width, Dim::Depth}));
  EXPECT_EQ(p.phases[2].free, (DimSet{Dim::Width, Dim::Depth, Dim::Expansion}));
  EXPECT_EQ(p.n_sub, 1u);
  EXPECT_NO_THROW(validate(p, f.space));
  PhasePlan bad = p;
  bad.phases[1].free = DimSet{Dim::Width};
  EXPECT_THROW(validate(bad, f.space), Error);
  bad = p;
  bad.phases[2].free.add(Dim::Kernel);
  EXPECT_THROW(validate(bad, f.space), Error);
  EXPECT_TRUE(default_plan(presets::desk_kernel_space()).phases[0].free.contains(Dim::Kernel));
  Hyperparams hp;
  EXPECT_EQ(hp.lr, 0.01);
  EXPECT_EQ(hp.momentum, 0.9);
  EXPECT_EQ(hp.weight_decay, 2e-4);
  EXPECT_EQ(hp.batch_size, 128u);
}

TEST(Progressive, ZeroEpochPhasesReturnTheTeacher) {
  Fixture f;
  TrainState teacher = train_teacher(f.space, f.setup, 2, 18);
  TrainState prog = train_progressive(f.space, f.setup, f.plan(2, 0), 18);
  EXPECT_TRUE(prog.shared == teacher.shared);
}

TEST(Progressive, StepAccountingAndCheckpointsPerStage) {
  Fixture f;
  const PhasePlan plan = f.plan(1, 1);
  std::vector<std::string> ends;
  Hooks h;
  h.on_stage_end = [&](const TrainState&, const Stage& s) { ends.push_back(s.name); };
  TrainState st = train_progressive(f.space, f.setup, plan, 19, h);
  EXPECT_EQ(st.step, total_steps(progressive_schedule(plan), f.ds.size(), 16));
  EXPECT_EQ(st.step, 4u * 3);
  EXPECT_EQ(ends, (std::vector<std::string>{"teacher", "phase1", "phase2", "phase3"}));
  ASSERT_TRUE(st.teacher.has_value());

  // phase purity over the whole log
  for (const auto& row : st.log) {
    const auto cfg = dynet::parse_config(f.space, row.config);
    DimSet varied;
    for (std::size_t s = 0; s < f.space.stages.size(); ++s) {
      if (cfg.stages[s].depth + 1 != f.space.stages[s].depth_choices.size()) varied.add(Dim::Depth);
      for (const auto& l : cfg.stages[s].layers) {
        if (l.width + 1 != f.space.stages[s].width_choices.size()) varied.add(Dim::Width);
        if (l.expansion + 1 != f.space.stages[s].expansion_choices.size())
          varied.add(Dim::Expansion);
      }
    }
    DimSet allowed;
    for (const auto& ph : plan.phases)
      if (ph.name == row.stage) allowed = ph.free;
    EXPECT_TRUE(varied.subset_of(allowed)) << row.stage << " " << row.config;
  }
}

TEST(Progressive, ResumingMidPhaseIsBitwiseIdentical) {
  Fixture f;
  const PhasePlan plan = f.plan(1, 2);
  const TrainState full = train_progressive(f.space, f.setup, plan, 20);

  Hooks h;
  h.stop = [](const TrainState& s) { return s.stage == 2 && s.epoch == 1; };
  TrainState part = train_progressive(f.space, f.setup, plan, 20, h);
  const auto path = std::filesystem::temp_directory_path() / "proard_resume_test.bin";
  save(path, part);
  TrainState resumed = load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(bytes(resumed), bytes(part));
  run_schedule(resumed, progressive_schedule(plan), f.setup);
  EXPECT_EQ(bytes(resumed), bytes(full));
}

TEST(Progressive, LiveTeacherModeHoldsNoSnapshot) {
  Fixture f;
  f.setup.distill.teacher_mode = adv::TeacherMode::Live;
  TrainState st = train_progressive(f.space, f.setup, f.plan(1, 1), 21);
  EXPECT_FALSE(st.teacher.has_value());
}

TEST(Random, AllDimensionsFreeAndSameStepBudget) {
  Fixture f;
  const PhasePlan plan = f.plan(1, 1);
  TrainState teacher = train_teacher(f.space, f.setup, 1, 22);
  TrainState prog = teacher;
  run_schedule(prog, progressive_schedule(plan), f.setup);
  TrainState rnd = train_random_baseline(teacher, f.setup, plan);
  EXPECT_EQ(rnd.step, prog.step);
  std::set<std::size_t> depth, width, expansion;
  for (const auto& row : rnd.log) {
    if (row.stage != "random") continue;
    const auto cfg = dynet::parse_config(f.space, row.config);
    for (const auto& s : cfg.stages) {
      depth.insert(s.depth);
      for (const auto& l : s.layers) width.insert(l.width), expansion.insert(l.expansion);
    }
  }
  EXPECT_GT(depth.size(), 1u);
  EXPECT_GT(width.size(), 1u);
  EXPECT_GT(expansion.size(), 1u);
  EXPECT_THROW(train_random_baseline(init_state(f.space, 0), f.setup, plan), Error);
}

TEST(Log, CsvRoundTrip) {
  Fixture f;
  TrainState st = train_teacher(f.space, f.setup, 1, 23);
  run_phase(st, {StageKind::Distill, "phase1", DimSet{Dim::Width}, 1}, f.setup);
  const auto path = std::filesystem::temp_directory_path() / "proard_log_test.csv";
  write_loss_log(path, st.log);
  EXPECT_EQ(read_loss_log(path), st.log);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,phase,loss,config");
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsWrongKind) {
  Fixture f;
  io::Bundle b = init_state(f.space, 0).shared.to_bundle();
  EXPECT_THROW(from_bundle(b), Error);
}
