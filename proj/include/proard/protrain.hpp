#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "proard/advkit.hpp"
#include "proard/binio.hpp"
#include "proard/csv.hpp"
#include "proard/data.hpp"
#include "proard/dynet/network.hpp"

namespace proard::train {

using ad::Tape;
using dynet::ArchConfig;
using dynet::Dim;
using dynet::DimSet;
using dynet::SearchSpace;
using dynet::SharedWeights;

// ---- optimizer ------------------------------------------------------------------

enum class LrSchedule { Constant, Step };

/// Which elements weight decay reaches: only those the step's subnets read,
/// or every element of the store.
enum class DecayScope { ActiveOnly, All };

struct Hyperparams {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  std::size_t batch_size = 128;
  LrSchedule schedule = LrSchedule::Constant;
  std::size_t step_every = 0;  // epochs between decays for LrSchedule::Step
  double step_gamma = 0.1;
  DecayScope decay_scope = DecayScope::ActiveOnly;
};

inline void validate(const Hyperparams& hp) {
  require(hp.lr > 0.0 && std::isfinite(hp.lr), ErrorKind::Config, "learning rate must be > 0");
  require(hp.momentum >= 0.0 && hp.momentum < 1.0, ErrorKind::Config,
          "momentum must lie in [0,1)");
  require(hp.weight_decay >= 0.0, ErrorKind::Config, "weight decay must be >= 0");
  require(hp.batch_size >= 1, ErrorKind::Config, "batch size must be >= 1");
  require(hp.schedule == LrSchedule::Constant || (hp.step_every >= 1 && hp.step_gamma > 0.0),
          ErrorKind::Config, "step schedule needs step_every >= 1 and gamma > 0");
}

/// Learning rate for an epoch counted from the start of the current stage.
inline double lr_at(const Hyperparams& hp, std::size_t epoch) {
  if (hp.schedule == LrSchedule::Constant) return hp.lr;
  return hp.lr * std::pow(hp.step_gamma, static_cast<double>(epoch / hp.step_every));
}

struct OptimizerState {
  std::vector<Array> velocity;
};

inline OptimizerState make_optimizer(const std::vector<Array>& params) {
  OptimizerState s;
  for (const Array& p : params) s.velocity.emplace_back(p.shape());
  return s;
}

/// v <- momentum v + (g + wd p); p <- p - lr v, on every element.
inline void sgd_step(Array& p, const Array& g, Array& v, const Hyperparams& hp, double lr) {
  require_same_shape(p, g, "sgd_step gradient");
  require_same_shape(p, v, "sgd_step velocity");
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = hp.momentum * v[i] + (g[i] + hp.weight_decay * p[i]);
    p[i] -= lr * v[i];
  }
}

/// Store-wide step. With DecayScope::ActiveOnly, elements outside every slice
/// read this step are left alone entirely (value and velocity).
inline void sgd_step(std::vector<Array>& params, const ad::GradientSet& g, OptimizerState& st,
                     const Hyperparams& hp, double lr) {
  require(st.velocity.size() == params.size(), ErrorKind::Shape,
          "optimizer state does not match parameter count");
  for (const auto& [id, grad] : g.params) {
    require(id < params.size(), ErrorKind::Shape, "gradient for unknown parameter");
    require_same_shape(params[id], grad, "sgd_step gradient");
    require_same_shape(params[id], st.velocity[id], "sgd_step velocity");
  }
  if (hp.decay_scope == DecayScope::All) {
    for (std::size_t id = 0; id < params.size(); ++id) {
      const Array* grad = g.find(id);
      sgd_step(params[id], grad ? *grad : Array(params[id].shape()), st.velocity[id], hp, lr);
    }
    return;
  }
  for (const auto& [id, grad] : g.params) {
    const auto& mask = g.touched.at(id);
    Array& p = params[id];
    Array& v = st.velocity[id];
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!mask[i]) continue;
      v[i] = hp.momentum * v[i] + (grad[i] + hp.weight_decay * p[i]);
      p[i] -= lr * v[i];
    }
  }
}

// ---- schedule ---------------------------------------------------------------------

enum class StageKind { Teacher, Distill };

struct Stage {
  StageKind kind = StageKind::Distill;
  std::string name;
  DimSet free;
  std::size_t epochs = 0;
};

struct PhasePlan {
  std::size_t teacher_epochs = 300;
  std::vector<Stage> phases;
  std::size_t n_sub = 1;
};

/// Dimensions that actually vary in `space`.
inline DimSet elastic_dims(const SearchSpace& space) {
  DimSet d;
  for (const auto& st : space.stages) {
    if (st.width_choices.size() > 1) d.add(Dim::Width);
    if (st.depth_choices.size() > 1) d.add(Dim::Depth);
    if (st.expansion_choices.size() > 1) d.add(Dim::Expansion);
    if (st.kernel_choices.size() > 1) d.add(Dim::Kernel);
  }
  return d;
}

/// Width first (with kernel when the space has elastic kernels), then depth,
/// then expansion; 120 epochs each after a 300-epoch teacher.
inline PhasePlan default_plan(const SearchSpace& space, std::size_t epochs = 120,
                              std::size_t teacher_epochs = 300) {
  DimSet p1{Dim::Width};
  if (elastic_dims(space).contains(Dim::Kernel)) p1.add(Dim::Kernel);
  DimSet p2 = p1;
  p2.add(Dim::Depth);
  DimSet p3 = p2;
  p3.add(Dim::Expansion);
  PhasePlan plan;
  plan.teacher_epochs = teacher_epochs;
  plan.phases = {{StageKind::Distill, "phase1", p1, epochs},
                 {StageKind::Distill, "phase2", p2, epochs},
                 {StageKind::Distill, "phase3", p3, epochs}};
  return plan;
}

inline void validate(const PhasePlan& plan, const SearchSpace& space) {
  require(!plan.phases.empty(), ErrorKind::Config, "phase plan is empty");
  require(plan.n_sub >= 1, ErrorKind::Config, "n_sub must be >= 1");
  const bool conv = space.kind == dynet::BlockKind::Conv;
  for (std::size_t i = 0; i < plan.phases.size(); ++i) {
    const Stage& s = plan.phases[i];
    require(s.kind == StageKind::Distill, ErrorKind::Config, "plan phases must be distillation");
    require(!s.free.empty(), ErrorKind::Config, s.name + ": no free dimensions");
    require(conv || !s.free.contains(Dim::Kernel), ErrorKind::Config,
            s.name + ": kernel is not a dimension of a dense space");
    if (i > 0)
      require(plan.phases[i - 1].free.subset_of(s.free) && !(plan.phases[i - 1].free == s.free),
              ErrorKind::Config, s.name + ": free dimensions must strictly grow across phases");
  }
}

inline Stage teacher_stage(std::size_t epochs) {
  return {StageKind::Teacher, "teacher", DimSet{}, epochs};
}

inline std::vector<Stage> progressive_schedule(const PhasePlan& plan) {
  std::vector<Stage> s{teacher_stage(plan.teacher_epochs)};
  s.insert(s.end(), plan.phases.begin(), plan.phases.end());
  return s;
}

/// Same teacher, then one stage with every dimension free for the combined
/// epoch budget of the plan's phases.
inline std::vector<Stage> random_schedule(const PhasePlan& plan, const SearchSpace& space) {
  std::size_t total = 0;
  for (const auto& p : plan.phases) total += p.epochs;
  DimSet all = elastic_dims(space);
  if (all.empty()) all = DimSet{Dim::Width};
  return {teacher_stage(plan.teacher_epochs), {StageKind::Distill, "random", all, total}};
}

// ---- state ------------------------------------------------------------------------------

struct LogRow {
  std::size_t step = 0;
  std::string stage;
  double loss = 0.0;
  std::string config;
  friend bool operator==(const LogRow&, const LogRow&) = default;
};

struct TrainState {
  SharedWeights shared;
  std::optional<SharedWeights> teacher;  // frozen distillation target
  OptimizerState opt;
  std::size_t stage = 0;  // index into the schedule
  std::size_t epoch = 0;  // completed epochs within the stage
  std::size_t step = 0;   // optimizer steps so far
  Rng data_rng, sample_rng, attack_rng;
  std::vector<LogRow> log;
};

inline TrainState init_state(const SearchSpace& space, std::uint64_t seed) {
  TrainState st;
  Rng init = make_rng(seed, "train.init");
  st.shared = SharedWeights::init(space, init);
  st.opt = make_optimizer(st.shared.params());
  st.data_rng = make_rng(seed, "train.data");
  st.sample_rng = make_rng(seed, "train.sample");
  st.attack_rng = make_rng(seed, "train.attack");
  return st;
}

namespace detail {

inline void embed(io::Bundle& dst, const std::string& prefix, const io::Bundle& src) {
  dst.meta[prefix] = src.meta;
  for (const auto& [name, a] : src.arrays) dst.arrays.emplace_back(prefix + "/" + name, a);
}

inline io::Bundle extract(const io::Bundle& src, const std::string& prefix) {
  io::Bundle b;
  b.meta = src.meta.at(prefix);
  const std::string p = prefix + "/";
  for (const auto& [name, a] : src.arrays)
    if (name.rfind(p, 0) == 0) b.arrays.emplace_back(name.substr(p.size()), a);
  return b;
}

}  // namespace detail

inline io::Bundle to_bundle(const TrainState& st) {
  io::Bundle b;
  b.meta["kind"] = "train_state";
  b.meta["stage"] = st.stage;
  b.meta["epoch"] = st.epoch;
  b.meta["step"] = st.step;
  b.meta["rng"] = {{"data", rng_state(st.data_rng)},
                   {"sample", rng_state(st.sample_rng)},
                   {"attack", rng_state(st.attack_rng)}};
  auto& log = b.meta["log"] = io::json::array();
  for (const auto& r : st.log) log.push_back({r.step, r.stage, r.loss, r.config});
  detail::embed(b, "shared", st.shared.to_bundle());
  if (st.teacher) detail::embed(b, "teacher", st.teacher->to_bundle());
  io::Bundle v;
  for (std::size_t i = 0; i < st.opt.velocity.size(); ++i)
    v.arrays.emplace_back(std::to_string(i), st.opt.velocity[i]);
  detail::embed(b, "velocity", v);
  return b;
}

inline TrainState from_bundle(const io::Bundle& b) {
  require(b.meta.value("kind", std::string{}) == "train_state", ErrorKind::Io,
          "bundle does not hold a training state");
  TrainState st;
  try {
    st.shared = SharedWeights::from_bundle(detail::extract(b, "shared"));
    if (b.meta.contains("teacher"))
      st.teacher = SharedWeights::from_bundle(detail::extract(b, "teacher"));
    const io::Bundle v = detail::extract(b, "velocity");
    require(v.arrays.size() == st.shared.params().size(), ErrorKind::Io,
            "optimizer state does not match the weights");
    for (std::size_t i = 0; i < v.arrays.size(); ++i) {
      require(v.arrays[i].second.shape() == st.shared.params()[i].shape(), ErrorKind::Io,
              "optimizer state shape mismatch");
      st.opt.velocity.push_back(v.arrays[i].second);
    }
    st.stage = b.meta.at("stage").get<std::size_t>();
    st.epoch = b.meta.at("epoch").get<std::size_t>();
    st.step = b.meta.at("step").get<std::size_t>();
    restore_rng(st.data_rng, b.meta.at("rng").at("data").get<std::string>());
    restore_rng(st.sample_rng, b.meta.at("rng").at("sample").get<std::string>());
    restore_rng(st.attack_rng, b.meta.at("rng").at("attack").get<std::string>());
    for (const auto& r : b.meta.at("log"))
      st.log.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::string>(),
                        r.at(2).get<double>(), r.at(3).get<std::string>()});
  } catch (const io::json::exception& e) {
    fail(ErrorKind::Io, std::string("corrupt training checkpoint: ") + e.what());
  }
  return st;
}

inline void save(const std::filesystem::path& path, const TrainState& st) {
  io::save(path, to_bundle(st));
}

inline TrainState load(const std::filesystem::path& path) { return from_bundle(io::load(path)); }

inline void write_loss_log(const std::filesystem::path& path, const std::vector<LogRow>& log) {
  csv::Table t{{"step", "phase", "loss", "config"}, {}};
  for (const auto& r : log)
    t.rows.push_back({std::to_string(r.step), r.stage, csv::fmt(r.loss), r.config});
  csv::write(path, t);
}

inline std::vector<LogRow> read_loss_log(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  std::vector<LogRow> out;
  for (const auto& r : t.rows)
    out.push_back({static_cast<std::size_t>(csv::parse_int(r[t.column("step")])),
                   r[t.column("phase")], csv::parse_double(r[t.column("loss")]),
                   r[t.column("config")]});
  return out;
}

// ---- training -----------------------------------------------------------------------

struct TrainSetup {
  const data::Dataset* train = nullptr;
  Hyperparams hp;
  adv::AttackSpec attack = adv::pgd_spec(8.0 / 255.0, 10, 2.0 / 255.0, true);
  double beta = 6.0;  // TRADES weight for the teacher
  adv::DistillSpec distill;
  std::size_t n_sub = 1;
};

struct Hooks {
  std::function<void(const TrainState&)> on_epoch;
  std::function<void(const TrainState&, const Stage&)> on_stage_end;
  /// Checked after every epoch; returning true suspends the run.
  std::function<bool(const TrainState&)> stop;
};

inline void validate(const TrainSetup& s) {
  require(s.train != nullptr, ErrorKind::Config, "no training dataset");
  data::validate(*s.train);
  validate(s.hp);
  adv::validate(s.attack);
  adv::validate(s.distill);
  require(s.beta >= 0.0, ErrorKind::Config, "beta must be >= 0");
  require(s.n_sub >= 1, ErrorKind::Config, "n_sub must be >= 1");
}

inline Array teacher_logits(const SharedWeights& teacher, const Array& x) {
  dynet::ForwardOptions opt;
  opt.bn = dynet::BnMode::Fixed;
  dynet::Subnet net(teacher, dynet::max_config(teacher.space()), opt);
  return adv::infer(net, x);
}

/// Summed distillation gradients of the given students on one batch. Each
/// student attacks with its own PGD on KL(S(x')||T(x)) and contributes the
/// gradient of its outer loss; `losses` receives each outer loss.
inline ad::GradientSet distill_gradients(const SharedWeights& shared, const Array& teacher,
                                         const Array& x, const std::vector<ArchConfig>& cfgs,
                                         const adv::AttackSpec& attack,
                                         const adv::DistillSpec& distill, Rng& attack_rng,
                                         std::vector<double>* losses = nullptr) {
  ad::GradientSet total;
  for (const ArchConfig& cfg : cfgs) {
    dynet::Subnet student(shared, cfg, {dynet::BnMode::Batch});
    const adv::Target target{{}, teacher};
    const Array x_adv =
        adv::attack(student, x, target, attack, adv::LossKind::DistillKl, attack_rng);
    Tape t;
    auto terms = adv::rslad_losses(t, student, teacher, x, x_adv, distill);
    const double loss = t.value(terms.loss).item();
    require(std::isfinite(loss), ErrorKind::Numeric, "distillation loss diverged");
    if (losses) losses->push_back(loss);
    total += t.backward(terms.loss);
  }
  return total;
}

/// One pass over the training set for `stage`.
inline void run_epoch(TrainState& st, const Stage& stage, const TrainSetup& setup) {
  const data::Dataset& ds = *setup.train;
  const SearchSpace& space = st.shared.space();
  const ArchConfig full = dynet::max_config(space);
  const std::string full_str = dynet::to_string(space, full);
  const double lr = lr_at(setup.hp, st.epoch);
  const auto order = data::shuffled_indices(ds.size(), st.data_rng);
  for (const auto& idx : data::batches(order, setup.hp.batch_size)) {
    const data::Dataset b = ds.subset(idx);
    if (stage.kind == StageKind::Teacher) {
      dynet::BnStats moments;
      dynet::Subnet clean(st.shared, full, {dynet::BnMode::Batch, nullptr, &moments});
      dynet::Subnet perturbed(st.shared, full, {dynet::BnMode::Batch});
      Tape t;
      auto terms =
          adv::trades_loss(t, clean, perturbed, b.x, b.y, setup.beta, setup.attack, st.attack_rng);
      const double loss = t.value(terms.loss).item();
      require(std::isfinite(loss), ErrorKind::Numeric,
              "teacher loss diverged at step " + std::to_string(st.step));
      sgd_step(st.shared.params(), t.backward(terms.loss), st.opt, setup.hp, lr);
      dynet::update_running_stats(st.shared, moments);
      st.log.push_back({st.step, stage.name, loss, full_str});
    } else {
      const SharedWeights& teacher = st.teacher ? *st.teacher : st.shared;
      const Array tz = teacher_logits(teacher, b.x);
      std::vector<ArchConfig> cfgs;
      for (std::size_t k = 0; k < setup.n_sub; ++k)
        cfgs.push_back(dynet::sample_config(space, stage.free, st.sample_rng));
      std::vector<double> losses;
      auto g = distill_gradients(st.shared, tz, b.x, cfgs, setup.attack, setup.distill,
                                 st.attack_rng, &losses);
      sgd_step(st.shared.params(), g, st.opt, setup.hp, lr);
      for (std::size_t k = 0; k < cfgs.size(); ++k)
        st.log.push_back({st.step, stage.name, losses[k], dynet::to_string(space, cfgs[k])});
    }
    ++st.step;
  }
}

/// Resets momentum and, for a frozen-teacher distillation stage, snapshots
/// the teacher if none is held yet.
inline void begin_stage(TrainState& st, const Stage& stage, const TrainSetup& setup) {
  st.opt = make_optimizer(st.shared.params());
  if (stage.kind == StageKind::Distill && setup.distill.teacher_mode == adv::TeacherMode::Frozen &&
      !st.teacher)
    st.teacher = st.shared;
}

/// Runs (or resumes) `schedule` from st.stage/st.epoch. Returns false when a
/// stop hook suspended the run.
inline bool run_schedule(TrainState& st, const std::vector<Stage>& schedule,
                         const TrainSetup& setup, const Hooks& hooks = {}) {
  validate(setup);
  require(setup.train->input_shape() == st.shared.space().input &&
              setup.train->num_classes == st.shared.space().num_classes,
          ErrorKind::Config, "dataset does not match the search space");
  require(st.stage <= schedule.size(), ErrorKind::State, "checkpoint is past the schedule");
  while (st.stage < schedule.size()) {
    const Stage& stage = schedule[st.stage];
    require(stage.kind == StageKind::Teacher || !stage.free.empty(), ErrorKind::Config,
            stage.name + ": no free dimensions");
    if (st.epoch == 0) begin_stage(st, stage, setup);
    while (st.epoch < stage.epochs) {
      run_epoch(st, stage, setup);
      ++st.epoch;
      if (hooks.on_epoch) hooks.on_epoch(st);
      if (hooks.stop && hooks.stop(st)) return false;
    }
    if (hooks.on_stage_end) hooks.on_stage_end(st, stage);
    ++st.stage;
    st.epoch = 0;
  }
  return true;
}

inline std::size_t total_steps(const std::vector<Stage>& schedule, std::size_t n,
                               std::size_t batch_size) {
  std::size_t s = 0;
  for (const auto& st : schedule) s += data::steps_per_epoch(n, batch_size) * st.epochs;
  return s;
}

/// TRADES training of the maximal configuration.
inline TrainState train_teacher(const SearchSpace& space, const TrainSetup& setup,
                                std::size_t epochs, std::uint64_t seed, const Hooks& hooks = {}) {
  TrainState st = init_state(space, seed);
  run_schedule(st, {teacher_stage(epochs)}, setup, hooks);
  return st;
}

/// One distillation phase on an existing state, outside any schedule.
inline void run_phase(TrainState& st, const Stage& phase, const TrainSetup& setup) {
  validate(setup);
  require(phase.kind == StageKind::Distill && !phase.free.empty(), ErrorKind::Config,
          "run_phase needs a distillation stage with free dimensions");
  require(st.shared.space().kind == dynet::BlockKind::Conv || !phase.free.contains(Dim::Kernel),
          ErrorKind::Config, "kernel is not a dimension of a dense space");
  begin_stage(st, phase, setup);
  for (std::size_t e = 0; e < phase.epochs; ++e) run_epoch(st, phase, setup);
}

inline TrainState train_progressive(const SearchSpace& space, const TrainSetup& setup,
                                    const PhasePlan& plan, std::uint64_t seed,
                                    const Hooks& hooks = {}) {
  validate(plan, space);
  TrainState st = init_state(space, seed);
  run_schedule(st, progressive_schedule(plan), setup, hooks);
  return st;
}

/// Continues from a state whose teacher stage is complete.
inline TrainState train_random_baseline(TrainState from_teacher, const TrainSetup& setup,
                                        const PhasePlan& plan, const Hooks& hooks = {}) {
  validate(plan, from_teacher.shared.space());
  require(from_teacher.stage >= 1, ErrorKind::State, "random baseline needs a trained teacher");
  run_schedule(from_teacher, random_schedule(plan, from_teacher.shared.space()), setup, hooks);
  return from_teacher;
}

}  // namespace proard::train
