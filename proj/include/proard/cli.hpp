#pragma once

// Run configuration, artifact plumbing and the pipeline commands behind the
// `proard` executable. Everything here is callable in-process.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "proard/advkit.hpp"
#include "proard/binio.hpp"
#include "proard/csv.hpp"
#include "proard/data.hpp"
#include "proard/dynet/flops.hpp"
#include "proard/dynet/network.hpp"
#include "proard/evo.hpp"
#include "proard/presets.hpp"
#include "proard/protrain.hpp"
#include "proard/surrogate.hpp"

namespace proard::cli {

using json = nlohmann::json;
using dynet::ArchConfig;
using dynet::SearchSpace;

// ---- configuration ----------------------------------------------------------------

enum class SourceKind { Synthetic, Cifar10, Cifar100, Csv };

struct DatasetSource {
  SourceKind kind = SourceKind::Synthetic;
  data::SyntheticSpec synthetic;
  std::string path;
  std::string test_path;  // empty: split `path` by test_fraction
  std::optional<std::size_t> cap;
  Shape shape;  // csv only
  std::size_t num_classes = 0;  // csv only
  double test_fraction = 0.2;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  SearchSpace space = presets::desk_space();
  DatasetSource dataset;
  train::Hyperparams hp;
  train::PhasePlan plan = train::default_plan(presets::desk_space());
  adv::AttackSpec train_attack = adv::pgd_spec(8.0 / 255.0, 10, 2.0 / 255.0, true);
  /// The first attack is the robustness objective of the predictor and scatter.
  std::vector<adv::AttackSpec> eval_attacks{adv::pgd_spec(8.0 / 255.0, 20, 2.0 / 255.0, true),
                                            adv::fgsm_spec(8.0 / 255.0)};
  double beta = 6.0;
  adv::DistillSpec distill;
  std::size_t calibration = 256;  // leading training examples for BN recalibration
  std::size_t eval_examples = 0;  // leading test examples scored; 0 keeps all
  std::size_t pred_samples = 200;
  surrogate::PredictorHp predictor;
  evo::SearchConfig search;      // flops_limit 0 means flops_fraction of the max config
  double flops_fraction = 0.5;
  std::size_t scatter_samples = 50;
};

namespace detail {

[[noreturn]] inline void bad(const std::string& where, const std::string& what) {
  fail(ErrorKind::Config, where + ": " + what);
}

inline double as_double(const json& v, const std::string& where) {
  if (!v.is_number()) bad(where, "expected a number");
  return v.get<double>();
}

inline std::uint64_t as_u64(const json& v, const std::string& where) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    bad(where, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

inline std::size_t as_count(const json& v, const std::string& where) {
  return static_cast<std::size_t>(as_u64(v, where));
}

inline bool as_bool(const json& v, const std::string& where) {
  if (!v.is_boolean()) bad(where, "expected true or false");
  return v.get<bool>();
}

inline std::string as_string(const json& v, const std::string& where) {
  if (!v.is_string()) bad(where, "expected a string");
  return v.get<std::string>();
}

inline std::vector<std::string> as_strings(const json& v, const std::string& where) {
  if (!v.is_array()) bad(where, "expected an array of strings");
  std::vector<std::string> out;
  for (const json& e : v) out.push_back(as_string(e, where));
  return out;
}

inline Shape as_shape(const json& v, const std::string& where) {
  if (!v.is_array() || v.empty()) bad(where, "expected a non-empty array of sizes");
  Shape s;
  for (const json& e : v) s.push_back(as_count(e, where));
  return s;
}

/// Object reader that rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad(where_, "expected an object");
  }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string at(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) bad(where_, "unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read(Fields& f, const std::string& key, double& out) {
  if (auto* v = f.get(key)) out = as_double(*v, f.at(key));
}
inline void read(Fields& f, const std::string& key, std::size_t& out) {
  if (auto* v = f.get(key)) out = as_count(*v, f.at(key));
}
inline void read(Fields& f, const std::string& key, bool& out) {
  if (auto* v = f.get(key)) out = as_bool(*v, f.at(key));
}

inline SearchSpace parse_space(json j) {
  if (j.is_string()) j = json{{"preset", j}};
  if (j.contains("kind")) return dynet::space_from_json(j);
  Fields f(j, "space");
  const json* p = f.get("preset");
  if (!p) bad("space", "needs either 'preset' or a full definition with 'kind'");
  const std::string preset = as_string(*p, f.at("preset"));
  std::size_t classes = 10;
  read(f, "num_classes", classes);
  Shape input{1, 8, 8};
  if (auto* v = f.get("input")) input = as_shape(*v, f.at("input"));
  f.finish();
  SearchSpace s;
  if (preset == "desk") s = presets::desk_space(classes, input);
  else if (preset == "desk_kernel") s = presets::desk_kernel_space(classes);
  else if (preset == "resnet") s = presets::resnet_space(classes);
  else bad("space.preset", "unknown preset '" + preset + "'");
  dynet::validate(s);
  return s;
}

inline DatasetSource parse_dataset(const json& j) {
  Fields f(j, "dataset");
  DatasetSource d;
  const json* src = f.get("source");
  const std::string source = src ? as_string(*src, f.at("source")) : "synthetic";
  read(f, "test_fraction", d.test_fraction);
  if (source == "synthetic") {
    d.kind = SourceKind::Synthetic;
    read(f, "num_classes", d.synthetic.num_classes);
    read(f, "per_class", d.synthetic.per_class);
    if (auto* v = f.get("shape")) d.synthetic.shape = as_shape(*v, f.at("shape"));
    read(f, "separation", d.synthetic.separation);
    read(f, "noise", d.synthetic.noise);
  } else if (source == "cifar10" || source == "cifar100" || source == "csv") {
    d.kind = source == "cifar10"    ? SourceKind::Cifar10
             : source == "cifar100" ? SourceKind::Cifar100
                                    : SourceKind::Csv;
    const json* p = f.get("path");
    if (!p) bad("dataset", source + " source needs 'path'");
    d.path = as_string(*p, f.at("path"));
    if (auto* v = f.get("test_path")) d.test_path = as_string(*v, f.at("test_path"));
    if (auto* v = f.get("cap")) d.cap = as_count(*v, f.at("cap"));
    if (d.kind == SourceKind::Csv) {
      const json* s = f.get("shape");
      const json* c = f.get("num_classes");
      if (!s || !c) bad("dataset", "csv source needs 'shape' and 'num_classes'");
      d.shape = as_shape(*s, f.at("shape"));
      d.num_classes = as_count(*c, f.at("num_classes"));
    }
  } else {
    bad("dataset.source", "unknown source '" + source + "'");
  }
  f.finish();
  return d;
}

inline train::Hyperparams parse_hp(const json& j) {
  Fields f(j, "hyperparams");
  train::Hyperparams hp;
  read(f, "lr", hp.lr);
  read(f, "momentum", hp.momentum);
  read(f, "weight_decay", hp.weight_decay);
  read(f, "batch_size", hp.batch_size);
  read(f, "step_every", hp.step_every);
  read(f, "step_gamma", hp.step_gamma);
  if (auto* v = f.get("schedule")) {
    const std::string s = as_string(*v, f.at("schedule"));
    if (s == "constant") hp.schedule = train::LrSchedule::Constant;
    else if (s == "step") hp.schedule = train::LrSchedule::Step;
    else bad(f.at("schedule"), "expected 'constant' or 'step'");
  }
  if (auto* v = f.get("decay_scope")) {
    const std::string s = as_string(*v, f.at("decay_scope"));
    if (s == "active") hp.decay_scope = train::DecayScope::ActiveOnly;
    else if (s == "all") hp.decay_scope = train::DecayScope::All;
    else bad(f.at("decay_scope"), "expected 'active' or 'all'");
  }
  f.finish();
  return hp;
}

inline train::PhasePlan parse_plan(const json& j, const SearchSpace& space) {
  Fields f(j, "plan");
  std::size_t teacher_epochs = 300, phase_epochs = 120;
  read(f, "teacher_epochs", teacher_epochs);
  read(f, "phase_epochs", phase_epochs);
  train::PhasePlan plan = train::default_plan(space, phase_epochs, teacher_epochs);
  read(f, "n_sub", plan.n_sub);
  if (auto* v = f.get("phases")) {
    if (!v->is_array()) bad(f.at("phases"), "expected an array");
    plan.phases.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      Fields p((*v)[i], f.at("phases") + "[" + std::to_string(i) + "]");
      train::Stage s;
      s.name = "phase" + std::to_string(i + 1);
      if (auto* n = p.get("name")) s.name = as_string(*n, p.at("name"));
      const json* free = p.get("free");
      if (!free) bad(p.at("free"), "missing");
      s.free = dynet::DimSet::parse(as_strings(*free, p.at("free")));
      s.epochs = phase_epochs;
      read(p, "epochs", s.epochs);
      p.finish();
      plan.phases.push_back(s);
    }
  }
  f.finish();
  return plan;
}

inline adv::AttackSpec parse_attack(const json& j, const std::string& where) {
  Fields f(j, where);
  const json* m = f.get("method");
  const std::string method = m ? as_string(*m, f.at("method")) : "pgd";
  double eps = 8.0 / 255.0, step = 2.0 / 255.0;
  std::size_t steps = 10;
  bool random_start = true;
  read(f, "epsilon", eps);
  read(f, "step_size", step);
  read(f, "steps", steps);
  read(f, "random_start", random_start);
  adv::AttackSpec a;
  if (method == "pgd") a = adv::pgd_spec(eps, steps, step, random_start);
  else if (method == "fgsm") a = adv::fgsm_spec(eps);
  else bad(f.at("method"), "expected 'pgd' or 'fgsm'");
  if (auto* v = f.get("name")) a.name = as_string(*v, f.at("name"));
  f.finish();
  return a;
}

inline surrogate::PredictorHp parse_predictor(const json& j, std::uint64_t root) {
  Fields f(j, "predictor");
  surrogate::PredictorHp hp;
  hp.seed = derive_seed(root, "predictor");
  read(f, "hidden", hp.hidden);
  read(f, "epochs", hp.epochs);
  read(f, "batch_size", hp.batch_size);
  read(f, "lr", hp.lr);
  read(f, "momentum", hp.momentum);
  read(f, "weight_decay", hp.weight_decay);
  read(f, "val_fraction", hp.val_fraction);
  if (auto* v = f.get("seed")) hp.seed = as_u64(*v, f.at("seed"));
  f.finish();
  return hp;
}

inline void parse_search(const json& j, RunConfig& c) {
  Fields f(j, "search");
  read(f, "population", c.search.population);
  read(f, "generations", c.search.generations);
  read(f, "mutation_rate", c.search.mutation_rate);
  read(f, "crossover_rate", c.search.crossover_rate);
  read(f, "flops_limit", c.search.flops_limit);
  read(f, "flops_fraction", c.flops_fraction);
  if (auto* v = f.get("seed")) c.search.seed = as_u64(*v, f.at("seed"));
  f.finish();
}

inline Shape dataset_shape(const DatasetSource& d) {
  switch (d.kind) {
    case SourceKind::Synthetic: return d.synthetic.shape;
    case SourceKind::Cifar10:
    case SourceKind::Cifar100: return {3, 32, 32};
    case SourceKind::Csv: return d.shape;
  }
  return {};
}

inline std::size_t dataset_classes(const DatasetSource& d) {
  switch (d.kind) {
    case SourceKind::Synthetic: return d.synthetic.num_classes;
    case SourceKind::Cifar10: return 10;
    case SourceKind::Cifar100: return 100;
    case SourceKind::Csv: return d.num_classes;
  }
  return 0;
}

}  // namespace detail

/// Cross-field checks; nothing is computed before these pass.
inline void validate(const RunConfig& c) {
  dynet::validate(c.space);
  const Shape shape = detail::dataset_shape(c.dataset);
  require(shape == c.space.input, ErrorKind::Config,
          "dataset examples have shape " + shape_str(shape) + " but the space expects " +
              shape_str(c.space.input));
  require(detail::dataset_classes(c.dataset) == c.space.num_classes, ErrorKind::Config,
          "dataset has " + std::to_string(detail::dataset_classes(c.dataset)) +
              " classes but the space has " + std::to_string(c.space.num_classes));
  require(c.dataset.test_fraction > 0.0 && c.dataset.test_fraction < 1.0, ErrorKind::Config,
          "dataset.test_fraction must lie in (0,1)");
  if (c.dataset.kind == SourceKind::Synthetic) {
    const auto& s = c.dataset.synthetic;
    require(s.num_classes >= 2 && s.per_class >= 1 && s.separation >= 0.0 && s.noise >= 0.0,
            ErrorKind::Config, "invalid synthetic dataset spec");
  }
  require(!c.dataset.cap || *c.dataset.cap >= 1, ErrorKind::Config, "dataset.cap must be >= 1");
  train::validate(c.hp);
  train::validate(c.plan, c.space);
  adv::validate(c.train_attack);
  require(!c.eval_attacks.empty(), ErrorKind::Config, "eval_attacks must not be empty");
  for (const auto& a : c.eval_attacks) adv::validate(a);
  require(c.beta >= 0.0, ErrorKind::Config, "beta must be >= 0");
  adv::validate(c.distill);
  require(c.calibration >= 1, ErrorKind::Config, "calibration must be >= 1");
  require(c.pred_samples >= 2, ErrorKind::Config, "pred_samples must be >= 2");
  require(c.scatter_samples >= 1, ErrorKind::Config, "scatter_samples must be >= 1");
  surrogate::validate(c.predictor);
  evo::SearchConfig s = c.search;
  if (s.flops_limit == 0.0) {
    require(c.flops_fraction > 0.0, ErrorKind::Config, "search.flops_fraction must be > 0");
    s.flops_limit = 1.0;
  }
  evo::validate(s);
}

inline RunConfig parse_config(const json& j) {
  detail::Fields f(j, "config");
  RunConfig c;
  if (auto* v = f.get("seed")) c.seed = detail::as_u64(*v, f.at("seed"));
  if (auto* v = f.get("output_dir")) c.output_dir = detail::as_string(*v, f.at("output_dir"));
  if (auto* v = f.get("space")) c.space = detail::parse_space(*v);
  if (auto* v = f.get("dataset")) c.dataset = detail::parse_dataset(*v);
  if (auto* v = f.get("hyperparams")) c.hp = detail::parse_hp(*v);
  c.plan = train::default_plan(c.space);
  if (auto* v = f.get("plan")) c.plan = detail::parse_plan(*v, c.space);
  if (auto* v = f.get("train_attack")) c.train_attack = detail::parse_attack(*v, "train_attack");
  if (auto* v = f.get("eval_attacks")) {
    if (!v->is_array()) detail::bad("eval_attacks", "expected an array");
    c.eval_attacks.clear();
    for (std::size_t i = 0; i < v->size(); ++i)
      c.eval_attacks.push_back(
          detail::parse_attack((*v)[i], "eval_attacks[" + std::to_string(i) + "]"));
  }
  detail::read(f, "beta", c.beta);
  if (auto* v = f.get("distill")) {
    detail::Fields d(*v, "distill");
    detail::read(d, "alpha", c.distill.alpha);
    if (auto* m = d.get("teacher_mode")) {
      const std::string s = detail::as_string(*m, d.at("teacher_mode"));
      if (s == "frozen") c.distill.teacher_mode = adv::TeacherMode::Frozen;
      else if (s == "live") c.distill.teacher_mode = adv::TeacherMode::Live;
      else detail::bad(d.at("teacher_mode"), "expected 'frozen' or 'live'");
    }
    d.finish();
  }
  detail::read(f, "calibration", c.calibration);
  detail::read(f, "eval_examples", c.eval_examples);
  detail::read(f, "pred_samples", c.pred_samples);
  detail::read(f, "scatter_samples", c.scatter_samples);
  c.predictor.seed = derive_seed(c.seed, "predictor");
  if (auto* v = f.get("predictor")) c.predictor = detail::parse_predictor(*v, c.seed);
  c.search.seed = derive_seed(c.seed, "search");
  if (auto* v = f.get("search")) detail::parse_search(*v, c);
  f.finish();
  validate(c);
  return c;
}

/// `pointer=value` with an RFC 6901 pointer; the value is read as JSON and
/// falls back to a plain string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::Config,
          "override '" + assignment + "' is not of the form /pointer=value");
  const std::string ptr = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  try {
    j[json::json_pointer(ptr)] = value;
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, "override '" + assignment + "': " + e.what());
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Config, "cannot open config " + path.string());
  json j = json::parse(in, nullptr, false);
  require(!j.is_discarded(), ErrorKind::Config, "config " + path.string() + " is not valid JSON");
  return j;
}

// ---- data --------------------------------------------------------------------------

inline data::Dataset ingest(const DatasetSource& d, const std::string& path) {
  switch (d.kind) {
    case SourceKind::Cifar10: return data::ingest_cifar(path, data::CifarKind::Cifar10, d.cap);
    case SourceKind::Cifar100: return data::ingest_cifar(path, data::CifarKind::Cifar100, d.cap);
    case SourceKind::Csv: {
      data::Dataset ds = data::ingest_csv(path, d.shape, d.num_classes);
      if (d.cap && *d.cap < ds.size()) ds = ds.range(0, *d.cap);
      return ds;
    }
    case SourceKind::Synthetic: break;
  }
  fail(ErrorKind::Config, "synthetic data has no path");
}

inline data::Split load_data(const RunConfig& c) {
  const DatasetSource& d = c.dataset;
  data::Split split;
  if (d.kind == SourceKind::Synthetic) {
    split = data::train_test_split(data::gen_synthetic(d.synthetic, derive_seed(c.seed, "data")),
                                   d.test_fraction);
  } else if (d.test_path.empty()) {
    split = data::train_test_split(ingest(d, d.path), d.test_fraction);
  } else {
    split = {ingest(d, d.path), ingest(d, d.test_path)};
  }
  data::validate(split.train);
  data::validate(split.test);
  if (c.eval_examples > 0 && c.eval_examples < split.test.size())
    split.test = split.test.range(0, c.eval_examples);
  return split;
}

/// BN recalibration batches: the leading `calibration` training examples.
inline std::vector<Array> calibration_batches(const RunConfig& c, const data::Dataset& train) {
  const std::size_t n = std::min(c.calibration, train.size());
  std::vector<Array> out;
  for (std::size_t i = 0; i < n; i += 256) out.push_back(train.range(i, std::min(n, i + 256)).x);
  return out;
}

// ---- scatter -----------------------------------------------------------------------

struct ScatterRow {
  std::string config;
  double natural = 0.0;
  double robust = 0.0;
  std::uint64_t flops = 0;
  friend bool operator==(const ScatterRow&, const ScatterRow&) = default;
};

inline void export_scatter(const std::vector<ScatterRow>& rows, const std::filesystem::path& path) {
  require(!rows.empty(), ErrorKind::Config, "no scatter rows to export");
  csv::Table t{{"config", "acc", "rob", "flops"}, {}};
  for (const ScatterRow& r : rows) {
    require(r.natural >= 0.0 && r.natural <= 1.0 && r.robust >= 0.0 && r.robust <= 1.0,
            ErrorKind::Config, "scatter accuracy outside [0,1]");
    t.rows.push_back({r.config, csv::fmt(r.natural), csv::fmt(r.robust), std::to_string(r.flops)});
  }
  csv::write(path, t);
}

inline std::vector<ScatterRow> read_scatter(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  require(t.header == std::vector<std::string>{"config", "acc", "rob", "flops"}, ErrorKind::Io,
          "scatter header must be config,acc,rob,flops");
  std::vector<ScatterRow> rows;
  for (const auto& r : t.rows)
    rows.push_back({r[0], csv::parse_double(r[1]), csv::parse_double(r[2]),
                    static_cast<std::uint64_t>(csv::parse_int(r[3]))});
  return rows;
}

// ---- commands ----------------------------------------------------------------------

struct CommandArgs {
  std::string checkpoint;  // empty: the command's default input
  std::string subnet = "max";
};

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{
      "train-teacher",      "train-progressive", "train-random", "eval-subnet",
      "build-pred-dataset", "train-predictor",   "search",       "export-scatter"};
  return names;
}

namespace detail {

inline std::filesystem::path in_output(const RunConfig& c, const std::string& name) {
  const std::filesystem::path p(name);
  return p.is_absolute() ? p : c.output_dir / p;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorKind::Io, "write failed for " + path.string());
}

inline train::TrainSetup make_setup(const RunConfig& c, const data::Dataset& train) {
  train::TrainSetup s;
  s.train = &train;
  s.hp = c.hp;
  s.attack = c.train_attack;
  s.beta = c.beta;
  s.distill = c.distill;
  s.n_sub = c.plan.n_sub;
  return s;
}

inline train::TrainState load_state(const RunConfig& c, const std::filesystem::path& path) {
  train::TrainState st = train::load(path);
  require(dynet::to_json(st.shared.space()) == dynet::to_json(c.space), ErrorKind::Config,
          "checkpoint " + path.filename().string() + " was trained on a different search space");
  return st;
}

inline void write_log(const std::filesystem::path& path, const train::TrainState& st,
                      bool teacher) {
  std::vector<train::LogRow> rows;
  for (const auto& r : st.log)
    if ((r.stage == "teacher") == teacher) rows.push_back(r);
  train::write_loss_log(path, rows);
}

inline json eval_json(const adv::EvalResult& r, const std::vector<adv::AttackSpec>& attacks) {
  json robust = json::object();
  for (std::size_t a = 0; a < attacks.size(); ++a) robust[attacks[a].name] = r.robust[a];
  return {{"natural", r.natural}, {"robust", robust}, {"count", r.count}};
}

inline adv::EvalResult eval_subnet(const RunConfig& c, const dynet::SharedWeights& shared,
                                   const ArchConfig& cfg, const data::Split& split) {
  const dynet::BnStats stats =
      dynet::recalibrate_bn(shared, cfg, calibration_batches(c, split.train));
  const dynet::Subnet net(shared, cfg, {dynet::BnMode::Fixed, &stats});
  return adv::evaluate(net, split.test, c.eval_attacks, derive_seed(c.seed, "eval"));
}

inline surrogate::EvalSetup eval_setup(const RunConfig& c, const data::Split& split) {
  surrogate::EvalSetup s;
  s.eval = &split.test;
  s.calib = calibration_batches(c, split.train);
  s.attack = c.eval_attacks.front();
  s.eval_seed = derive_seed(c.seed, "eval");
  return s;
}

inline double final_loss(const train::TrainState& st) {
  return st.log.empty() ? 0.0 : st.log.back().loss;
}

inline void save_stage(const RunConfig& c, const train::TrainState& st, const train::Stage& s) {
  // Stored as if the stage boundary had been crossed, so resuming starts
  // the next stage.
  train::TrainState next = st;
  ++next.stage;
  next.epoch = 0;
  train::save(in_output(c, s.name + ".ckpt"), next);
}

inline json train_teacher(const RunConfig& c, const data::Split& split) {
  const auto setup = make_setup(c, split.train);
  train::TrainState st = train::init_state(c.space, derive_seed(c.seed, "train"));
  train::run_schedule(st, {train::teacher_stage(c.plan.teacher_epochs)}, setup);
  train::save(in_output(c, "teacher.ckpt"), st);
  write_log(in_output(c, "teacher_log.csv"), st, true);
  const auto r = eval_subnet(c, st.shared, dynet::max_config(c.space), split);
  return {{"artifacts", {"teacher.ckpt", "teacher_log.csv"}},
          {"epochs", c.plan.teacher_epochs},
          {"steps", st.step},
          {"final_loss", final_loss(st)},
          {"max_config", eval_json(r, c.eval_attacks)}};
}

inline json train_progressive(const RunConfig& c, const data::Split& split,
                              const CommandArgs& args) {
  const std::string from = args.checkpoint.empty() ? "teacher.ckpt" : args.checkpoint;
  train::TrainState st = load_state(c, in_output(c, from));
  require(st.stage >= 1, ErrorKind::State, from + " has no finished teacher stage");
  train::validate(c.plan, c.space);
  const auto setup = make_setup(c, split.train);
  train::Hooks hooks;
  json artifacts = json::array();
  hooks.on_stage_end = [&](const train::TrainState& s, const train::Stage& stage) {
    if (stage.kind != train::StageKind::Distill) return;
    save_stage(c, s, stage);
    artifacts.push_back(stage.name + ".ckpt");
  };
  train::run_schedule(st, train::progressive_schedule(c.plan), setup, hooks);
  train::save(in_output(c, "progressive.ckpt"), st);
  write_log(in_output(c, "progressive_log.csv"), st, false);
  artifacts.push_back("progressive.ckpt");
  artifacts.push_back("progressive_log.csv");
  json phases = json::array();
  for (const auto& p : c.plan.phases)
    phases.push_back({{"name", p.name}, {"free", p.free.names()}, {"epochs", p.epochs}});
  return {{"artifacts", artifacts},
          {"from", from},
          {"phases", phases},
          {"steps", st.step},
          {"final_loss", final_loss(st)}};
}

inline json train_random(const RunConfig& c, const data::Split& split, const CommandArgs& args) {
  const std::string from = args.checkpoint.empty() ? "teacher.ckpt" : args.checkpoint;
  train::TrainState st = load_state(c, in_output(c, from));
  require(st.stage == 1, ErrorKind::State,
          from + " is not a teacher checkpoint (random sampling starts from the teacher)");
  st = train::train_random_baseline(std::move(st), make_setup(c, split.train), c.plan);
  train::save(in_output(c, "random.ckpt"), st);
  write_log(in_output(c, "random_log.csv"), st, false);
  const auto sched = train::random_schedule(c.plan, c.space);
  return {{"artifacts", {"random.ckpt", "random_log.csv"}},
          {"from", from},
          {"free", sched.back().free.names()},
          {"epochs", sched.back().epochs},
          {"steps", st.step},
          {"final_loss", final_loss(st)}};
}

inline ArchConfig subnet_of(const RunConfig& c, const std::string& text) {
  if (text == "max") return dynet::max_config(c.space);
  try {
    return dynet::parse_config(c.space, text);
  } catch (const Error& e) {
    fail(ErrorKind::Config, "subnet '" + text + "': " + e.detail());
  }
}

inline json eval_subnet_cmd(const RunConfig& c, const data::Split& split,
                            const CommandArgs& args) {
  const std::string from = args.checkpoint.empty() ? "progressive.ckpt" : args.checkpoint;
  const ArchConfig cfg = subnet_of(c, args.subnet);
  const train::TrainState st = load_state(c, in_output(c, from));
  const auto r = eval_subnet(c, st.shared, cfg, split);
  json out = eval_json(r, c.eval_attacks);
  out["checkpoint"] = from;
  out["subnet"] = dynet::to_string(c.space, cfg);
  out["flops"] = dynet::count_flops(c.space, cfg).flops;
  return out;
}

inline json build_pred_dataset(const RunConfig& c, const data::Split& split,
                               const CommandArgs& args) {
  const std::string from = args.checkpoint.empty() ? "progressive.ckpt" : args.checkpoint;
  const train::TrainState st = load_state(c, in_output(c, from));
  Rng rng = make_rng(c.seed, "pred_dataset");
  const auto rows = surrogate::build_eval_dataset(st.shared, c.pred_samples,
                                                  eval_setup(c, split), rng);
  surrogate::write_rows(in_output(c, "pred_dataset.csv"), rows);
  double acc = 0.0, rob = 0.0;
  for (const auto& r : rows) {
    acc += r.natural;
    rob += r.robust;
  }
  return {{"artifacts", {"pred_dataset.csv"}},
          {"from", from},
          {"rows", rows.size()},
          {"attack", c.eval_attacks.front().name},
          {"mean_natural", acc / double(rows.size())},
          {"mean_robust", rob / double(rows.size())}};
}

inline json train_predictor_cmd(const RunConfig& c) {
  const auto rows = surrogate::read_rows(in_output(c, "pred_dataset.csv"));
  const std::size_t k = dynet::feature_length(c.space);
  require(rows.front().features.size() == k, ErrorKind::Config,
          "pred_dataset.csv has " + std::to_string(rows.front().features.size()) +
              " features but the space encodes to " + std::to_string(k));
  const auto p = surrogate::train_predictor(rows, c.predictor);
  surrogate::save(in_output(c, "predictor.bin"), p);
  return {{"artifacts", {"predictor.bin"}},
          {"n_train", p.n_train},
          {"n_val", p.n_val},
          {"final_train_loss", p.train_loss.empty() ? 0.0 : p.train_loss.back()},
          {"val_rmse", {{"accuracy", p.val_rmse_accuracy}, {"robustness", p.val_rmse_robustness}}}};
}

inline double flops_limit(const RunConfig& c) {
  if (c.search.flops_limit > 0.0) return c.search.flops_limit;
  return c.flops_fraction *
         static_cast<double>(dynet::count_flops(c.space, dynet::max_config(c.space)).flops);
}

inline json search_cmd(const RunConfig& c) {
  const auto p = surrogate::load(in_output(c, "predictor.bin"));
  require(p.inputs == dynet::feature_length(c.space), ErrorKind::Config,
          "predictor.bin expects " + std::to_string(p.inputs) +
              " features but the space encodes to " +
              std::to_string(dynet::feature_length(c.space)));
  evo::SearchConfig sc = c.search;
  sc.flops_limit = flops_limit(c);
  const auto res = evo::search(c.space, p, sc);
  evo::write_history(in_output(c, "search_history.csv"), c.space, res);
  write_text(in_output(c, "search_front.json"), evo::front_json(c.space, res.front).dump(2) + "\n");
  double best_acc = 0.0, best_rob = 0.0;
  for (const auto& ind : res.front) {
    best_acc = std::max(best_acc, ind.objectives[0]);
    best_rob = std::max(best_rob, ind.objectives[1]);
  }
  return {{"artifacts", {"search_history.csv", "search_front.json"}},
          {"flops_limit", sc.flops_limit},
          {"generations", sc.generations},
          {"population", sc.population},
          {"front_size", res.front.size()},
          {"front_best_predicted", {{"accuracy", best_acc}, {"robustness", best_rob}}}};
}

inline json export_scatter_cmd(const RunConfig& c, const data::Split& split,
                               const CommandArgs& args) {
  const std::string from = args.checkpoint.empty() ? "progressive.ckpt" : args.checkpoint;
  const train::TrainState st = load_state(c, in_output(c, from));
  // The config stream depends on the root seed only, so scatters of
  // different checkpoints score the same students.
  Rng rng = make_rng(c.seed, "scatter");
  const auto dims = train::elastic_dims(c.space);
  const auto setup = eval_setup(c, split);
  std::vector<ScatterRow> rows;
  double acc = 0.0, rob = 0.0, best = 0.0;
  for (std::size_t i = 0; i < c.scatter_samples; ++i) {
    const ArchConfig cfg = dynet::sample_config(c.space, dims, rng);
    const auto r = surrogate::evaluate_config(st.shared, cfg, setup);
    rows.push_back({dynet::to_string(c.space, cfg), r.natural, r.robust, r.flops});
    acc += r.natural;
    rob += r.robust;
    best = std::max(best, r.natural);
  }
  const std::string name = "scatter_" + std::filesystem::path(from).stem().string() + ".csv";
  export_scatter(rows, in_output(c, name));
  const double n = double(rows.size());
  return {{"artifacts", {name}},
          {"from", from},
          {"rows", rows.size()},
          {"attack", c.eval_attacks.front().name},
          {"mean_natural", acc / n},
          {"mean_robust", rob / n},
          {"mean_sum", (acc + rob) / n},
          {"best_natural", best}};
}

}  // namespace detail

/// Runs one command, writes `<command>.json` next to its artifacts and
/// returns the summary. Throws proard::Error on failure.
inline json run(const std::string& command, const RunConfig& c, const CommandArgs& args = {}) {
  validate(c);
  const auto& names = commands();
  require(std::find(names.begin(), names.end(), command) != names.end(), ErrorKind::Config,
          "unknown command '" + command + "'");
  if (command == "eval-subnet") detail::subnet_of(c, args.subnet);
  std::error_code ec;
  std::filesystem::create_directories(c.output_dir, ec);
  require(!ec, ErrorKind::Io, "cannot create output directory: " + ec.message());

  json out;
  if (command == "train-predictor") {
    out = detail::train_predictor_cmd(c);
  } else if (command == "search") {
    out = detail::search_cmd(c);
  } else {
    const data::Split split = load_data(c);
    if (command == "train-teacher") out = detail::train_teacher(c, split);
    else if (command == "train-progressive") out = detail::train_progressive(c, split, args);
    else if (command == "train-random") out = detail::train_random(c, split, args);
    else if (command == "eval-subnet") out = detail::eval_subnet_cmd(c, split, args);
    else if (command == "build-pred-dataset") out = detail::build_pred_dataset(c, split, args);
    else out = detail::export_scatter_cmd(c, split, args);
  }
  out["command"] = command;
  out["seed"] = c.seed;
  detail::write_text(detail::in_output(c, command + ".json"), out.dump(2) + "\n");
  return out;
}

/// Exit status for a failure: 2 for configuration problems, 1 otherwise.
inline int exit_code(ErrorKind kind) { return kind == ErrorKind::Config ? 2 : 1; }

}  // namespace proard::cli
