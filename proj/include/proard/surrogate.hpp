#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "proard/advkit.hpp"
#include "proard/binio.hpp"
#include "proard/csv.hpp"
#include "proard/data.hpp"
#include "proard/dynet/flops.hpp"
#include "proard/dynet/network.hpp"
#include "proard/protrain.hpp"

namespace proard::surrogate {

using ad::Tape;
using ad::Var;
using dynet::ArchConfig;
using dynet::DimSet;
using dynet::SearchSpace;
using dynet::SharedWeights;

struct EvalRow {
  std::vector<double> features;  // encode_config of the evaluated subnet
  double natural = 0.0;
  double robust = 0.0;
  std::uint64_t flops = 0;
};

inline void validate(const EvalRow& r, std::size_t feature_len) {
  require(r.features.size() == feature_len, ErrorKind::Shape,
          "eval row has " + std::to_string(r.features.size()) + " features, space needs " +
              std::to_string(feature_len));
  require(r.natural >= 0.0 && r.natural <= 1.0 && r.robust >= 0.0 && r.robust <= 1.0,
          ErrorKind::Config, "eval row accuracy outside [0,1]");
}

struct EvalSetup {
  const data::Dataset* eval = nullptr;  // examples scored for both accuracies
  std::vector<Array> calib;             // BN recalibration batches
  adv::AttackSpec attack = adv::pgd_spec(8.0 / 255.0, 20, 2.0 / 255.0, true);
  std::uint64_t eval_seed = 0;          // every config sees the same attack randomness
  std::size_t batch_size = 256;
};

/// Recalibrates BN for `cfg`, then scores it with fixed statistics.
inline EvalRow evaluate_config(const SharedWeights& shared, const ArchConfig& cfg,
                               const EvalSetup& setup) {
  require(setup.eval != nullptr, ErrorKind::Config, "evaluation set is missing");
  const dynet::BnStats stats = dynet::recalibrate_bn(shared, cfg, setup.calib);
  const dynet::Subnet net(shared, cfg, {dynet::BnMode::Fixed, &stats});
  const adv::EvalResult r =
      adv::evaluate(net, *setup.eval, {setup.attack}, setup.eval_seed, setup.batch_size);
  const SearchSpace& space = shared.space();
  return {dynet::encode_config(space, cfg), r.natural, r.robust.at(0),
          dynet::count_flops(space, cfg).flops};
}

inline std::vector<EvalRow> build_eval_dataset(const SharedWeights& shared,
                                               const std::vector<ArchConfig>& configs,
                                               const EvalSetup& setup) {
  require(!configs.empty(), ErrorKind::Config, "need at least one config to evaluate");
  std::vector<EvalRow> rows;
  rows.reserve(configs.size());
  for (const ArchConfig& c : configs) rows.push_back(evaluate_config(shared, c, setup));
  return rows;
}

/// `n` configs drawn uniformly over every elastic dimension.
inline std::vector<EvalRow> build_eval_dataset(const SharedWeights& shared, std::size_t n,
                                               const EvalSetup& setup, Rng& rng) {
  require(n >= 1, ErrorKind::Config, "n must be >= 1");
  const SearchSpace& space = shared.space();
  const DimSet dims = train::elastic_dims(space);
  std::vector<ArchConfig> configs;
  for (std::size_t i = 0; i < n; ++i) configs.push_back(dynet::sample_config(space, dims, rng));
  return build_eval_dataset(shared, configs, setup);
}

/// Header `f0,...,f{K-1},acc,rob,flops`.
inline void write_rows(const std::filesystem::path& path, const std::vector<EvalRow>& rows) {
  require(!rows.empty(), ErrorKind::Config, "no rows to write");
  csv::Table t;
  const std::size_t k = rows.front().features.size();
  for (std::size_t i = 0; i < k; ++i) t.header.push_back("f" + std::to_string(i));
  t.header.insert(t.header.end(), {"acc", "rob", "flops"});
  for (const EvalRow& r : rows) {
    validate(r, k);
    std::vector<std::string> line;
    for (double f : r.features) line.push_back(csv::fmt(f));
    line.push_back(csv::fmt(r.natural));
    line.push_back(csv::fmt(r.robust));
    line.push_back(std::to_string(r.flops));
    t.rows.push_back(std::move(line));
  }
  csv::write(path, t);
}

inline std::vector<EvalRow> read_rows(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  require(t.header.size() >= 4 && t.header[t.header.size() - 3] == "acc" &&
              t.header[t.header.size() - 2] == "rob" && t.header.back() == "flops",
          ErrorKind::Io, "eval dataset header must end with acc,rob,flops");
  const std::size_t k = t.header.size() - 3;
  std::vector<EvalRow> rows;
  for (const auto& line : t.rows) {
    EvalRow r;
    for (std::size_t i = 0; i < k; ++i) r.features.push_back(csv::parse_double(line[i]));
    r.natural = csv::parse_double(line[k]);
    r.robust = csv::parse_double(line[k + 1]);
    r.flops = static_cast<std::uint64_t>(csv::parse_int(line[k + 2]));
    validate(r, k);
    rows.push_back(std::move(r));
  }
  require(!rows.empty(), ErrorKind::Io, "eval dataset " + path.string() + " has no rows");
  return rows;
}

// ---- predictor ------------------------------------------------------------------

struct PredictorHp {
  std::size_t hidden = 128;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

inline void validate(const PredictorHp& hp) {
  require(hp.hidden >= 1, ErrorKind::Config, "predictor needs hidden units");
  require(hp.val_fraction > 0.0 && hp.val_fraction < 1.0, ErrorKind::Config,
          "validation fraction must lie in (0,1)");
  train::Hyperparams sgd;
  sgd.lr = hp.lr;
  sgd.momentum = hp.momentum;
  sgd.weight_decay = hp.weight_decay;
  sgd.batch_size = hp.batch_size;
  train::validate(sgd);
}

struct Prediction {
  double accuracy = 0.0;
  double robustness = 0.0;
};

/// Display copy limited to [0,1]; search and RMSE use raw outputs.
inline Prediction clipped(Prediction p) {
  return {std::clamp(p.accuracy, 0.0, 1.0), std::clamp(p.robustness, 0.0, 1.0)};
}

/// in -> hidden -> hidden -> 2, ReLU between layers. Inputs are min-max
/// scaled with training-set ranges, which leaves one-hot features unchanged;
/// a constant feature maps to 0.
struct Predictor {
  std::size_t inputs = 0;
  std::vector<Array> params;  // w1 b1 w2 b2 w3 b3
  std::vector<double> offset;  // per-feature training minimum
  std::vector<double> scale;   // per-feature training range, 1 when constant
  // training metadata
  std::vector<double> train_loss;  // full training-set MSE after each epoch
  double val_rmse_accuracy = 0.0;
  double val_rmse_robustness = 0.0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;

  Var forward(Tape& t, Var x) const {
    Var h = t.relu(t.add_channel_bias(t.linear(x, t.param(0, params[0])), t.param(1, params[1])));
    h = t.relu(t.add_channel_bias(t.linear(h, t.param(2, params[2])), t.param(3, params[3])));
    return t.add_channel_bias(t.linear(h, t.param(4, params[4])), t.param(5, params[5]));
  }

  Array normalize(std::span<const std::vector<double>> features) const {
    Array x(Shape{features.size(), inputs});
    for (std::size_t r = 0; r < features.size(); ++r) {
      require(features[r].size() == inputs, ErrorKind::Shape,
              "feature length " + std::to_string(features[r].size()) + " does not match predictor (" +
                  std::to_string(inputs) + ")");
      for (std::size_t i = 0; i < inputs; ++i)
        x[r * inputs + i] = (features[r][i] - offset[i]) / scale[i];
    }
    return x;
  }

  std::vector<Prediction> predict_batch(std::span<const std::vector<double>> features) const {
    Tape t(false);
    const Array y = t.value(forward(t, t.input(normalize(features), false)));
    std::vector<Prediction> out(features.size());
    for (std::size_t r = 0; r < out.size(); ++r) {
      out[r] = {y[2 * r], y[2 * r + 1]};
      require(std::isfinite(out[r].accuracy) && std::isfinite(out[r].robustness),
              ErrorKind::Numeric, "predictor produced a non-finite value");
    }
    return out;
  }
};

inline Prediction predict(const Predictor& p, std::span<const double> features) {
  const std::vector<std::vector<double>> one{{features.begin(), features.end()}};
  return p.predict_batch(one).front();
}

inline Prediction predict(const Predictor& p, const SearchSpace& space, const ArchConfig& cfg) {
  return predict(p, dynet::encode_config(space, cfg));
}

struct Rmse {
  double accuracy = 0.0;
  double robustness = 0.0;
};

inline Rmse rmse(std::span<const Prediction> pred, std::span<const EvalRow> rows) {
  require(!rows.empty(), ErrorKind::Config, "rmse of an empty row set");
  require(pred.size() == rows.size(), ErrorKind::Shape, "prediction and row counts differ");
  double sa = 0.0, sr = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    sa += (pred[i].accuracy - rows[i].natural) * (pred[i].accuracy - rows[i].natural);
    sr += (pred[i].robustness - rows[i].robust) * (pred[i].robustness - rows[i].robust);
  }
  const double n = static_cast<double>(rows.size());
  return {std::sqrt(sa / n), std::sqrt(sr / n)};
}

inline Rmse rmse(const Predictor& p, std::span<const EvalRow> rows) {
  require(!rows.empty(), ErrorKind::Config, "rmse of an empty row set");
  std::vector<std::vector<double>> f;
  for (const EvalRow& r : rows) f.push_back(r.features);
  const auto pred = p.predict_batch(f);
  return rmse(pred, rows);
}

struct RowSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded shuffle; the last max(1, round(val_fraction * n)) rows validate.
inline RowSplit split_rows(std::size_t n, double val_fraction, std::uint64_t seed) {
  require(n >= 2, ErrorKind::Config, "predictor needs at least two rows");
  Rng rng = make_rng(seed, "predictor.split");
  const auto order = data::shuffled_indices(n, rng);
  const std::size_t n_val =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_fraction * double(n))));
  require(n_val < n, ErrorKind::Config, "degenerate train/validation split");
  return {{order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val)},
          {order.end() - static_cast<std::ptrdiff_t>(n_val), order.end()}};
}

inline Predictor train_predictor(const std::vector<EvalRow>& rows, const PredictorHp& hp) {
  validate(hp);
  require(!rows.empty(), ErrorKind::Config, "predictor needs at least two rows");
  const std::size_t in = rows.front().features.size();
  require(in >= 1, ErrorKind::Config, "rows carry no features");
  for (const EvalRow& r : rows) validate(r, in);
  const RowSplit split = split_rows(rows.size(), hp.val_fraction, hp.seed);

  auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<EvalRow> out;
    for (std::size_t i : idx) out.push_back(rows[i]);
    return out;
  };
  const std::vector<EvalRow> tr = gather(split.train), va = gather(split.val);

  Predictor p;
  p.inputs = in;
  p.n_train = tr.size();
  p.n_val = va.size();
  p.offset = tr.front().features;
  std::vector<double> hi = tr.front().features;
  for (const EvalRow& r : tr)
    for (std::size_t i = 0; i < in; ++i) {
      p.offset[i] = std::min(p.offset[i], r.features[i]);
      hi[i] = std::max(hi[i], r.features[i]);
    }
  p.scale.resize(in);
  for (std::size_t i = 0; i < in; ++i) p.scale[i] = hi[i] - p.offset[i] > 1e-12 ? hi[i] - p.offset[i] : 1.0;
  const double nt = static_cast<double>(tr.size());

  // Hidden weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the output layer
  // starts near zero with its bias at the target mean, so a constant target
  // is fit from step 0.
  Rng init = make_rng(hp.seed, "predictor.init");
  const std::size_t h = hp.hidden;
  auto uniform_init = [&](Shape s, double bound) {
    Array a(std::move(s));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = uniform(init, -bound, bound);
    return a;
  };
  p.params.push_back(uniform_init({h, in}, 1.0 / std::sqrt(double(in))));
  p.params.emplace_back(Shape{h});
  p.params.push_back(uniform_init({h, h}, 1.0 / std::sqrt(double(h))));
  p.params.emplace_back(Shape{h});
  p.params.push_back(uniform_init({2, h}, 1e-3));
  Array b3(Shape{2});
  for (const EvalRow& r : tr) {
    b3[0] += r.natural / nt;
    b3[1] += r.robust / nt;
  }
  p.params.push_back(std::move(b3));

  train::Hyperparams sgd;
  sgd.lr = hp.lr;
  sgd.momentum = hp.momentum;
  sgd.weight_decay = hp.weight_decay;
  sgd.batch_size = hp.batch_size;
  sgd.decay_scope = train::DecayScope::All;
  train::OptimizerState opt = train::make_optimizer(p.params);

  std::vector<std::vector<double>> tr_features;
  for (const EvalRow& r : tr) tr_features.push_back(r.features);
  const Array x_all = p.normalize(tr_features);
  Array y_all(Shape{tr.size(), 2});
  for (std::size_t i = 0; i < tr.size(); ++i) {
    y_all[2 * i] = tr[i].natural;
    y_all[2 * i + 1] = tr[i].robust;
  }

  Rng order_rng = make_rng(hp.seed, "predictor.order");
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    const auto order = data::shuffled_indices(tr.size(), order_rng);
    for (const auto& idx : data::batches(order, hp.batch_size)) {
      Tape t;
      Var loss = t.mse(p.forward(t, t.input(take_rows(x_all, idx), false)), take_rows(y_all, idx));
      train::sgd_step(p.params, t.backward(loss), opt, sgd, hp.lr);
    }
    Tape t(false);
    const double loss = t.value(t.mse(p.forward(t, t.input(x_all, false)), y_all))[0];
    require(std::isfinite(loss), ErrorKind::Numeric, "predictor training diverged");
    p.train_loss.push_back(loss);
  }
  const Rmse v = rmse(p, va);
  p.val_rmse_accuracy = v.accuracy;
  p.val_rmse_robustness = v.robustness;
  return p;
}

// ---- persistence ----------------------------------------------------------------

inline io::Bundle to_bundle(const Predictor& p) {
  io::Bundle b;
  b.meta["kind"] = "predictor";
  b.meta["inputs"] = p.inputs;
  b.meta["train_loss"] = p.train_loss;
  b.meta["val_rmse_accuracy"] = p.val_rmse_accuracy;
  b.meta["val_rmse_robustness"] = p.val_rmse_robustness;
  b.meta["n_train"] = p.n_train;
  b.meta["n_val"] = p.n_val;
  const char* names[] = {"w1", "b1", "w2", "b2", "w3", "b3"};
  for (std::size_t i = 0; i < p.params.size(); ++i) b.arrays.emplace_back(names[i], p.params[i]);
  Array offset(Shape{p.inputs}), scale(Shape{p.inputs});
  for (std::size_t i = 0; i < p.inputs; ++i) {
    offset[i] = p.offset[i];
    scale[i] = p.scale[i];
  }
  b.arrays.emplace_back("norm_offset", std::move(offset));
  b.arrays.emplace_back("norm_scale", std::move(scale));
  return b;
}

inline Predictor from_bundle(const io::Bundle& b) {
  require(b.meta.value("kind", std::string{}) == "predictor", ErrorKind::Io,
          "checkpoint is not a predictor");
  Predictor p;
  p.inputs = b.meta.at("inputs").get<std::size_t>();
  p.train_loss = b.meta.at("train_loss").get<std::vector<double>>();
  p.val_rmse_accuracy = b.meta.at("val_rmse_accuracy").get<double>();
  p.val_rmse_robustness = b.meta.at("val_rmse_robustness").get<double>();
  p.n_train = b.meta.at("n_train").get<std::size_t>();
  p.n_val = b.meta.at("n_val").get<std::size_t>();
  for (const char* name : {"w1", "b1", "w2", "b2", "w3", "b3"}) p.params.push_back(b.at(name));
  const Array& offset = b.at("norm_offset");
  const Array& scale = b.at("norm_scale");
  require(p.params[0].rank() == 2 && p.params[0].dim(1) == p.inputs && offset.size() == p.inputs &&
              scale.size() == p.inputs && p.params[4].rank() == 2 && p.params[4].dim(0) == 2,
          ErrorKind::Io, "predictor checkpoint arrays are inconsistent");
  p.offset.assign(offset.data().begin(), offset.data().end());
  p.scale.assign(scale.data().begin(), scale.data().end());
  return p;
}

inline void save(const std::filesystem::path& path, const Predictor& p) {
  io::save(path, to_bundle(p));
}

inline Predictor load(const std::filesystem::path& path) { return from_bundle(io::load(path)); }

}  // namespace proard::surrogate
