#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "proard/autodiff.hpp"
#include "proard/rng.hpp"

namespace proard::ad {

using PrimitiveFn = std::function<Var(Tape&, std::span<const Var>)>;
using PointFn = std::function<std::vector<Array>(Rng&)>;

/// A primitive plus a generator of evaluation points that stay away from
/// its non-differentiable loci.
struct PrimitiveDef {
  PrimitiveFn apply;
  PointFn sample_point;
};

struct GradCheckReport {
  std::string primitive;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Relative error with a small absolute floor on the denominator so exact
/// zeros on both sides compare as equal.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of sum(seed * f(point)) against central
/// finite differences. The seed is drawn from `seed_rng_seed`.
inline GradCheckReport grad_check(const std::string& name, const PrimitiveFn& fn,
                                  const std::vector<Array>& point, double tolerance,
                                  double step = 1e-5, std::uint64_t seed_rng_seed = 7) {
  auto objective = [&](const std::vector<Array>& xs, const Array* seed) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    Var out = fn(tape, vars);
    const Array& y = tape.value(out);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (*seed)[i] * y[i];
    return s;
  };

  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : point) vars.push_back(tape.variable(x));
  Var out = fn(tape, vars);
  Rng seed_rng(seed_rng_seed);
  Array seed(tape.value(out).shape());
  for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = uniform(seed_rng, -1.0, 1.0);
  tape.backward(out, seed);

  GradCheckReport report;
  report.primitive = name;
  report.tolerance = tolerance;
  std::vector<Array> probe = point;
  for (std::size_t a = 0; a < point.size(); ++a) {
    const Array analytic = tape.grad(vars[a]);
    for (std::size_t i = 0; i < point[a].size(); ++i) {
      probe[a][i] = point[a][i] + step;
      const double up = objective(probe, &seed);
      probe[a][i] = point[a][i] - step;
      const double down = objective(probe, &seed);
      probe[a][i] = point[a][i];
      const double numeric = (up - down) / (2.0 * step);
      report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic[i] - numeric));
      report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic[i], numeric));
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

namespace detail {

inline Array random_array(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = uniform(rng, lo, hi);
  return a;
}

/// Values bounded away from zero by `gap`, random sign.
inline Array away_from_zero(Rng& rng, Shape shape, double gap = 0.05) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double mag = uniform(rng, gap, 1.0);
    a[i] = uniform(rng, 0.0, 1.0) < 0.5 ? -mag : mag;
  }
  return a;
}

}  // namespace detail

/// Every primitive the engine records, with point generators.
inline const std::map<std::string, PrimitiveDef>& primitives() {
  using detail::away_from_zero;
  using detail::random_array;
  static const std::map<std::string, PrimitiveDef> registry = {
      {"linear",
       {[](Tape& t, std::span<const Var> v) { return t.linear(v[0], v[1]); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {3, 4}), random_array(r, {5, 4})}; }}},
      {"add_channel_bias",
       {[](Tape& t, std::span<const Var> v) { return t.add_channel_bias(v[0], v[1]); },
        [](Rng& r) {
          return std::vector<Array>{random_array(r, {2, 3, 2, 2}), random_array(r, {3})};
        }}},
      {"add",
       {[](Tape& t, std::span<const Var> v) { return t.add(v[0], v[1]); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {3, 4}), random_array(r, {3, 4})}; }}},
      {"scale",
       {[](Tape& t, std::span<const Var> v) { return t.scale(v[0], -1.7); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {2, 5})}; }}},
      {"relu",
       {[](Tape& t, std::span<const Var> v) { return t.relu(v[0]); },
        [](Rng& r) { return std::vector<Array>{away_from_zero(r, {4, 5})}; }}},
      {"sum",
       {[](Tape& t, std::span<const Var> v) { return t.sum(v[0]); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {3, 4})}; }}},
      {"mean",
       {[](Tape& t, std::span<const Var> v) { return t.mean(v[0]); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {3, 4})}; }}},
      {"conv2d",
       {[](Tape& t, std::span<const Var> v) { return t.conv2d(v[0], v[1], 1, 1); },
        [](Rng& r) {
          return std::vector<Array>{random_array(r, {2, 2, 4, 4}), random_array(r, {3, 2, 3, 3})};
        }}},
      {"conv2d_strided",
       {[](Tape& t, std::span<const Var> v) { return t.conv2d(v[0], v[1], 2, 2); },
        [](Rng& r) {
          return std::vector<Array>{random_array(r, {2, 2, 5, 5}), random_array(r, {2, 2, 5, 5})};
        }}},
      {"batch_norm",
       {[](Tape& t, std::span<const Var> v) { return t.batch_norm(v[0], v[1], v[2], 1e-5); },
        [](Rng& r) {
          return std::vector<Array>{random_array(r, {5, 3}), random_array(r, {3}, 0.5, 1.5),
                                    random_array(r, {3})};
        }}},
      {"batch_norm_spatial",
       {[](Tape& t, std::span<const Var> v) { return t.batch_norm(v[0], v[1], v[2], 1e-5); },
        [](Rng& r) {
          return std::vector<Array>{random_array(r, {2, 3, 2, 2}), random_array(r, {3}, 0.5, 1.5),
                                    random_array(r, {3})};
        }}},
      {"batch_norm_fixed",
       {[](Tape& t, std::span<const Var> v) {
          static const std::vector<double> mean{0.1, -0.2, 0.3}, var{0.5, 1.2, 0.8};
          return t.batch_norm_fixed(v[0], v[1], v[2], mean, var, 1e-5);
        },
        [](Rng& r) {
          return std::vector<Array>{random_array(r, {4, 3}), random_array(r, {3}, 0.5, 1.5),
                                    random_array(r, {3})};
        }}},
      {"global_avg_pool",
       {[](Tape& t, std::span<const Var> v) { return t.global_avg_pool(v[0]); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {2, 3, 3, 2})}; }}},
      {"flatten",
       {[](Tape& t, std::span<const Var> v) { return t.flatten(v[0]); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {2, 3, 2, 2})}; }}},
      {"channel_fit_pad",
       {[](Tape& t, std::span<const Var> v) { return t.channel_fit(v[0], 5); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {2, 3, 2, 2})}; }}},
      {"channel_fit_truncate",
       {[](Tape& t, std::span<const Var> v) { return t.channel_fit(v[0], 2); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {3, 4})}; }}},
      {"log_softmax",
       {[](Tape& t, std::span<const Var> v) { return t.log_softmax(v[0]); },
        [](Rng& r) { return std::vector<Array>{random_array(r, {3, 4}, -2.0, 2.0)}; }}},
      {"cross_entropy",
       {[](Tape& t, std::span<const Var> v) {
          static const std::vector<int> labels{0, 2, 1};
          return t.cross_entropy(v[0], labels);
        },
        [](Rng& r) { return std::vector<Array>{random_array(r, {3, 3}, -2.0, 2.0)}; }}},
      {"kl_divergence",
       {[](Tape& t, std::span<const Var> v) { return t.kl_divergence(v[0], v[1]); },
        [](Rng& r) {
          return std::vector<Array>{random_array(r, {3, 4}, -2.0, 2.0),
                                    random_array(r, {3, 4}, -2.0, 2.0)};
        }}},
      {"mse",
       {[](Tape& t, std::span<const Var> v) {
          static const Array target(Shape{2, 2}, std::vector<double>{0.1, -0.4, 0.7, 0.0});
          return t.mse(v[0], target);
        },
        [](Rng& r) { return std::vector<Array>{random_array(r, {2, 2})}; }}},
  };
  return registry;
}

inline GradCheckReport grad_check(const std::string& primitive, const std::vector<Array>& point,
                                  double tolerance) {
  const auto& reg = primitives();
  auto it = reg.find(primitive);
  require(it != reg.end(), ErrorKind::Config, "unknown primitive '" + primitive + "'");
  return grad_check(primitive, it->second.apply, point, tolerance);
}

}  // namespace proard::ad
