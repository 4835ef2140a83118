#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "proard/autodiff.hpp"
#include "proard/data.hpp"
#include "proard/rng.hpp"

namespace proard::adv {

using ad::Tape;
using ad::Var;

/// Any type with `Var forward(Tape&, Var) const` is a network here.
struct FnNet {
  std::function<Var(Tape&, Var)> fn;
  Var forward(Tape& t, Var x) const { return fn(t, x); }
};

enum class Method { Fgsm, Pgd };

/// L-infinity attack settings. FGSM ignores steps, step_size and random_start.
struct AttackSpec {
  Method method = Method::Pgd;
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 10;
  double step_size = 2.0 / 255.0;
  bool random_start = true;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  std::string name = "PGD10";
};

inline void validate(const AttackSpec& s) {
  require(std::isfinite(s.epsilon) && s.epsilon >= 0.0, ErrorKind::Config,
          "attack epsilon must be finite and >= 0");
  require(s.steps >= 1, ErrorKind::Config, "attack steps must be >= 1");
  require(std::isfinite(s.step_size) && s.step_size > 0.0, ErrorKind::Config,
          "attack step size must be > 0");
  require(s.clamp_lo < s.clamp_hi, ErrorKind::Config, "attack clamp bounds are empty");
}

inline AttackSpec fgsm_spec(double eps) {
  return {Method::Fgsm, eps, 1, eps > 0 ? eps : 1.0, false, 0.0, 1.0, "FGSM"};
}

inline AttackSpec pgd_spec(double eps, std::size_t steps, double step_size, bool random_start) {
  return {Method::Pgd, eps, steps, step_size, random_start, 0.0, 1.0,
          "PGD" + std::to_string(steps)};
}

enum class TeacherMode { Frozen, Live };

struct DistillSpec {
  double alpha = 0.9;
  TeacherMode teacher_mode = TeacherMode::Frozen;
};

inline void validate(const DistillSpec& d) {
  require(d.alpha >= 0.0 && d.alpha <= 1.0, ErrorKind::Config, "alpha must lie in [0,1]");
}

/// Attack objectives, all maximized.
///   CrossEntropy: CE(net(x'), labels)
///   TradesKl:     KL(reference || net(x')), reference = clean logits
///   DistillKl:    KL(net(x') || reference), reference = teacher logits
enum class LossKind { CrossEntropy, TradesKl, DistillKl };

struct Target {
  std::vector<int> labels;
  Array logits;
};

/// Scalar objective of the perturbed input.
using Objective = std::function<Var(Tape&, Var)>;

template <class Net>
Objective make_objective(const Net& net, const Target& target, LossKind kind) {
  switch (kind) {
    case LossKind::CrossEntropy:
      return [&net, &target](Tape& t, Var x) {
        return t.cross_entropy(net.forward(t, x), target.labels);
      };
    case LossKind::TradesKl:
      return [&net, &target](Tape& t, Var x) {
        return t.kl_divergence(t.constant(target.logits), net.forward(t, x));
      };
    case LossKind::DistillKl:
      return [&net, &target](Tape& t, Var x) {
        return t.kl_divergence(net.forward(t, x), t.constant(target.logits));
      };
  }
  fail(ErrorKind::Config, "unknown loss kind");
}

inline Array input_gradient(const Objective& f, const Array& x) {
  Tape t(false);
  Var xv = t.input(x, true);
  ad::GradientSet g = t.backward(f(t, xv));
  require(g.input && g.input->all_finite(), ErrorKind::Numeric, "non-finite input gradient");
  return *g.input;
}

namespace detail {

inline double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

/// Nearest point of [x0-eps, x0+eps] ∩ [lo, hi]. The ball edges are pulled
/// inward by ulps until |edge - x0| <= eps holds in floating point.
inline double project(double v, double x0, double eps, double lo, double hi) {
  double up = x0 + eps;
  while (up - x0 > eps) up = std::nextafter(up, -std::numeric_limits<double>::infinity());
  double dn = x0 - eps;
  while (x0 - dn > eps) dn = std::nextafter(dn, std::numeric_limits<double>::infinity());
  return std::clamp(std::clamp(v, dn, up), lo, hi);
}

inline void check_domain(const Array& x, const AttackSpec& s) {
  for (double v : x.data())
    require(v >= s.clamp_lo && v <= s.clamp_hi, ErrorKind::Config,
            "attack input outside clamp bounds");
}

}  // namespace detail

inline Array fgsm(const Objective& f, const Array& x, const AttackSpec& spec) {
  validate(spec);
  detail::check_domain(x, spec);
  const Array g = input_gradient(f, x);
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = detail::project(x[i] + spec.epsilon * detail::sign(g[i]), x[i], spec.epsilon,
                             spec.clamp_lo, spec.clamp_hi);
  return out;
}

/// Returns the final iterate. Random start is uniform in [-eps, eps] per coordinate.
inline Array pgd(const Objective& f, const Array& x0, const AttackSpec& spec, Rng& rng) {
  validate(spec);
  detail::check_domain(x0, spec);
  const double eps = spec.epsilon;
  Array xa = x0;
  if (spec.random_start && eps > 0.0)
    for (std::size_t i = 0; i < xa.size(); ++i)
      xa[i] = detail::project(x0[i] + uniform(rng, -eps, eps), x0[i], eps, spec.clamp_lo,
                              spec.clamp_hi);
  for (std::size_t s = 0; s < spec.steps; ++s) {
    const Array g = input_gradient(f, xa);
    for (std::size_t i = 0; i < xa.size(); ++i)
      xa[i] = detail::project(xa[i] + spec.step_size * detail::sign(g[i]), x0[i], eps,
                              spec.clamp_lo, spec.clamp_hi);
  }
  return xa;
}

template <class Net>
Array fgsm(const Net& net, const Array& x, const Target& target, const AttackSpec& spec,
           LossKind kind) {
  return fgsm(make_objective(net, target, kind), x, spec);
}

template <class Net>
Array pgd(const Net& net, const Array& x, const Target& target, const AttackSpec& spec,
          LossKind kind, Rng& rng) {
  return pgd(make_objective(net, target, kind), x, spec, rng);
}

/// Dispatches on spec.method.
template <class Net>
Array attack(const Net& net, const Array& x, const Target& target, const AttackSpec& spec,
             LossKind kind, Rng& rng) {
  return spec.method == Method::Fgsm ? fgsm(net, x, target, spec, kind)
                                     : pgd(net, x, target, spec, kind, rng);
}

struct TradesTerms {
  Var loss;
  Var ce;
  Var kl;  // invalid when beta == 0
};

/// CE(net(x), y) + beta * KL(net(x) || net(x_adv)); x_adv maximizes the KL
/// term. `adv_net` runs the perturbed branch so callers can route batch
/// statistics separately; it must share parameters with `clean_net`.
template <class Net, class AdvNet>
TradesTerms trades_loss(Tape& t, const Net& clean_net, const AdvNet& adv_net, const Array& x,
                        std::span<const int> y, double beta, const AttackSpec& inner, Rng& rng) {
  require(std::isfinite(beta) && beta >= 0.0, ErrorKind::Config, "beta must be >= 0");
  Var logits = clean_net.forward(t, t.input(x, false));
  Var ce = t.cross_entropy(logits, y);
  if (beta == 0.0) return {ce, ce, Var{}};
  const Target ref{{}, t.value(logits)};
  const Array x_adv = attack(adv_net, x, ref, inner, LossKind::TradesKl, rng);
  Var kl = t.kl_divergence(logits, adv_net.forward(t, t.input(x_adv, false)));
  return {t.add(ce, t.scale(kl, beta)), ce, kl};
}

template <class Net>
TradesTerms trades_loss(Tape& t, const Net& net, const Array& x, std::span<const int> y,
                        double beta, const AttackSpec& inner, Rng& rng) {
  return trades_loss(t, net, net, x, y, beta, inner, rng);
}

struct RsladTerms {
  Var loss;      // (1-alpha) KL(S(x)||T(x)) + alpha KL(S(x_adv)||T(x))
  Var kl_clean;
  Var kl_adv;    // the inner objective
};

inline RsladTerms rslad_from_logits(Tape& t, Var s_clean, Var s_adv, Var teacher, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::Config, "alpha must lie in [0,1]");
  Var kc = t.kl_divergence(s_clean, teacher);
  Var ka = t.kl_divergence(s_adv, teacher);
  return {t.add(t.scale(kc, 1.0 - alpha), t.scale(ka, alpha)), kc, ka};
}

/// Inner objective of the distillation step: KL(S(x') || T(x)).
template <class Net>
Objective rslad_inner(const Net& student, const Target& teacher) {
  return make_objective(student, teacher, LossKind::DistillKl);
}

template <class Net>
RsladTerms rslad_losses(Tape& t, const Net& student, const Array& teacher_logits, const Array& x,
                        const Array& x_adv, const DistillSpec& spec) {
  validate(spec);
  Var s_clean = student.forward(t, t.input(x, false));
  Var s_adv = student.forward(t, t.input(x_adv, false));
  require_same_shape(t.value(s_clean), teacher_logits, "student vs teacher logits");
  return rslad_from_logits(t, s_clean, s_adv, t.constant(teacher_logits), spec.alpha);
}

struct EvalResult {
  double natural = 0.0;
  std::vector<double> robust;  // one per attack, in order
  std::size_t count = 0;
};

/// Row-wise argmax; ties go to the lowest index.
inline std::vector<int> predictions(const Array& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (logits[r * c + k] > logits[r * c + best]) best = k;
    out[r] = static_cast<int>(best);
  }
  return out;
}

template <class Net>
Array infer(const Net& net, const Array& x) {
  Tape t(false);
  return t.value(net.forward(t, t.input(x, false)));
}

/// White-box evaluation: each attack maximizes CE on true labels against
/// `net`. Attack randomness is derived from `seed` alone, so repeated calls
/// agree exactly.
template <class Net>
EvalResult evaluate(const Net& net, const data::Dataset& ds, const std::vector<AttackSpec>& attacks,
                    std::uint64_t seed, std::size_t batch_size = 256) {
  require(!ds.empty(), ErrorKind::Config, "evaluate: empty dataset");
  for (const auto& a : attacks) validate(a);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t natural = 0;
  std::vector<std::size_t> robust(attacks.size(), 0);
  std::vector<Rng> rngs;
  for (std::size_t a = 0; a < attacks.size(); ++a)
    rngs.push_back(make_rng(seed, "eval.attack." + std::to_string(a)));
  for (const auto& idx : data::batches(order, batch_size)) {
    const data::Dataset b = ds.subset(idx);
    auto count = [&](const Array& x) {
      const auto pred = predictions(infer(net, x));
      std::size_t hit = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == b.y[i];
      return hit;
    };
    natural += count(b.x);
    const Target target{b.y, {}};
    for (std::size_t a = 0; a < attacks.size(); ++a)
      robust[a] += count(attack(net, b.x, target, attacks[a], LossKind::CrossEntropy, rngs[a]));
  }
  EvalResult r;
  r.count = ds.size();
  r.natural = double(natural) / double(r.count);
  for (std::size_t hits : robust) r.robust.push_back(double(hits) / double(r.count));
  return r;
}

}  // namespace proard::adv
