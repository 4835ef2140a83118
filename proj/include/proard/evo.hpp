#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "proard/csv.hpp"
#include "proard/dynet/flops.hpp"
#include "proard/dynet/space.hpp"
#include "proard/rng.hpp"
#include "proard/surrogate.hpp"

namespace proard::evo {

using dynet::ArchConfig;
using dynet::DimSet;
using dynet::Genotype;
using dynet::SearchSpace;

/// Objectives are maximized. `violation` is how far the FLOPs exceed the
/// limit; 0 means feasible.
struct Individual {
  Genotype genotype;
  std::vector<double> objectives;
  double flops = 0.0;
  double violation = 0.0;
  std::size_t rank = 0;  // 0-based front index
  double crowding = 0.0;

  bool feasible() const noexcept { return violation <= 0.0; }
};

using Population = std::vector<Individual>;

struct SearchConfig {
  std::size_t population = 64;
  std::size_t generations = 100;
  double mutation_rate = 0.1;
  double crossover_rate = 0.5;  // per-slot swap probability
  double flops_limit = 0.0;
  std::uint64_t seed = 0;
};

inline void validate(const SearchConfig& c) {
  require(c.population >= 4 && c.population % 2 == 0, ErrorKind::Config,
          "population must be even and >= 4");
  require(c.mutation_rate >= 0.0 && c.mutation_rate <= 1.0 && c.crossover_rate >= 0.0 &&
              c.crossover_rate <= 1.0,
          ErrorKind::Config, "rates must lie in [0,1]");
  require(std::isfinite(c.flops_limit) && c.flops_limit > 0.0, ErrorKind::Config,
          "flops limit must be > 0");
}

/// Constrained domination: feasible beats infeasible, smaller violation
/// beats larger, and among feasible points Pareto dominance decides.
inline bool dominates(const Individual& a, const Individual& b) {
  require(a.objectives.size() == b.objectives.size(), ErrorKind::Shape,
          "objective arity mismatch");
  if (a.feasible() != b.feasible()) return a.feasible();
  if (!a.feasible()) return a.violation < b.violation;
  bool strict = false;
  for (std::size_t k = 0; k < a.objectives.size(); ++k) {
    if (a.objectives[k] < b.objectives[k]) return false;
    strict = strict || a.objectives[k] > b.objectives[k];
  }
  return strict;
}

/// Fronts of indices, best first; indices ascend within a front.
inline std::vector<std::vector<std::size_t>> fast_nondominated_sort(const Population& pop) {
  const std::size_t n = pop.size();
  std::vector<std::vector<std::size_t>> dominated(n);
  std::vector<std::size_t> count(n, 0);
  std::vector<std::vector<std::size_t>> fronts(1);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      if (p == q) continue;
      if (dominates(pop[p], pop[q])) dominated[p].push_back(q);
      else if (dominates(pop[q], pop[p])) ++count[p];
    }
    if (count[p] == 0) fronts[0].push_back(p);
  }
  while (!fronts.back().empty()) {
    std::vector<std::size_t> next;
    for (std::size_t p : fronts.back())
      for (std::size_t q : dominated[p])
        if (--count[q] == 0) next.push_back(q);
    std::sort(next.begin(), next.end());
    fronts.push_back(std::move(next));
  }
  fronts.pop_back();
  return fronts;
}

/// Per objective, members are ordered by value; extremes get +inf and the
/// rest add (next - prev) / (max - min). Identical objective vectors share
/// one position and one distance, so the result does not depend on the
/// order of `members`.
inline std::vector<double> crowding_distance(const Population& pop,
                                             const std::vector<std::size_t>& members) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> out(members.size(), 0.0);
  if (members.size() <= 2) {
    std::fill(out.begin(), out.end(), inf);
    return out;
  }
  const std::size_t m = pop[members.front()].objectives.size();
  std::map<std::vector<double>, std::vector<std::size_t>> groups;  // vector -> positions
  for (std::size_t i = 0; i < members.size(); ++i)
    groups[pop[members[i]].objectives].push_back(i);
  std::vector<std::vector<double>> points;
  for (const auto& [v, _] : groups) points.push_back(v);
  std::vector<double> dist(points.size(), 0.0);
  if (points.size() <= 2) {
    std::fill(dist.begin(), dist.end(), inf);
  } else {
    for (std::size_t k = 0; k < m; ++k) {
      std::vector<std::size_t> order(points.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      // Ties on objective k fall back to the lexicographic order of the full
      // vector, which is the map order, so a stable sort suffices.
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return points[a][k] < points[b][k]; });
      const double lo = points[order.front()][k], hi = points[order.back()][k];
      dist[order.front()] = inf;
      dist[order.back()] = inf;
      if (hi - lo <= 0.0) continue;
      for (std::size_t i = 1; i + 1 < order.size(); ++i)
        dist[order[i]] += (points[order[i + 1]][k] - points[order[i - 1]][k]) / (hi - lo);
    }
  }
  std::size_t g = 0;
  for (const auto& [_, positions] : groups) {
    for (std::size_t pos : positions) out[pos] = dist[g];
    ++g;
  }
  return out;
}

struct Rates {
  double crossover = 0.5;
  double mutation = 0.1;
};

/// Uniform crossover (each slot swapped with probability `crossover`), then
/// per-slot mutation to a different choice with probability `mutation`.
/// Slots with a single choice never change.
inline std::pair<Genotype, Genotype> vary(const Genotype& a, const Genotype& b,
                                          const std::vector<std::size_t>& slots, Rates rates,
                                          Rng& rng) {
  require(a.size() == slots.size() && b.size() == slots.size(), ErrorKind::Shape,
          "genotype length mismatch");
  Genotype x = a, y = b;
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (uniform(rng, 0.0, 1.0) < rates.crossover) std::swap(x[i], y[i]);
  for (Genotype* g : {&x, &y})
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (slots[i] < 2 || !(uniform(rng, 0.0, 1.0) < rates.mutation)) continue;
      std::size_t alt = uniform_index(rng, slots[i] - 1);
      if (alt >= (*g)[i]) ++alt;
      (*g)[i] = alt;
    }
  return {std::move(x), std::move(y)};
}

struct Fitness {
  std::vector<double> objectives;
  double flops = 0.0;
};

using FitnessFn = std::function<Fitness(const ArchConfig&)>;

/// Predicted (accuracy, robustness), raw, with counted FLOPs.
inline FitnessFn predictor_fitness(const SearchSpace& space, const surrogate::Predictor& p) {
  return [&space, &p](const ArchConfig& cfg) {
    const surrogate::Prediction e = surrogate::predict(p, space, cfg);
    return Fitness{{e.accuracy, e.robustness},
                   static_cast<double>(dynet::count_flops(space, cfg).flops)};
  };
}

struct Generation {
  std::size_t index = 0;  // 0 is the initial population
  Population population;
  Population front;
};

struct SearchResult {
  Population population;  // final, ordered by front
  Population front;       // first front of the final population
  std::vector<Generation> history;
};

namespace detail {

/// Assigns rank and crowding to every member; returns the fronts.
inline std::vector<std::vector<std::size_t>> rank_population(Population& pop) {
  auto fronts = fast_nondominated_sort(pop);
  for (std::size_t r = 0; r < fronts.size(); ++r) {
    const auto d = crowding_distance(pop, fronts[r]);
    for (std::size_t i = 0; i < fronts[r].size(); ++i) {
      pop[fronts[r][i]].rank = r;
      pop[fronts[r][i]].crowding = d[i];
    }
  }
  return fronts;
}

inline bool better(const Individual& a, const Individual& b) {
  if (a.rank != b.rank) return a.rank < b.rank;
  return a.crowding > b.crowding;
}

/// Front by front; the front that overflows keeps its least crowded members
/// (ties by index).
inline Population select_survivors(Population merged, std::size_t size) {
  const auto fronts = rank_population(merged);
  Population next;
  for (const auto& f : fronts) {
    std::vector<std::size_t> order = f;
    if (next.size() + f.size() > size)
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return merged[a].crowding > merged[b].crowding;
      });
    for (std::size_t i : order) {
      if (next.size() == size) break;
      next.push_back(merged[i]);
    }
    if (next.size() == size) break;
  }
  rank_population(next);
  return next;
}

inline Population front_of(const Population& pop) {
  Population f;
  for (const Individual& ind : pop)
    if (ind.rank == 0) f.push_back(ind);
  return f;
}

}  // namespace detail

class Evaluator {
 public:
  Evaluator(const SearchSpace& space, FitnessFn fn, double flops_limit)
      : space_(space), fn_(std::move(fn)), limit_(flops_limit) {}

  Individual operator()(Genotype g) {
    const ArchConfig cfg = dynet::decode_genotype(space_, g);
    const std::string key = dynet::to_string(space_, cfg);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, fn_(cfg)).first;
    Individual ind;
    ind.genotype = std::move(g);
    ind.objectives = it->second.objectives;
    ind.flops = it->second.flops;
    ind.violation = std::max(0.0, ind.flops - limit_);
    return ind;
  }

 private:
  const SearchSpace& space_;
  FitnessFn fn_;
  double limit_;
  std::map<std::string, Fitness> cache_;  // fitness is a pure function of the config
};

/// NSGA-II with constrained domination. Generation 0 is the initial
/// population; each further generation adds `population` offspring, merges
/// and truncates.
inline SearchResult search(const SearchSpace& space, const FitnessFn& fitness,
                           const SearchConfig& cfg) {
  validate(cfg);
  Rng init_rng = make_rng(cfg.seed, "evo.init");
  Rng rng = make_rng(cfg.seed, "evo.loop");
  const auto slots = dynet::genotype_slots(space);
  const DimSet dims = train::elastic_dims(space);
  Evaluator eval(space, fitness, cfg.flops_limit);

  Population pop;
  for (std::size_t i = 0; i < cfg.population; ++i) {
    Individual ind = eval(dynet::encode_genotype(space, dynet::sample_config(space, dims, init_rng)));
    for (int retry = 0; retry < 10 && !ind.feasible(); ++retry)
      ind = eval(dynet::encode_genotype(space, dynet::sample_config(space, dims, init_rng)));
    pop.push_back(std::move(ind));
  }
  pop = detail::select_survivors(std::move(pop), cfg.population);

  SearchResult res;
  res.history.push_back({0, pop, detail::front_of(pop)});
  const Rates rates{cfg.crossover_rate, cfg.mutation_rate};
  for (std::size_t g = 1; g <= cfg.generations; ++g) {
    auto tournament = [&]() -> const Individual& {
      const Individual& a = pop[uniform_index(rng, pop.size())];
      const Individual& b = pop[uniform_index(rng, pop.size())];
      return detail::better(b, a) ? b : a;
    };
    Population merged = pop;
    while (merged.size() < 2 * cfg.population) {
      const Individual& pa = tournament();
      const Individual& pb = tournament();
      auto [x, y] = vary(pa.genotype, pb.genotype, slots, rates, rng);
      merged.push_back(eval(std::move(x)));
      merged.push_back(eval(std::move(y)));
    }
    pop = detail::select_survivors(std::move(merged), cfg.population);
    res.history.push_back({g, pop, detail::front_of(pop)});
  }
  res.population = pop;
  res.front = detail::front_of(pop);
  return res;
}

inline SearchResult search(const SearchSpace& space, const surrogate::Predictor& predictor,
                           const SearchConfig& cfg) {
  return search(space, predictor_fitness(space, predictor), cfg);
}

// ---- output ---------------------------------------------------------------------

inline std::string genotype_str(const Genotype& g) {
  std::string s;
  for (std::size_t i = 0; i < g.size(); ++i) s += (i ? "-" : "") + std::to_string(g[i]);
  return s;
}

/// One row per individual per generation:
/// generation,genotype,config,acc,rob,flops,rank
inline void write_history(const std::filesystem::path& path, const SearchSpace& space,
                          const SearchResult& res) {
  csv::Table t;
  t.header = {"generation", "genotype", "config", "acc", "rob", "flops", "rank"};
  for (const Generation& gen : res.history)
    for (const Individual& ind : gen.population)
      t.rows.push_back({std::to_string(gen.index), genotype_str(ind.genotype),
                        dynet::to_string(space, dynet::decode_genotype(space, ind.genotype)),
                        csv::fmt(ind.objectives.at(0)), csv::fmt(ind.objectives.at(1)),
                        csv::fmt(ind.flops), std::to_string(ind.rank)});
  csv::write(path, t);
}

inline nlohmann::json front_json(const SearchSpace& space, const Population& front) {
  nlohmann::json out = nlohmann::json::array();
  for (const Individual& ind : front)
    out.push_back({{"genotype", genotype_str(ind.genotype)},
                   {"config", dynet::to_string(space, dynet::decode_genotype(space, ind.genotype))},
                   {"acc", ind.objectives.at(0)},
                   {"rob", ind.objectives.at(1)},
                   {"flops", ind.flops},
                   {"feasible", ind.feasible()},
                   {"crowding", std::isinf(ind.crowding) ? nlohmann::json("inf")
                                                         : nlohmann::json(ind.crowding)}});
  return out;
}

}  // namespace proard::evo
