#pragma once

// Search space of the dynamic network and the architecture configurations
// it admits. A configuration stores choice *indices* into the space's lists;
// the corresponding values are read back through the space.

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include "proard/array.hpp"
#include "proard/error.hpp"
#include "proard/rng.hpp"

namespace proard::dynet {

using BigCount = boost::multiprecision::cpp_int;
using json = nlohmann::json;

enum class BlockKind { Dense, Conv };

/// Elastic dimensions, combinable as a bit set.
enum class Dim : unsigned { Width = 1, Depth = 2, Expansion = 4, Kernel = 8 };

class DimSet {
 public:
  constexpr DimSet() = default;
  constexpr DimSet(std::initializer_list<Dim> dims) {
    for (Dim d : dims) bits_ |= static_cast<unsigned>(d);
  }

  static constexpr DimSet all() {
    return DimSet{Dim::Width, Dim::Depth, Dim::Expansion, Dim::Kernel};
  }

  constexpr bool contains(Dim d) const { return bits_ & static_cast<unsigned>(d); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool subset_of(DimSet o) const { return (bits_ & ~o.bits_) == 0; }
  constexpr unsigned bits() const { return bits_; }
  constexpr bool operator==(const DimSet&) const = default;

  DimSet& add(Dim d) {
    bits_ |= static_cast<unsigned>(d);
    return *this;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    if (contains(Dim::Width)) out.push_back("width");
    if (contains(Dim::Depth)) out.push_back("depth");
    if (contains(Dim::Expansion)) out.push_back("expansion");
    if (contains(Dim::Kernel)) out.push_back("kernel");
    return out;
  }

  static DimSet parse(const std::vector<std::string>& names) {
    DimSet s;
    for (const auto& n : names) {
      if (n == "width") s.add(Dim::Width);
      else if (n == "depth") s.add(Dim::Depth);
      else if (n == "expansion") s.add(Dim::Expansion);
      else if (n == "kernel") s.add(Dim::Kernel);
      else fail(ErrorKind::Config, "unknown elastic dimension '" + n + "'");
    }
    return s;
  }

 private:
  unsigned bits_ = 0;
};

struct StageSpec {
  std::size_t max_depth = 1;
  std::vector<std::size_t> depth_choices{1};
  std::vector<double> width_choices{1.0};
  std::vector<double> expansion_choices{1.0};
  /// Odd kernel sizes of the middle convolution; conv spaces only.
  std::vector<std::size_t> kernel_choices;
  std::size_t stride = 1;
  /// Block output channels at width multiplier 1.
  std::size_t channels = 8;
  /// Middle channels at expansion multiplier 1.
  std::size_t expansion_base = 32;
};

struct SearchSpace {
  BlockKind kind = BlockKind::Dense;
  /// Channels x height x width of one example.
  Shape input{1, 8, 8};
  std::size_t num_classes = 10;
  std::size_t stem_channels = 16;
  std::size_t stem_kernel = 3;
  std::vector<StageSpec> stages;

  std::size_t input_size() const { return shape_size(input); }
  bool has_kernel() const { return kind == BlockKind::Conv; }
};

/// Leading-channel count kept under multiplier m: ceil(m * c), at least 1.
/// The small offset absorbs representation error such as 0.35 * 20.
inline std::size_t scaled_channels(double m, std::size_t c) {
  const double v = std::ceil(m * static_cast<double>(c) - 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(v));
}

namespace detail {

template <class T>
void check_choice_list(const std::vector<T>& v, const std::string& what) {
  require(!v.empty(), ErrorKind::Config, what + " choice list is empty");
  for (std::size_t i = 1; i < v.size(); ++i)
    require(v[i - 1] < v[i], ErrorKind::Config, what + " choices must be strictly ascending");
}

}  // namespace detail

inline void validate(const SearchSpace& space) {
  require(!space.stages.empty(), ErrorKind::Config, "search space needs at least one stage");
  require(space.input.size() == 3 && shape_size(space.input) >= 1, ErrorKind::Config,
          "input shape must be channels x height x width");
  require(space.num_classes >= 2, ErrorKind::Config, "need at least 2 classes");
  require(space.stem_channels >= 1, ErrorKind::Config, "stem needs at least one channel");
  if (space.kind == BlockKind::Conv)
    require(space.stem_kernel % 2 == 1, ErrorKind::Config, "stem kernel must be odd");
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    const std::string tag = "stage " + std::to_string(s) + " ";
    require(st.max_depth >= 1, ErrorKind::Config, tag + "max_depth must be >= 1");
    detail::check_choice_list(st.depth_choices, tag + "depth");
    detail::check_choice_list(st.width_choices, tag + "width");
    detail::check_choice_list(st.expansion_choices, tag + "expansion");
    require(st.depth_choices.front() >= 1 && st.depth_choices.back() == st.max_depth,
            ErrorKind::Config, tag + "depth choices must lie in [1, max_depth] and include it");
    for (double w : st.width_choices)
      require(w > 0.0 && w <= 1.0, ErrorKind::Config, tag + "width multipliers must be in (0,1]");
    for (double e : st.expansion_choices)
      require(e > 0.0 && e <= 1.0, ErrorKind::Config,
              tag + "expansion multipliers must be in (0,1]");
    require(st.channels >= 1 && st.expansion_base >= 1, ErrorKind::Config,
            tag + "channel counts must be positive");
    require(st.stride >= 1, ErrorKind::Config, tag + "stride must be >= 1");
    if (space.kind == BlockKind::Dense) {
      require(st.kernel_choices.empty(), ErrorKind::Config,
              tag + "dense stages take no kernel choices");
      require(st.stride == 1, ErrorKind::Config, tag + "dense stages have stride 1");
    } else {
      detail::check_choice_list(st.kernel_choices, tag + "kernel");
      for (std::size_t k : st.kernel_choices)
        require(k % 2 == 1, ErrorKind::Config, tag + "kernel sizes must be odd");
    }
  }
}

// ---- configurations ---------------------------------------------------------

struct LayerChoice {
  std::size_t width = 0;
  std::size_t expansion = 0;
  std::size_t kernel = 0;
  bool operator==(const LayerChoice&) const = default;
};

struct StageChoice {
  /// Index into depth_choices; `layers.size()` equals the chosen depth.
  std::size_t depth = 0;
  std::vector<LayerChoice> layers;
  bool operator==(const StageChoice&) const = default;
};

struct ArchConfig {
  std::vector<StageChoice> stages;
  bool operator==(const ArchConfig&) const = default;
};

inline std::size_t kernel_count(const SearchSpace& space, const StageSpec& st) {
  return space.has_kernel() ? st.kernel_choices.size() : 1;
}

inline void validate(const SearchSpace& space, const ArchConfig& cfg) {
  require(cfg.stages.size() == space.stages.size(), ErrorKind::Config,
          "config has " + std::to_string(cfg.stages.size()) + " stages, space has " +
              std::to_string(space.stages.size()));
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    const StageChoice& sc = cfg.stages[s];
    require(sc.depth < st.depth_choices.size(), ErrorKind::Config, "depth index out of range");
    require(sc.layers.size() == st.depth_choices[sc.depth], ErrorKind::Config,
            "stage " + std::to_string(s) + " layer count does not match chosen depth");
    for (const LayerChoice& l : sc.layers) {
      require(l.width < st.width_choices.size() && l.expansion < st.expansion_choices.size() &&
                  l.kernel < kernel_count(space, st),
              ErrorKind::Config, "layer choice index out of range");
    }
  }
}

inline ArchConfig max_config(const SearchSpace& space) {
  ArchConfig cfg;
  for (const StageSpec& st : space.stages) {
    StageChoice sc;
    sc.depth = st.depth_choices.size() - 1;
    LayerChoice l{st.width_choices.size() - 1, st.expansion_choices.size() - 1,
                  kernel_count(space, st) - 1};
    sc.layers.assign(st.max_depth, l);
    cfg.stages.push_back(std::move(sc));
  }
  return cfg;
}

/// Exact number of distinct configurations:
/// prod over stages of sum over depths d of (|W| |E| [|K|])^d.
inline BigCount space_cardinality(const SearchSpace& space) {
  BigCount total = 1;
  for (const StageSpec& st : space.stages) {
    const BigCount per_layer = BigCount(st.width_choices.size()) * st.expansion_choices.size() *
                               kernel_count(space, st);
    BigCount stage = 0;
    for (std::size_t d : st.depth_choices) stage += boost::multiprecision::pow(per_layer, d);
    total *= stage;
  }
  return total;
}

/// Samples a configuration. Dimensions outside `free_dims` take their
/// maximal choice; free ones are drawn uniformly and independently per slot.
inline ArchConfig sample_config(const SearchSpace& space, DimSet free_dims, Rng& rng) {
  require(!free_dims.empty(), ErrorKind::Config, "sample_config needs at least one free dimension");
  ArchConfig cfg;
  for (const StageSpec& st : space.stages) {
    StageChoice sc;
    sc.depth = free_dims.contains(Dim::Depth) ? uniform_index(rng, st.depth_choices.size())
                                              : st.depth_choices.size() - 1;
    const std::size_t depth = st.depth_choices[sc.depth];
    const std::size_t nk = kernel_count(space, st);
    for (std::size_t j = 0; j < depth; ++j) {
      LayerChoice l;
      l.width = free_dims.contains(Dim::Width) ? uniform_index(rng, st.width_choices.size())
                                               : st.width_choices.size() - 1;
      l.expansion = free_dims.contains(Dim::Expansion)
                        ? uniform_index(rng, st.expansion_choices.size())
                        : st.expansion_choices.size() - 1;
      l.kernel = free_dims.contains(Dim::Kernel) ? uniform_index(rng, nk) : nk - 1;
      sc.layers.push_back(l);
    }
    cfg.stages.push_back(std::move(sc));
  }
  return cfg;
}

/// Visits every configuration in lexicographic slot order.
inline void for_each_config(const SearchSpace& space,
                            const std::function<void(const ArchConfig&)>& fn) {
  ArchConfig cfg;
  cfg.stages.resize(space.stages.size());
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t s, std::size_t j) {
    if (s == space.stages.size()) {
      fn(cfg);
      return;
    }
    const StageSpec& st = space.stages[s];
    StageChoice& sc = cfg.stages[s];
    if (j == 0 && sc.layers.empty()) {
      for (std::size_t d = 0; d < st.depth_choices.size(); ++d) {
        sc.depth = d;
        sc.layers.assign(st.depth_choices[d], LayerChoice{});
        rec(s, 0);
        sc.layers.clear();
      }
      return;
    }
    if (j == sc.layers.size()) {
      rec(s + 1, 0);
      return;
    }
    for (std::size_t w = 0; w < st.width_choices.size(); ++w)
      for (std::size_t e = 0; e < st.expansion_choices.size(); ++e)
        for (std::size_t k = 0; k < kernel_count(space, st); ++k) {
          sc.layers[j] = LayerChoice{w, e, k};
          rec(s, j + 1);
        }
  };
  rec(0, 0);
}

// ---- features ---------------------------------------------------------------

inline std::size_t feature_length(const SearchSpace& space) {
  std::size_t n = 0;
  for (const StageSpec& st : space.stages) {
    const std::size_t k = space.has_kernel() ? st.kernel_choices.size() : 0;
    n += st.depth_choices.size() +
         st.max_depth * (st.width_choices.size() + st.expansion_choices.size() + k);
  }
  return n;
}

/// One-hot encoding: per stage a depth block, then per layer slot a width,
/// expansion and (conv only) kernel block. Skipped layers stay all-zero.
inline std::vector<double> encode_config(const SearchSpace& space, const ArchConfig& cfg) {
  validate(space, cfg);
  std::vector<double> f(feature_length(space), 0.0);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    const StageChoice& sc = cfg.stages[s];
    f[pos + sc.depth] = 1.0;
    pos += st.depth_choices.size();
    const std::size_t nk = space.has_kernel() ? st.kernel_choices.size() : 0;
    const std::size_t per_layer = st.width_choices.size() + st.expansion_choices.size() + nk;
    for (std::size_t j = 0; j < st.max_depth; ++j, pos += per_layer) {
      if (j >= sc.layers.size()) continue;
      const LayerChoice& l = sc.layers[j];
      f[pos + l.width] = 1.0;
      f[pos + st.width_choices.size() + l.expansion] = 1.0;
      if (nk) f[pos + st.width_choices.size() + st.expansion_choices.size() + l.kernel] = 1.0;
    }
  }
  return f;
}

inline ArchConfig decode_config(const SearchSpace& space, std::span<const double> f) {
  require(f.size() == feature_length(space), ErrorKind::Shape,
          "feature vector length " + std::to_string(f.size()) + " does not match space (" +
              std::to_string(feature_length(space)) + ")");
  auto hot = [&](std::size_t begin, std::size_t n) {
    std::size_t idx = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (f[begin + i] == 1.0) {
        require(idx == n, ErrorKind::Config, "feature block has more than one hot slot");
        idx = i;
      } else {
        require(f[begin + i] == 0.0, ErrorKind::Config, "feature vector is not one-hot");
      }
    }
    return idx;
  };
  ArchConfig cfg;
  std::size_t pos = 0;
  for (const StageSpec& st : space.stages) {
    StageChoice sc;
    sc.depth = hot(pos, st.depth_choices.size());
    require(sc.depth < st.depth_choices.size(), ErrorKind::Config, "missing depth slot");
    pos += st.depth_choices.size();
    const std::size_t nw = st.width_choices.size(), ne = st.expansion_choices.size();
    const std::size_t nk = space.has_kernel() ? st.kernel_choices.size() : 0;
    for (std::size_t j = 0; j < st.max_depth; ++j, pos += nw + ne + nk) {
      if (j >= st.depth_choices[sc.depth]) continue;
      LayerChoice l;
      l.width = hot(pos, nw);
      l.expansion = hot(pos + nw, ne);
      l.kernel = nk ? hot(pos + nw + ne, nk) : 0;
      require(l.width < nw && l.expansion < ne && (nk == 0 || l.kernel < nk), ErrorKind::Config,
              "missing layer slot");
      sc.layers.push_back(l);
    }
    cfg.stages.push_back(std::move(sc));
  }
  validate(space, cfg);
  return cfg;
}

// ---- genotype ---------------------------------------------------------------

/// Number of alternatives per genotype slot: per stage one depth slot, then
/// max_depth layer slots of (width, expansion[, kernel]).
inline std::vector<std::size_t> genotype_slots(const SearchSpace& space) {
  std::vector<std::size_t> slots;
  for (const StageSpec& st : space.stages) {
    slots.push_back(st.depth_choices.size());
    for (std::size_t j = 0; j < st.max_depth; ++j) {
      slots.push_back(st.width_choices.size());
      slots.push_back(st.expansion_choices.size());
      if (space.has_kernel()) slots.push_back(st.kernel_choices.size());
    }
  }
  return slots;
}

using Genotype = std::vector<std::size_t>;

/// Layer slots beyond the chosen depth are ignored.
inline ArchConfig decode_genotype(const SearchSpace& space, const Genotype& g) {
  require(g.size() == genotype_slots(space).size(), ErrorKind::Shape, "genotype length mismatch");
  ArchConfig cfg;
  std::size_t pos = 0;
  for (const StageSpec& st : space.stages) {
    StageChoice sc;
    sc.depth = g[pos++];
    require(sc.depth < st.depth_choices.size(), ErrorKind::Config, "genotype depth out of range");
    for (std::size_t j = 0; j < st.max_depth; ++j) {
      LayerChoice l;
      l.width = g[pos++];
      l.expansion = g[pos++];
      if (space.has_kernel()) l.kernel = g[pos++];
      if (j < st.depth_choices[sc.depth]) sc.layers.push_back(l);
    }
    cfg.stages.push_back(std::move(sc));
  }
  validate(space, cfg);
  return cfg;
}

inline Genotype encode_genotype(const SearchSpace& space, const ArchConfig& cfg) {
  validate(space, cfg);
  Genotype g;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    g.push_back(cfg.stages[s].depth);
    for (std::size_t j = 0; j < st.max_depth; ++j) {
      LayerChoice l = j < cfg.stages[s].layers.size() ? cfg.stages[s].layers[j] : LayerChoice{};
      g.push_back(l.width);
      g.push_back(l.expansion);
      if (space.has_kernel()) g.push_back(l.kernel);
    }
  }
  return g;
}

// ---- text forms -------------------------------------------------------------

/// Compact form "d:w-e[-k].w-e[-k]_d:..." with choice indices, safe inside
/// comma-separated files.
inline std::string to_string(const SearchSpace& space, const ArchConfig& cfg) {
  std::ostringstream os;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    if (s) os << '_';
    os << cfg.stages[s].depth << ':';
    for (std::size_t j = 0; j < cfg.stages[s].layers.size(); ++j) {
      const LayerChoice& l = cfg.stages[s].layers[j];
      if (j) os << '.';
      os << l.width << '-' << l.expansion;
      if (space.has_kernel()) os << '-' << l.kernel;
    }
  }
  return os.str();
}

inline ArchConfig parse_config(const SearchSpace& space, const std::string& text) {
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      if (ch == sep) {
        out.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    out.push_back(cur);
    return out;
  };
  auto num = [&](const std::string& s) -> std::size_t {
    require(!s.empty() && std::all_of(s.begin(), s.end(), ::isdigit), ErrorKind::Config,
            "malformed config string '" + text + "'");
    return std::stoul(s);
  };
  ArchConfig cfg;
  for (const std::string& stage : split(text, '_')) {
    auto colon = stage.find(':');
    require(colon != std::string::npos, ErrorKind::Config, "malformed config string '" + text + "'");
    StageChoice sc;
    sc.depth = num(stage.substr(0, colon));
    const std::string rest = stage.substr(colon + 1);
    if (!rest.empty()) {
      for (const std::string& layer : split(rest, '.')) {
        auto parts = split(layer, '-');
        require(parts.size() == (space.has_kernel() ? 3u : 2u), ErrorKind::Config,
                "malformed layer '" + layer + "'");
        LayerChoice l{num(parts[0]), num(parts[1]), space.has_kernel() ? num(parts[2]) : 0};
        sc.layers.push_back(l);
      }
    }
    cfg.stages.push_back(std::move(sc));
  }
  validate(space, cfg);
  return cfg;
}

// ---- structured text form ---------------------------------------------------

inline json to_json(const SearchSpace& space) {
  json j;
  j["kind"] = space.kind == BlockKind::Dense ? "dense" : "conv";
  j["input"] = space.input;
  j["num_classes"] = space.num_classes;
  j["stem_channels"] = space.stem_channels;
  if (space.kind == BlockKind::Conv) j["stem_kernel"] = space.stem_kernel;
  j["stages"] = json::array();
  for (const StageSpec& st : space.stages) {
    json s;
    s["max_depth"] = st.max_depth;
    s["depth_choices"] = st.depth_choices;
    s["width_choices"] = st.width_choices;
    s["expansion_choices"] = st.expansion_choices;
    if (space.kind == BlockKind::Conv) s["kernel_choices"] = st.kernel_choices;
    s["stride"] = st.stride;
    s["channels"] = st.channels;
    s["expansion_base"] = st.expansion_base;
    j["stages"].push_back(s);
  }
  return j;
}

inline SearchSpace space_from_json(const json& j) {
  try {
    SearchSpace space;
    const std::string kind = j.at("kind").get<std::string>();
    require(kind == "dense" || kind == "conv", ErrorKind::Config,
            "space kind must be 'dense' or 'conv'");
    space.kind = kind == "dense" ? BlockKind::Dense : BlockKind::Conv;
    space.input = j.at("input").get<Shape>();
    space.num_classes = j.at("num_classes").get<std::size_t>();
    space.stem_channels = j.at("stem_channels").get<std::size_t>();
    space.stem_kernel = j.value("stem_kernel", std::size_t{3});
    for (const json& s : j.at("stages")) {
      StageSpec st;
      st.max_depth = s.at("max_depth").get<std::size_t>();
      st.depth_choices = s.at("depth_choices").get<std::vector<std::size_t>>();
      st.width_choices = s.at("width_choices").get<std::vector<double>>();
      st.expansion_choices = s.at("expansion_choices").get<std::vector<double>>();
      st.kernel_choices = s.value("kernel_choices", std::vector<std::size_t>{});
      st.stride = s.value("stride", std::size_t{1});
      st.channels = s.at("channels").get<std::size_t>();
      st.expansion_base = s.at("expansion_base").get<std::size_t>();
      space.stages.push_back(std::move(st));
    }
    validate(space);
    return space;
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("search space: ") + e.what());
  }
}

}  // namespace proard::dynet
