#pragma once

// Weight-sharing dynamic network. SharedWeights stores parameters sized for
// the maximal configuration; a Subnet reads leading-channel slices (and a
// centred crop of the maximal kernel) on the fly, so its gradients land in
// the shared store's coordinates.
//
// Block structure (bottleneck residual):
//   dense: x -> fc(in->mid) -> BN -> ReLU -> fc(mid->out) -> BN -> + sc -> ReLU
//   conv:  x -> 1x1(in->mid) -> BN -> ReLU -> kxk(mid->mid, stride) -> BN ->
//          ReLU -> 1x1(mid->out) -> BN -> + sc -> ReLU
// The first block of a stage has a projection shortcut (fc or strided 1x1
// conv, followed by BN); later blocks use the identity, zero-padded or
// truncated to the block's output width.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "proard/autodiff.hpp"
#include "proard/binio.hpp"
#include "proard/dynet/space.hpp"
#include "proard/rng.hpp"

namespace proard::dynet {

using ad::ParamId;
using ad::Tape;
using ad::Var;

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// ---- concrete layer plan ----------------------------------------------------

struct BlockPlan {
  std::size_t stage = 0, index = 0;
  std::size_t in = 0, mid = 0, out = 0;
  std::size_t kernel = 1, stride = 1;
  bool projection = false;
  std::size_t in_h = 1, in_w = 1, out_h = 1, out_w = 1;
};

/// Channel and spatial sizes of every active layer under one configuration.
struct NetPlan {
  BlockKind kind = BlockKind::Dense;
  Shape input;
  std::size_t stem_out = 0, stem_kernel = 1;
  std::vector<BlockPlan> blocks;
  std::size_t head_in = 0, num_classes = 0;
};

inline std::size_t conv_out(std::size_t n, std::size_t stride) { return (n - 1) / stride + 1; }

inline NetPlan make_plan(const SearchSpace& space, const ArchConfig& cfg) {
  validate(space, cfg);
  NetPlan p;
  p.kind = space.kind;
  p.input = space.input;
  p.stem_out = space.stem_channels;
  p.stem_kernel = space.kind == BlockKind::Conv ? space.stem_kernel : 1;
  p.num_classes = space.num_classes;
  std::size_t ch = space.stem_channels;
  std::size_t h = space.kind == BlockKind::Conv ? space.input[1] : 1;
  std::size_t w = space.kind == BlockKind::Conv ? space.input[2] : 1;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    const StageChoice& sc = cfg.stages[s];
    for (std::size_t j = 0; j < sc.layers.size(); ++j) {
      const LayerChoice& l = sc.layers[j];
      BlockPlan b;
      b.stage = s;
      b.index = j;
      b.in = ch;
      b.mid = scaled_channels(st.expansion_choices[l.expansion], st.expansion_base);
      b.out = scaled_channels(st.width_choices[l.width], st.channels);
      b.kernel = space.kind == BlockKind::Conv ? st.kernel_choices[l.kernel] : 1;
      b.stride = j == 0 ? st.stride : 1;
      b.projection = j == 0;
      b.in_h = h;
      b.in_w = w;
      b.out_h = conv_out(h, b.stride);
      b.out_w = conv_out(w, b.stride);
      p.blocks.push_back(b);
      ch = b.out;
      h = b.out_h;
      w = b.out_w;
    }
  }
  p.head_in = ch;
  return p;
}

// ---- parameter layout -------------------------------------------------------

struct BnIds {
  ParamId gamma = 0, beta = 0;
  std::size_t stats = 0;
};

struct BlockIds {
  ParamId w1 = 0, w2 = 0, w3 = 0;
  BnIds bn1, bn2, bn3;
  bool has_projection = false;
  ParamId proj = 0;
  BnIds bn_proj;
};

struct Layout {
  ParamId stem_w = 0;
  BnIds stem_bn;
  std::vector<std::vector<BlockIds>> blocks;
  ParamId head_w = 0, head_b = 0;
  std::size_t num_bn = 0;
};

/// Parameter store of the dynamic teacher (the maximal configuration).
class SharedWeights {
 public:
  SharedWeights() = default;

  /// Builds the store for `space` with He-normal weights, unit BN scale and
  /// zero BN shift; running statistics start at mean 0, variance 1.
  static SharedWeights init(const SearchSpace& space, Rng& rng) {
    validate(space);
    SharedWeights sw;
    sw.space_ = space;
    const NetPlan full = make_plan(space, max_config(space));
    const bool conv = space.kind == BlockKind::Conv;
    const std::size_t in_ch = conv ? space.input[0] : space.input_size();

    auto bn = [&](const std::string& name, std::size_t c) {
      BnIds ids;
      ids.gamma = sw.add(name + ".gamma", Array(Shape{c}, 1.0));
      ids.beta = sw.add(name + ".beta", Array(Shape{c}, 0.0));
      ids.stats = sw.running_mean_.size();
      sw.running_mean_.emplace_back(Shape{c}, 0.0);
      sw.running_var_.emplace_back(Shape{c}, 1.0);
      return ids;
    };
    auto he = [&](const std::string& name, Shape shape, double gain = 2.0) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
      Array a(std::move(shape));
      const double std = std::sqrt(gain / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = normal(rng, 0.0, std);
      return sw.add(name, std::move(a));
    };
    auto weight = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
      return conv ? he(name, Shape{out, in, k, k}) : he(name, Shape{out, in});
    };

    Layout& L = sw.layout_;
    L.stem_w = weight("stem.w", space.stem_channels, in_ch, full.stem_kernel);
    L.stem_bn = bn("stem.bn", space.stem_channels);
    L.blocks.resize(space.stages.size());
    for (const BlockPlan& b : full.blocks) {
      const std::string tag = "s" + std::to_string(b.stage) + ".b" + std::to_string(b.index);
      BlockIds ids;
      ids.w1 = weight(tag + ".w1", b.mid, b.in, 1);
      ids.bn1 = bn(tag + ".bn1", b.mid);
      if (conv) {
        ids.w2 = weight(tag + ".w2", b.mid, b.mid, b.kernel);
        ids.bn2 = bn(tag + ".bn2", b.mid);
        ids.w3 = weight(tag + ".w3", b.out, b.mid, 1);
        ids.bn3 = bn(tag + ".bn3", b.out);
      } else {
        ids.w2 = weight(tag + ".w2", b.out, b.mid, 1);
        ids.bn2 = bn(tag + ".bn2", b.out);
      }
      if (b.projection) {
        ids.has_projection = true;
        ids.proj = weight(tag + ".proj", b.out, b.in, 1);
        ids.bn_proj = bn(tag + ".bn_proj", b.out);
      }
      L.blocks[b.stage].push_back(ids);
    }
    L.head_w = he("head.w", Shape{space.num_classes, full.head_in}, 1.0);
    L.head_b = sw.add("head.b", Array(Shape{space.num_classes}, 0.0));
    L.num_bn = sw.running_mean_.size();
    return sw;
  }

  const SearchSpace& space() const noexcept { return space_; }
  const Layout& layout() const noexcept { return layout_; }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::vector<Array>& params() noexcept { return params_; }
  const std::vector<Array>& params() const noexcept { return params_; }
  const Array& param(ParamId id) const { return params_.at(id); }

  std::vector<Array>& running_mean() noexcept { return running_mean_; }
  std::vector<Array>& running_var() noexcept { return running_var_; }
  const std::vector<Array>& running_mean() const noexcept { return running_mean_; }
  const std::vector<Array>& running_var() const noexcept { return running_var_; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  friend bool operator==(const SharedWeights& a, const SharedWeights& b) {
    return a.names_ == b.names_ && a.params_ == b.params_ &&
           a.running_mean_ == b.running_mean_ && a.running_var_ == b.running_var_;
  }

  // ---- persistence ----

  io::Bundle to_bundle() const {
    io::Bundle b;
    b.meta["kind"] = "shared_weights";
    b.meta["space"] = to_json(space_);
    for (std::size_t i = 0; i < params_.size(); ++i) b.arrays.emplace_back(names_[i], params_[i]);
    for (std::size_t i = 0; i < running_mean_.size(); ++i) {
      b.arrays.emplace_back("running_mean." + std::to_string(i), running_mean_[i]);
      b.arrays.emplace_back("running_var." + std::to_string(i), running_var_[i]);
    }
    return b;
  }

  /// Rebuilds the structure from the descriptor's space and checks every
  /// stored array against it.
  static SharedWeights from_bundle(const io::Bundle& b) {
    require(b.meta.value("kind", std::string{}) == "shared_weights", ErrorKind::Io,
            "bundle does not hold shared weights");
    Rng scratch(0);
    SharedWeights sw = init(space_from_json(b.meta.at("space")), scratch);
    std::size_t k = 0;
    for (std::size_t i = 0; i < sw.params_.size(); ++i, ++k) {
      require(k < b.arrays.size() && b.arrays[k].first == sw.names_[i] &&
                  b.arrays[k].second.shape() == sw.params_[i].shape(),
              ErrorKind::Io, "checkpoint structure mismatch at '" + sw.names_[i] + "'");
      sw.params_[i] = b.arrays[k].second;
    }
    for (std::size_t i = 0; i < sw.running_mean_.size(); ++i) {
      require(k + 1 < b.arrays.size() &&
                  b.arrays[k].second.shape() == sw.running_mean_[i].shape() &&
                  b.arrays[k + 1].second.shape() == sw.running_var_[i].shape(),
              ErrorKind::Io, "checkpoint running statistics mismatch");
      sw.running_mean_[i] = b.arrays[k++].second;
      sw.running_var_[i] = b.arrays[k++].second;
    }
    require(k == b.arrays.size(), ErrorKind::Io, "checkpoint has extra arrays");
    return sw;
  }

  void save(const std::filesystem::path& path) const { io::save(path, to_bundle()); }
  static SharedWeights load(const std::filesystem::path& path) {
    return from_bundle(io::load(path));
  }

 private:
  ParamId add(const std::string& name, Array a) {
    names_.push_back(name);
    params_.push_back(std::move(a));
    return params_.size() - 1;
  }

  SearchSpace space_;
  Layout layout_;
  std::vector<std::string> names_;
  std::vector<Array> params_;
  std::vector<Array> running_mean_, running_var_;
};

// ---- normalization statistics -----------------------------------------------

enum class BnMode {
  /// Normalize with the current batch's moments (training, calibration).
  Batch,
  /// Normalize with stored statistics (evaluation).
  Fixed,
};

/// Per-subnet normalization statistics keyed by BN stats index, sized to
/// the subnet's channel counts.
using BnStats = std::map<std::size_t, ad::BatchMoments>;

struct ForwardOptions {
  BnMode bn = BnMode::Batch;
  /// Fixed mode: statistics to use instead of the shared running ones.
  const BnStats* stats = nullptr;
  /// Batch mode: receives each active BN layer's batch moments.
  BnStats* moments_out = nullptr;
};

// ---- weight providers ---------------------------------------------------------

/// Reads slices of a SharedWeights store.
struct SliceProvider {
  const SharedWeights* shared;

  Var weight(Tape& t, ParamId id, const Shape& sub) const {
    const Array& full = shared->param(id);
    ad::SliceSpec s = ad::SliceSpec::leading(sub);
    if (full.rank() == 4) {
      // centred crop of the maximal kernel
      s.offset[2] = (full.dim(2) - sub[2]) / 2;
      s.offset[3] = (full.dim(3) - sub[3]) / 2;
    }
    return t.param_slice(id, full, s);
  }

  ad::BatchMoments running(std::size_t stats, std::size_t c) const {
    const auto& m = shared->running_mean().at(stats).vec();
    const auto& v = shared->running_var().at(stats).vec();
    require(c <= m.size(), ErrorKind::Shape, "running statistics slice out of range");
    return {std::vector<double>(m.begin(), m.begin() + c),
            std::vector<double>(v.begin(), v.begin() + c)};
  }
};

/// Pre-sliced standalone parameters (see materialize()).
struct MaterializedNet {
  SearchSpace space;
  ArchConfig config;
  NetPlan plan;
  Layout layout;
  std::map<ParamId, Array> params;
  BnStats running;
};

struct CopyProvider {
  const MaterializedNet* net;

  Var weight(Tape& t, ParamId id, const Shape& sub) const {
    const Array& a = net->params.at(id);
    require(a.shape() == sub, ErrorKind::Shape, "materialized parameter shape mismatch");
    return t.param(id, a);
  }

  ad::BatchMoments running(std::size_t stats, std::size_t c) const {
    const ad::BatchMoments& m = net->running.at(stats);
    require(m.mean.size() == c, ErrorKind::Shape, "materialized statistics size mismatch");
    return m;
  }
};

// ---- forward ----------------------------------------------------------------

template <class Provider>
Var forward_plan(Tape& t, Var x, const NetPlan& plan, const Layout& L, const Provider& p,
                 const ForwardOptions& opt) {
  const bool conv = plan.kind == BlockKind::Conv;
  {
    const Shape& xs = t.value(x).shape();
    require(xs.size() == 4 && Shape(xs.begin() + 1, xs.end()) == plan.input, ErrorKind::Shape,
            "network input " + shape_str(xs) + " does not match N x " + shape_str(plan.input));
  }

  auto bn = [&](Var h, const BnIds& ids, std::size_t c) {
    Var g = p.weight(t, ids.gamma, Shape{c});
    Var b = p.weight(t, ids.beta, Shape{c});
    if (opt.bn == BnMode::Batch) {
      if (!opt.moments_out) return t.batch_norm(h, g, b, kBnEps);
      ad::BatchMoments m;
      Var y = t.batch_norm(h, g, b, kBnEps, &m);
      (*opt.moments_out)[ids.stats] = std::move(m);
      return y;
    }
    ad::BatchMoments stats;
    if (opt.stats) {
      auto it = opt.stats->find(ids.stats);
      require(it != opt.stats->end() && it->second.mean.size() == c, ErrorKind::Shape,
              "recalibrated statistics do not cover this subnet");
      stats = it->second;
    } else {
      stats = p.running(ids.stats, c);
    }
    return t.batch_norm_fixed(h, g, b, stats.mean, stats.var, kBnEps);
  };
  auto layer = [&](Var h, ParamId id, std::size_t out, std::size_t in, std::size_t k,
                   std::size_t stride) {
    if (!conv) return t.linear(h, p.weight(t, id, Shape{out, in}));
    return t.conv2d(h, p.weight(t, id, Shape{out, in, k, k}), stride, k / 2);
  };

  const std::size_t in_ch = conv ? plan.input[0] : shape_size(plan.input);
  Var h = conv ? x : t.flatten(x);
  h = t.relu(bn(layer(h, L.stem_w, plan.stem_out, in_ch, plan.stem_kernel, 1), L.stem_bn,
                plan.stem_out));

  for (const BlockPlan& b : plan.blocks) {
    const BlockIds& ids = L.blocks.at(b.stage).at(b.index);
    Var r;
    if (conv) {
      r = t.relu(bn(layer(h, ids.w1, b.mid, b.in, 1, 1), ids.bn1, b.mid));
      r = t.relu(bn(layer(r, ids.w2, b.mid, b.mid, b.kernel, b.stride), ids.bn2, b.mid));
      r = bn(layer(r, ids.w3, b.out, b.mid, 1, 1), ids.bn3, b.out);
    } else {
      r = t.relu(bn(layer(h, ids.w1, b.mid, b.in, 1, 1), ids.bn1, b.mid));
      r = bn(layer(r, ids.w2, b.out, b.mid, 1, 1), ids.bn2, b.out);
    }
    Var shortcut = b.projection
                       ? bn(layer(h, ids.proj, b.out, b.in, 1, b.stride), ids.bn_proj, b.out)
                       : t.channel_fit(h, b.out);
    h = t.relu(t.add(r, shortcut));
  }

  if (conv) h = t.global_avg_pool(h);
  Var logits = t.linear(h, p.weight(t, L.head_w, Shape{plan.num_classes, plan.head_in}));
  return t.add_channel_bias(logits, p.weight(t, L.head_b, Shape{plan.num_classes}));
}

/// A configuration viewed through the shared store. Cheap to construct; holds
/// a pointer to the store, which must outlive it.
class Subnet {
 public:
  Subnet(const SharedWeights& shared, ArchConfig cfg, ForwardOptions opt = {})
      : shared_(&shared), config_(std::move(cfg)),
        plan_(make_plan(shared.space(), config_)), opt_(opt) {}

  Var forward(Tape& t, Var x) const {
    return forward_plan(t, x, plan_, shared_->layout(), SliceProvider{shared_}, opt_);
  }

  const ArchConfig& config() const noexcept { return config_; }
  const NetPlan& plan() const noexcept { return plan_; }
  const SharedWeights& shared() const noexcept { return *shared_; }
  const ForwardOptions& options() const noexcept { return opt_; }
  Subnet& set_options(ForwardOptions opt) {
    opt_ = opt;
    return *this;
  }

 private:
  const SharedWeights* shared_;
  ArchConfig config_;
  NetPlan plan_;
  ForwardOptions opt_;
};

inline Subnet extract_subnet(const SharedWeights& shared, const ArchConfig& cfg,
                             ForwardOptions opt = {}) {
  validate(shared.space(), cfg);
  return Subnet(shared, cfg, opt);
}

/// Copies out exactly the slices `cfg` reads, including running statistics.
inline MaterializedNet materialize(const SharedWeights& shared, const ArchConfig& cfg) {
  MaterializedNet net;
  net.space = shared.space();
  net.config = cfg;
  net.plan = make_plan(shared.space(), cfg);
  net.layout = shared.layout();

  // Record which slices the view would read by running it on a dummy tape.
  struct Recorder {
    const SharedWeights* shared;
    MaterializedNet* out;
    Var weight(Tape& t, ParamId id, const Shape& sub) const {
      Var v = SliceProvider{shared}.weight(t, id, sub);
      out->params[id] = t.value(v);
      return v;
    }
    ad::BatchMoments running(std::size_t stats, std::size_t c) const {
      auto m = SliceProvider{shared}.running(stats, c);
      out->running[stats] = m;
      return m;
    }
  };
  Tape t(false);
  Shape in{1};
  in.insert(in.end(), net.space.input.begin(), net.space.input.end());
  Var x = t.input(Array(in), false);
  ForwardOptions opt;
  opt.bn = BnMode::Fixed;
  forward_plan(t, x, net.plan, net.layout, Recorder{&shared, &net}, opt);
  return net;
}

/// Forward through a materialized copy.
struct MaterializedModel {
  const MaterializedNet* net;
  ForwardOptions opt;
  Var forward(Tape& t, Var x) const {
    return forward_plan(t, x, net->plan, net->layout, CopyProvider{net}, opt);
  }
};

// ---- running statistics -----------------------------------------------------

/// Exponential moving update of the shared running statistics with batch
/// moments (leading channels only).
inline void update_running_stats(SharedWeights& shared, const BnStats& moments,
                                 double momentum = kBnMomentum) {
  for (const auto& [idx, m] : moments) {
    Array& rm = shared.running_mean().at(idx);
    Array& rv = shared.running_var().at(idx);
    for (std::size_t c = 0; c < m.mean.size(); ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * m.mean[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * m.var[c];
    }
  }
}

/// Recomputes normalization statistics for one configuration from forward
/// passes over the calibration batches (normalizing with batch moments, as
/// in training). The result is the pooled mean and population variance of
/// each BN input over every calibration example. Shared weights are not
/// modified.
inline BnStats recalibrate_bn(const SharedWeights& shared, const ArchConfig& cfg,
                              const std::vector<Array>& batches) {
  require(!batches.empty(), ErrorKind::Config, "empty calibration set");
  std::vector<std::pair<double, BnStats>> per_batch;
  double total = 0.0;
  for (const Array& batch : batches) {
    require(batch.rank() == 4 && batch.dim(0) > 0, ErrorKind::Shape,
            "calibration batch must be N x C x H x W with N > 0");
    BnStats moments;
    ForwardOptions opt;
    opt.bn = BnMode::Batch;
    opt.moments_out = &moments;
    Subnet net(shared, cfg, opt);
    Tape t(false);
    net.forward(t, t.input(batch, false));
    const double w = static_cast<double>(batch.dim(0));
    total += w;
    per_batch.emplace_back(w, std::move(moments));
  }
  BnStats out;
  for (const auto& [idx, first] : per_batch.front().second) {
    const std::size_t c = first.mean.size();
    ad::BatchMoments pooled{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
    for (const auto& [w, m] : per_batch)
      for (std::size_t k = 0; k < c; ++k) pooled.mean[k] += w * m.at(idx).mean[k];
    for (auto& v : pooled.mean) v /= total;
    for (const auto& [w, m] : per_batch)
      for (std::size_t k = 0; k < c; ++k) {
        const double d = m.at(idx).mean[k] - pooled.mean[k];
        pooled.var[k] += w * (m.at(idx).var[k] + d * d);
      }
    for (auto& v : pooled.var) v /= total;
    out.emplace(idx, std::move(pooled));
  }
  return out;
}

}  // namespace proard::dynet
