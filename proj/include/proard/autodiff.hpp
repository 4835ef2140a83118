#pragma once

// Minimal tape-based reverse-mode differentiation over dense double arrays.
//
// A Tape records primitives in creation order, which is always a valid
// topological order. Parameters never live on the tape: `param` and
// `param_slice` read from an external store and their backward pass scatters
// into a GradientSet keyed by ParamId, with full-store shapes. This is what
// lets a sliced subnet accumulate gradients directly into shared weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "proard/array.hpp"
#include "proard/error.hpp"

namespace proard::ad {

using ParamId = std::size_t;

/// Handle to a tape node.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

/// Rectangular region of a parameter: per-dimension offset and extent.
struct SliceSpec {
  std::vector<std::size_t> offset;
  std::vector<std::size_t> extent;

  static SliceSpec leading(const Shape& extent) {
    return SliceSpec{std::vector<std::size_t>(extent.size(), 0), extent};
  }
};

namespace detail {

inline void check_slice(const Shape& full, const SliceSpec& s) {
  require(s.offset.size() == full.size() && s.extent.size() == full.size(),
          ErrorKind::Shape, "slice rank does not match parameter " + shape_str(full));
  for (std::size_t d = 0; d < full.size(); ++d)
    require(s.extent[d] >= 1 && s.offset[d] + s.extent[d] <= full[d], ErrorKind::Shape,
            "slice out of bounds on dim " + std::to_string(d) + " of " + shape_str(full));
}

/// Calls fn(sub_begin, full_begin, run) for every contiguous innermost run
/// of the slice.
template <class Fn>
void for_each_run(const Shape& full, const SliceSpec& s, Fn&& fn) {
  const std::size_t rank = full.size();
  if (rank == 0) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{1});
    return;
  }
  std::vector<std::size_t> stride(rank, 1);
  for (std::size_t d = rank - 1; d > 0; --d) stride[d - 1] = stride[d] * full[d];
  const std::size_t run = s.extent[rank - 1];
  std::size_t outer = 1;
  for (std::size_t d = 0; d + 1 < rank; ++d) outer *= s.extent[d];
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t flat = s.offset[rank - 1];
    for (std::size_t d = 0; d + 1 < rank; ++d) flat += (s.offset[d] + idx[d]) * stride[d];
    fn(o * run, flat, run);
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < s.extent[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace detail

/// Copy of the given region of `full`.
inline Array slice_copy(const Array& full, const SliceSpec& s) {
  detail::check_slice(full.shape(), s);
  Array out(Shape(s.extent.begin(), s.extent.end()));
  auto src = full.data();
  auto dst = out.data();
  detail::for_each_run(full.shape(), s, [&](std::size_t sub, std::size_t flat, std::size_t run) {
    std::copy_n(src.begin() + flat, run, dst.begin() + sub);
  });
  return out;
}

/// Gradients produced by one backward pass. Parameter gradients have the
/// full store shape; `touched` marks every element some slice read, whether
/// or not its gradient ended up non-zero.
struct GradientSet {
  std::map<ParamId, Array> params;
  std::map<ParamId, std::vector<std::uint8_t>> touched;
  std::optional<Array> input;

  const Array* find(ParamId id) const {
    auto it = params.find(id);
    return it == params.end() ? nullptr : &it->second;
  }

  GradientSet& operator+=(const GradientSet& other) {
    for (const auto& [id, g] : other.params) {
      auto [it, inserted] = params.try_emplace(id, g);
      if (!inserted) {
        require_same_shape(it->second, g, "gradient accumulation");
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
    for (const auto& [id, m] : other.touched) {
      auto [it, inserted] = touched.try_emplace(id, m);
      if (!inserted)
        for (std::size_t i = 0; i < m.size(); ++i) it->second[i] |= m[i];
    }
    if (other.input) {
      if (!input) {
        input = *other.input;
      } else {
        for (std::size_t i = 0; i < input->size(); ++i) (*input)[i] += (*other.input)[i];
      }
    }
    return *this;
  }
};

/// Per-channel batch moments reported by a training-mode batch norm.
struct BatchMoments {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Probability floor applied before taking logs in the KL divergence.
inline constexpr double kKlFloor = 1e-12;

class Tape {
 public:
  /// With `track_params = false` parameter reads become constants, so the
  /// tape can be used for inference without gradient bookkeeping.
  explicit Tape(bool track_params = true) : track_params_(track_params) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // ---- leaves -----------------------------------------------------------

  /// The network input. When `requires_grad`, backward() fills
  /// GradientSet::input.
  Var input(Array x, bool requires_grad = true) {
    require(!input_.valid() || !requires_grad, ErrorKind::State,
            "tape already has a gradient-tracked input");
    Var v = leaf(std::move(x), requires_grad);
    if (requires_grad) input_ = v;
    return v;
  }

  /// Differentiable leaf whose gradient is read back with grad().
  Var variable(Array x) { return leaf(std::move(x), true); }

  Var constant(Array x) { return leaf(std::move(x), false); }

  Var param(ParamId id, const Array& full) {
    return param_slice(id, full, SliceSpec::leading(full.shape()));
  }

  /// Reads a region of an externally owned parameter. Backward scatters the
  /// region's gradient into the full-shape entry for `id`.
  Var param_slice(ParamId id, const Array& full, const SliceSpec& s) {
    Array value = slice_copy(full, s);
    if (!track_params_) return leaf(std::move(value), false);
    Shape full_shape = full.shape();
    return push(std::move(value), {}, "param", true,
                [id, full_shape, s](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  auto [it, fresh] = t.grads_.params.try_emplace(id, full_shape);
                  auto [mt, mfresh] = t.grads_.touched.try_emplace(
                      id, std::vector<std::uint8_t>(shape_size(full_shape), 0));
                  auto dst = it->second.data();
                  auto& mask = mt->second;
                  detail::for_each_run(full_shape, s,
                                       [&](std::size_t sub, std::size_t flat, std::size_t run) {
                                         for (std::size_t k = 0; k < run; ++k) {
                                           dst[flat + k] += g[sub + k];
                                           mask[flat + k] = 1;
                                         }
                                       });
                });
  }

  // ---- inspection -------------------------------------------------------

  const Array& value(Var v) const { return node(v).value; }

  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  Array grad(Var v) const {
    const Node& n = node(v);
    return n.has_grad ? n.grad : Array(n.value.shape());
  }

  /// Number of recorded primitives (leaves are not counted).
  std::size_t num_ops() const noexcept { return num_ops_; }
  std::size_t num_nodes() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // ---- primitives -------------------------------------------------------

  /// x[N,in] times w[out,in]^T.
  Var linear(Var x, Var w) {
    const Array& xv = value(x);
    const Array& wv = value(w);
    require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1), ErrorKind::Shape,
            "linear: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
    const std::size_t n = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
    Array y(Shape{n, out});
    for (std::size_t r = 0; r < n; ++r) {
      const double* xr = &xv[r * in];
      for (std::size_t o = 0; o < out; ++o) {
        const double* wr = &wv[o * in];
        double acc = 0.0;
        for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
        y[r * out + o] = acc;
      }
    }
    return push(std::move(y), {x, w}, "linear", false,
                [x, w, n, in, out](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  if (t.needs(x)) {
                    Array& gx = t.grad_ref(x);
                    const Array& wv = t.nodes_[w.id].value;
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t o = 0; o < out; ++o) {
                        const double go = g[r * out + o];
                        if (go == 0.0) continue;
                        for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += go * wv[o * in + i];
                      }
                  }
                  if (t.needs(w)) {
                    Array& gw = t.grad_ref(w);
                    const Array& xv = t.nodes_[x.id].value;
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t o = 0; o < out; ++o) {
                        const double go = g[r * out + o];
                        if (go == 0.0) continue;
                        for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += go * xv[r * in + i];
                      }
                  }
                });
  }

  /// Adds b[C] along dimension 1 of x[N,C,...].
  Var add_channel_bias(Var x, Var b) {
    const Array& xv = value(x);
    const Array& bv = value(b);
    require(xv.rank() >= 2 && bv.rank() == 1 && bv.dim(0) == xv.dim(1), ErrorKind::Shape,
            "add_channel_bias: " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
    const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
    Array y = xv;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < inner; ++k) y[(r * c + ch) * inner + k] += bv[ch];
    return push(std::move(y), {x, b}, "add_channel_bias", false,
                [x, b, n, c, inner](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  if (t.needs(x)) {
                    Array& gx = t.grad_ref(x);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  }
                  if (t.needs(b)) {
                    Array& gb = t.grad_ref(b);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t k = 0; k < inner; ++k) gb[ch] += g[(r * c + ch) * inner + k];
                  }
                });
  }

  Var add(Var a, Var b) {
    const Array& av = value(a);
    const Array& bv = value(b);
    require_same_shape(av, bv, "add");
    Array y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return push(std::move(y), {a, b}, "add", false, [a, b](Tape& t, std::size_t self) {
      const Array& g = t.nodes_[self].grad;
      for (Var v : {a, b}) {
        if (!t.needs(v)) continue;
        Array& gv = t.grad_ref(v);
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
      }
    });
  }

  Var scale(Var a, double s) {
    Array y = value(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= s;
    return push(std::move(y), {a}, "scale", false, [a, s](Tape& t, std::size_t self) {
      const Array& g = t.nodes_[self].grad;
      Array& ga = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
  }

  /// Rectifier; the subgradient at exactly 0 is 0.
  Var relu(Var a) {
    Array y = value(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
    return push(std::move(y), {a}, "relu", false, [a](Tape& t, std::size_t self) {
      const Array& g = t.nodes_[self].grad;
      const Array& av = t.nodes_[a.id].value;
      Array& ga = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > 0.0) ga[i] += g[i];
    });
  }

  Var sum(Var a) {
    const Array& av = value(a);
    double s = 0.0;
    for (double v : av.data()) s += v;
    return push(Array::scalar(s), {a}, "sum", false, [a](Tape& t, std::size_t self) {
      const double g = t.nodes_[self].grad[0];
      Array& ga = t.grad_ref(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }

  Var mean(Var a) {
    const std::size_t n = value(a).size();
    return scale(sum(a), 1.0 / static_cast<double>(n));
  }

  /// 2-D convolution, x[N,C,H,W] with w[O,C,K,K], symmetric zero padding.
  Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad) {
    const Array& xv = value(x);
    const Array& wv = value(w);
    require(xv.rank() == 4 && wv.rank() == 4 && wv.dim(1) == xv.dim(1) &&
                wv.dim(2) == wv.dim(3) && stride >= 1,
            ErrorKind::Shape,
            "conv2d: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    const std::size_t o = wv.dim(0), k = wv.dim(2);
    require(h + 2 * pad >= k && wd + 2 * pad >= k, ErrorKind::Shape,
            "conv2d: kernel larger than padded input");
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
    Array y(Shape{n, o, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t ic = 0; ic < c; ++ic)
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              const double wk = wv[((oc * c + ic) * k + kh) * k + kw];
              for (std::size_t oh = 0; oh < ho; ++oh) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ow = 0; ow < wo; ++ow) {
                  const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wd)) continue;
                  y[((b * o + oc) * ho + oh) * wo + ow] +=
                      wk * xv[((b * c + ic) * h + ih) * wd + iw];
                }
              }
            }
    return push(std::move(y), {x, w}, "conv2d", false,
                [=](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  const Array& xv = t.nodes_[x.id].value;
                  const Array& wv = t.nodes_[w.id].value;
                  const bool need_x = t.needs(x), need_w = t.needs(w);
                  Array* gx = need_x ? &t.grad_ref(x) : nullptr;
                  Array* gw = need_w ? &t.grad_ref(w) : nullptr;
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t oc = 0; oc < o; ++oc)
                      for (std::size_t ic = 0; ic < c; ++ic)
                        for (std::size_t kh = 0; kh < k; ++kh)
                          for (std::size_t kw = 0; kw < k; ++kw) {
                            const std::size_t wi = ((oc * c + ic) * k + kh) * k + kw;
                            const double wk = wv[wi];
                            double gwk = 0.0;
                            for (std::size_t oh = 0; oh < ho; ++oh) {
                              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                                        static_cast<std::ptrdiff_t>(pad);
                              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                              for (std::size_t ow = 0; ow < wo; ++ow) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wd)) continue;
                                const double go = g[((b * o + oc) * ho + oh) * wo + ow];
                                const std::size_t xi = ((b * c + ic) * h + ih) * wd + iw;
                                if (gx) (*gx)[xi] += go * wk;
                                gwk += go * xv[xi];
                              }
                            }
                            if (gw) (*gw)[wi] += gwk;
                          }
                });
  }

  /// Batch normalization with batch statistics over every axis but 1.
  /// Variance is the biased (population) estimate. When `moments` is given it
  /// receives the per-channel batch mean and variance.
  Var batch_norm(Var x, Var gamma, Var beta, double eps, BatchMoments* moments = nullptr) {
    const Array& xv = value(x);
    const auto [n, c, inner] = bn_dims(xv, value(gamma), value(beta));
    const double m = static_cast<double>(n * inner);
    std::vector<double> mean(c, 0.0), var(c, 0.0), inv_std(c);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < inner; ++k) mean[ch] += xv[(r * c + ch) * inner + k];
    for (auto& v : mean) v /= m;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < inner; ++k) {
          const double d = xv[(r * c + ch) * inner + k] - mean[ch];
          var[ch] += d * d;
        }
    for (std::size_t ch = 0; ch < c; ++ch) {
      var[ch] /= m;
      inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    }
    if (moments) *moments = BatchMoments{mean, var};

    const Array& gv = value(gamma);
    const Array& bv = value(beta);
    Array xhat(xv.shape());
    Array y(xv.shape());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < inner; ++k) {
          const std::size_t i = (r * c + ch) * inner + k;
          xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
          y[i] = gv[ch] * xhat[i] + bv[ch];
        }
    return push(std::move(y), {x, gamma, beta}, "batch_norm", false,
                [x, gamma, beta, n, c, inner, m, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t k = 0; k < inner; ++k) {
                        const std::size_t i = (r * c + ch) * inner + k;
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                      }
                  if (t.needs(beta)) {
                    Array& gb = t.grad_ref(beta);
                    for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                  }
                  if (t.needs(gamma)) {
                    Array& gg = t.grad_ref(gamma);
                    for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                  }
                  if (t.needs(x)) {
                    const Array& gv = t.nodes_[gamma.id].value;
                    Array& gx = t.grad_ref(x);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const double coef = gv[ch] * inv_std[ch] / m;
                        for (std::size_t k = 0; k < inner; ++k) {
                          const std::size_t i = (r * c + ch) * inner + k;
                          gx[i] += coef * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        }
                      }
                  }
                });
  }

  /// Batch normalization with fixed (running or recalibrated) statistics.
  Var batch_norm_fixed(Var x, Var gamma, Var beta, std::span<const double> mean,
                       std::span<const double> var, double eps) {
    const Array& xv = value(x);
    const auto [n, c, inner] = bn_dims(xv, value(gamma), value(beta));
    require(mean.size() == c && var.size() == c, ErrorKind::Shape,
            "batch_norm_fixed: statistics length mismatch");
    std::vector<double> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    const Array& gv = value(gamma);
    const Array& bv = value(beta);
    Array xhat(xv.shape());
    Array y(xv.shape());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < inner; ++k) {
          const std::size_t i = (r * c + ch) * inner + k;
          xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
          y[i] = gv[ch] * xhat[i] + bv[ch];
        }
    return push(std::move(y), {x, gamma, beta}, "batch_norm_fixed", false,
                [x, gamma, beta, n, c, inner, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  const Array& gv = t.nodes_[gamma.id].value;
                  const bool nx = t.needs(x), ng = t.needs(gamma), nb = t.needs(beta);
                  Array* gx = nx ? &t.grad_ref(x) : nullptr;
                  Array* gg = ng ? &t.grad_ref(gamma) : nullptr;
                  Array* gb = nb ? &t.grad_ref(beta) : nullptr;
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t k = 0; k < inner; ++k) {
                        const std::size_t i = (r * c + ch) * inner + k;
                        if (gx) (*gx)[i] += g[i] * gv[ch] * inv_std[ch];
                        if (gg) (*gg)[ch] += g[i] * xhat[i];
                        if (gb) (*gb)[ch] += g[i];
                      }
                });
  }

  /// [N,C,H,W] -> [N,C] spatial mean.
  Var global_avg_pool(Var x) {
    const Array& xv = value(x);
    require(xv.rank() == 4, ErrorKind::Shape, "global_avg_pool expects rank 4");
    const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.dim(2) * xv.dim(3);
    Array y(Shape{n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) s += xv[i * inner + k];
      y[i] = s / static_cast<double>(inner);
    }
    return push(std::move(y), {x}, "global_avg_pool", false,
                [x, n, c, inner](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  Array& gx = t.grad_ref(x);
                  for (std::size_t i = 0; i < n * c; ++i)
                    for (std::size_t k = 0; k < inner; ++k)
                      gx[i * inner + k] += g[i] / static_cast<double>(inner);
                });
  }

  /// [N,...] -> [N, prod(...)].
  Var flatten(Var x) {
    const Array& xv = value(x);
    require(xv.rank() >= 1, ErrorKind::Shape, "flatten on scalar");
    if (xv.rank() == 2) return x;
    Shape in_shape = xv.shape();
    Array y = xv.reshaped(Shape{xv.dim(0), xv.size() / xv.dim(0)});
    return push(std::move(y), {x}, "flatten", false, [x](Tape& t, std::size_t self) {
      const Array& g = t.nodes_[self].grad;
      Array& gx = t.grad_ref(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }

  /// Zero-pads or truncates dimension 1 to `channels`. Used by residual
  /// shortcuts whose block changes channel count.
  Var channel_fit(Var x, std::size_t channels) {
    const Array& xv = value(x);
    require(xv.rank() >= 2 && channels >= 1, ErrorKind::Shape, "channel_fit");
    const std::size_t c = xv.dim(1);
    if (c == channels) return x;
    const std::size_t n = xv.dim(0), inner = xv.size() / (n * c);
    const std::size_t keep = std::min(c, channels);
    Shape shape = xv.shape();
    shape[1] = channels;
    Array y(shape);
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(xv.data().begin() + r * c * inner, keep * inner,
                  y.data().begin() + r * channels * inner);
    return push(std::move(y), {x}, "channel_fit", false,
                [x, n, c, channels, inner, keep](Tape& t, std::size_t self) {
                  const Array& g = t.nodes_[self].grad;
                  Array& gx = t.grad_ref(x);
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t k = 0; k < keep * inner; ++k)
                      gx[r * c * inner + k] += g[r * channels * inner + k];
                });
  }

  /// Row-wise log-softmax of x[N,C].
  Var log_softmax(Var x) {
    const Array& xv = value(x);
    require(xv.rank() == 2, ErrorKind::Shape, "log_softmax expects [N,C]");
    const std::size_t n = xv.dim(0), c = xv.dim(1);
    Array y(xv.shape());
    for (std::size_t r = 0; r < n; ++r) {
      const double lse = logsumexp(&xv[r * c], c);
      for (std::size_t k = 0; k < c; ++k) y[r * c + k] = xv[r * c + k] - lse;
    }
    return push(std::move(y), {x}, "log_softmax", false, [x, n, c](Tape& t, std::size_t self) {
      const Array& g = t.nodes_[self].grad;
      const Array& y = t.nodes_[self].value;
      Array& gx = t.grad_ref(x);
      for (std::size_t r = 0; r < n; ++r) {
        double gs = 0.0;
        for (std::size_t k = 0; k < c; ++k) gs += g[r * c + k];
        for (std::size_t k = 0; k < c; ++k)
          gx[r * c + k] += g[r * c + k] - std::exp(y[r * c + k]) * gs;
      }
    });
  }

  /// Mean negative log-likelihood of integer labels under softmax(logits).
  Var cross_entropy(Var logits, std::span<const int> labels) {
    const Array& z = value(logits);
    require(z.rank() == 2 && z.dim(0) == labels.size(), ErrorKind::Shape,
            "cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                std::to_string(labels.size()) + " labels");
    const std::size_t n = z.dim(0), c = z.dim(1);
    for (int y : labels)
      require(y >= 0 && static_cast<std::size_t>(y) < c, ErrorKind::Shape,
              "cross_entropy: label " + std::to_string(y) + " outside [0," +
                  std::to_string(c) + ")");
    Array probs(z.shape());
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double lse = logsumexp(&z[r * c], c);
      for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(z[r * c + k] - lse);
      loss -= z[r * c + labels[r]] - lse;
    }
    loss /= static_cast<double>(n);
    std::vector<int> lab(labels.begin(), labels.end());
    return push(Array::scalar(loss), {logits}, "cross_entropy", false,
                [logits, n, c, probs = std::move(probs), lab = std::move(lab)](Tape& t,
                                                                               std::size_t self) {
                  const double g = t.nodes_[self].grad[0] / static_cast<double>(n);
                  Array& gz = t.grad_ref(logits);
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t k = 0; k < c; ++k) {
                      const double onehot = static_cast<int>(k) == lab[r] ? 1.0 : 0.0;
                      gz[r * c + k] += g * (probs[r * c + k] - onehot);
                    }
                });
  }

  /// KL(softmax(p) || softmax(q)) in nats, averaged over rows. Probabilities
  /// are floored at kKlFloor before the log.
  Var kl_divergence(Var p_logits, Var q_logits) {
    const Array& pz = value(p_logits);
    const Array& qz = value(q_logits);
    require_same_shape(pz, qz, "kl_divergence");
    require(pz.rank() == 2 && pz.dim(1) >= 2, ErrorKind::Shape,
            "kl_divergence expects [N,C] logits with C >= 2");
    const std::size_t n = pz.dim(0), c = pz.dim(1);
    Array p = softmax_rows(pz), q = softmax_rows(qz);
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
      total += p[i] * (std::log(std::max(p[i], kKlFloor)) - std::log(std::max(q[i], kKlFloor)));
    total /= static_cast<double>(n);
    return push(Array::scalar(total), {p_logits, q_logits}, "kl_divergence", false,
                [p_logits, q_logits, n, c, p = std::move(p), q = std::move(q)](Tape& t,
                                                                               std::size_t self) {
                  const double g = t.nodes_[self].grad[0] / static_cast<double>(n);
                  if (t.needs(p_logits)) {
                    Array& gp = t.grad_ref(p_logits);
                    for (std::size_t r = 0; r < n; ++r) {
                      const double* pr = &p[r * c];
                      const double* qr = &q[r * c];
                      std::vector<double> d(c);
                      double avg = 0.0;
                      for (std::size_t k = 0; k < c; ++k) {
                        d[k] = std::log(std::max(pr[k], kKlFloor)) +
                               (pr[k] > kKlFloor ? 1.0 : 0.0) -
                               std::log(std::max(qr[k], kKlFloor));
                        avg += pr[k] * d[k];
                      }
                      for (std::size_t k = 0; k < c; ++k) gp[r * c + k] += g * pr[k] * (d[k] - avg);
                    }
                  }
                  if (t.needs(q_logits)) {
                    Array& gq = t.grad_ref(q_logits);
                    for (std::size_t r = 0; r < n; ++r) {
                      const double* pr = &p[r * c];
                      const double* qr = &q[r * c];
                      double active = 0.0;
                      for (std::size_t k = 0; k < c; ++k)
                        if (qr[k] > kKlFloor) active += pr[k];
                      for (std::size_t k = 0; k < c; ++k) {
                        const double own = qr[k] > kKlFloor ? pr[k] : 0.0;
                        gq[r * c + k] += g * (qr[k] * active - own);
                      }
                    }
                  }
                });
  }

  /// Mean squared error against a constant target of the same shape.
  Var mse(Var pred, const Array& target) {
    const Array& pv = value(pred);
    require_same_shape(pv, target, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - target[i]) * (pv[i] - target[i]);
    const double count = static_cast<double>(pv.size());
    return push(Array::scalar(s / count), {pred}, "mse", false,
                [pred, target, count](Tape& t, std::size_t self) {
                  const double g = t.nodes_[self].grad[0];
                  const Array& pv = t.nodes_[pred.id].value;
                  Array& gp = t.grad_ref(pred);
                  for (std::size_t i = 0; i < pv.size(); ++i)
                    gp[i] += g * 2.0 * (pv[i] - target[i]) / count;
                });
  }

  // ---- reverse pass -----------------------------------------------------

  /// Propagates seed·output back through the tape. A tape can be consumed
  /// only once.
  GradientSet backward(Var out, const Array& seed) {
    require(!consumed_, ErrorKind::State, "tape already consumed");
    require_same_shape(node(out).value, seed, "backward seed");
    consumed_ = true;
    if (nodes_[out.id].needs_grad) {
      grad_ref(out) = seed;
      for (std::size_t i = out.id + 1; i-- > 0;) {
        Node& nd = nodes_[i];
        if (nd.has_grad && nd.back) nd.back(*this, i);
      }
    }
    GradientSet result = std::move(grads_);
    grads_ = GradientSet{};
    if (input_.valid()) result.input = grad(input_);
    return result;
  }

  /// Backward from a scalar output with seed 1.
  GradientSet backward(Var out) {
    require(node(out).value.size() == 1, ErrorKind::Shape,
            "backward without seed needs a scalar output");
    return backward(out, Array(node(out).value.shape(), 1.0));
  }

  static Array softmax_rows(const Array& z) {
    const std::size_t n = z.dim(0), c = z.dim(1);
    Array p(z.shape());
    for (std::size_t r = 0; r < n; ++r) {
      const double lse = logsumexp(&z[r * c], c);
      for (std::size_t k = 0; k < c; ++k) p[r * c + k] = std::exp(z[r * c + k] - lse);
    }
    return p;
  }

 private:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Array value;
    Array grad;
    bool has_grad = false;
    bool needs_grad = false;
    Backward back;
  };

  static double logsumexp(const double* z, std::size_t c) {
    double mx = z[0];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, z[k]);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(z[k] - mx);
    return mx + std::log(s);
  }

  struct BnDims {
    std::size_t n, c, inner;
  };

  static BnDims bn_dims(const Array& x, const Array& gamma, const Array& beta) {
    require(x.rank() >= 2 && gamma.rank() == 1 && beta.rank() == 1 &&
                gamma.dim(0) == x.dim(1) && beta.dim(0) == x.dim(1),
            ErrorKind::Shape,
            "batch_norm: input " + shape_str(x.shape()) + " gamma " + shape_str(gamma.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    return BnDims{n, c, x.size() / (n * c)};
  }

  const Node& node(Var v) const {
    require(v.valid() && v.id < nodes_.size(), ErrorKind::State, "invalid tape variable");
    return nodes_[v.id];
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  Array& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (!n.has_grad) {
      n.grad = Array(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  Var leaf(Array x, bool needs_grad) {
    require(!consumed_, ErrorKind::State, "tape already consumed");
    require(x.all_finite(), ErrorKind::Numeric, "non-finite leaf value");
    nodes_.push_back(Node{std::move(x), Array{}, false, needs_grad, nullptr});
    return Var{nodes_.size() - 1};
  }

  Var push(Array value, std::initializer_list<Var> parents, const char* op, bool is_source,
           Backward back) {
    require(!consumed_, ErrorKind::State, "tape already consumed");
    if (!value.all_finite())
      fail(ErrorKind::Numeric, std::string("non-finite value produced by ") + op);
    bool needs_grad = is_source;
    for (Var p : parents) needs_grad = needs_grad || nodes_[p.id].needs_grad;
    nodes_.push_back(Node{std::move(value), Array{}, false, needs_grad,
                          needs_grad ? std::move(back) : Backward{}});
    if (!is_source) ++num_ops_;
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  GradientSet grads_;
  Var input_;
  std::size_t num_ops_ = 0;
  bool track_params_ = true;
  bool consumed_ = false;
};

}  // namespace proard::ad
