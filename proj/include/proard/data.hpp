#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <vector>

#include "proard/array.hpp"
#include "proard/csv.hpp"
#include "proard/rng.hpp"

namespace proard::data {

/// Examples stacked along axis 0; inputs lie in [0,1], labels in [0, num_classes).
struct Dataset {
  Array x;
  std::vector<int> y;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return y.size(); }
  bool empty() const noexcept { return y.empty(); }
  Shape input_shape() const { return Shape(x.shape().begin() + 1, x.shape().end()); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.x = take_rows(x, idx);
    d.y.reserve(idx.size());
    for (std::size_t i : idx) d.y.push_back(y.at(i));
    d.num_classes = num_classes;
    return d;
  }

  Dataset range(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return subset(idx);
  }
};

inline void validate(const Dataset& d) {
  require(!d.empty(), ErrorKind::Config, "empty dataset");
  require(d.x.rank() >= 2 && d.x.dim(0) == d.y.size(), ErrorKind::Shape,
          "dataset inputs and labels disagree in count");
  require(d.num_classes >= 2, ErrorKind::Config, "dataset needs at least two classes");
  for (int label : d.y)
    require(label >= 0 && static_cast<std::size_t>(label) < d.num_classes, ErrorKind::Config,
            "label out of range");
  for (double v : d.x.data())
    require(v >= 0.0 && v <= 1.0, ErrorKind::Config, "input outside [0,1]");
}

struct Split {
  Dataset train;
  Dataset test;
};

/// Leading examples train, trailing examples test; order is kept.
inline Split train_test_split(const Dataset& d, double test_fraction) {
  require(test_fraction > 0.0 && test_fraction < 1.0, ErrorKind::Config,
          "test fraction must lie in (0,1)");
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * double(d.size())));
  require(n_test >= 1 && n_test < d.size(), ErrorKind::Config, "degenerate train/test split");
  return {d.range(0, d.size() - n_test), d.range(d.size() - n_test, d.size())};
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  return idx;
}

/// Contiguous batches over `order`; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batches(const std::vector<std::size_t>& order,
                                                     std::size_t batch_size) {
  require(batch_size >= 1, ErrorKind::Config, "batch size must be >= 1");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + i,
                     order.begin() + std::min(order.size(), i + batch_size));
  return out;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 100;
  Shape shape{1, 8, 8};
  double separation = 1.0;  // prototype scale; 0 makes classes identical
  double noise = 0.15;
};

/// Gaussian mixture: x = clip(0.5 + separation * p_c + noise * z), p_c ~ U[-0.5,0.5]^D.
/// Examples are shuffled so consecutive labels are mixed.
inline Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  require(spec.num_classes >= 2, ErrorKind::Config, "synthetic data needs >= 2 classes");
  require(spec.per_class >= 1, ErrorKind::Config, "synthetic data needs >= 1 example per class");
  require(!spec.shape.empty() && shape_size(spec.shape) >= 1, ErrorKind::Config,
          "synthetic shape is empty");
  require(spec.separation >= 0.0 && spec.noise >= 0.0, ErrorKind::Config,
          "separation and noise must be non-negative");
  const std::size_t dim = shape_size(spec.shape);
  Rng proto_rng = make_rng(seed, "synthetic.prototypes");
  Rng noise_rng = make_rng(seed, "synthetic.noise");
  Rng order_rng = make_rng(seed, "synthetic.order");

  std::vector<std::vector<double>> proto(spec.num_classes, std::vector<double>(dim));
  for (auto& p : proto)
    for (double& v : p) v = uniform(proto_rng, -0.5, 0.5);

  const std::size_t n = spec.num_classes * spec.per_class;
  Shape full{n};
  full.insert(full.end(), spec.shape.begin(), spec.shape.end());
  Array raw(full);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.num_classes;
    labels[i] = static_cast<int>(c);
    for (std::size_t k = 0; k < dim; ++k) {
      const double v = 0.5 + spec.separation * proto[c][k] + spec.noise * normal(noise_rng);
      raw[i * dim + k] = std::clamp(v, 0.0, 1.0);
    }
  }
  Dataset all{std::move(raw), std::move(labels), spec.num_classes};
  return all.subset(shuffled_indices(n, order_rng));
}

enum class CifarKind { Cifar10, Cifar100 };

/// CIFAR binary records: label byte(s) then 3072 channel-major pixel bytes.
/// CIFAR-100 carries a coarse and a fine label; the fine label is used.
inline Dataset ingest_cifar(const std::filesystem::path& path, CifarKind kind,
                            std::optional<std::size_t> cap = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::size_t label_bytes = kind == CifarKind::Cifar10 ? 1 : 2;
  const std::size_t pixels = 3 * 32 * 32;
  const std::size_t record = label_bytes + pixels;
  const std::size_t classes = kind == CifarKind::Cifar10 ? 10 : 100;
  require(!bytes.empty(), ErrorKind::Io, "empty dataset file " + path.string());
  require(bytes.size() % record == 0, ErrorKind::Io,
          "truncated CIFAR file " + path.string() + " (" + std::to_string(bytes.size()) +
              " bytes is not a multiple of " + std::to_string(record) + ")");
  std::size_t n = bytes.size() / record;
  if (cap) n = std::min(n, *cap);
  require(n >= 1, ErrorKind::Io, "empty dataset after cap");

  Dataset d{Array(Shape{n, 3, 32, 32}), std::vector<int>(n), classes};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    const unsigned label = rec[label_bytes - 1];
    require(label < classes, ErrorKind::Io,
            "label " + std::to_string(label) + " out of range in record " + std::to_string(i));
    d.y[i] = static_cast<int>(label);
    for (std::size_t k = 0; k < pixels; ++k) d.x[i * pixels + k] = rec[label_bytes + k] / 255.0;
  }
  return d;
}

/// CSV with header `label,v0,v1,...`; values already in [0,1].
inline Dataset ingest_csv(const std::filesystem::path& path, const Shape& shape,
                          std::size_t num_classes) {
  const csv::Table t = csv::read(path);
  const std::size_t dim = shape_size(shape);
  require(t.header.size() == dim + 1, ErrorKind::Io,
          "csv dataset width " + std::to_string(t.header.size()) + " does not match shape " +
              shape_str(shape));
  require(!t.rows.empty(), ErrorKind::Io, "empty dataset file " + path.string());
  const std::size_t n = t.rows.size();
  Shape full{n};
  full.insert(full.end(), shape.begin(), shape.end());
  Dataset d{Array(full), std::vector<int>(n), num_classes};
  for (std::size_t i = 0; i < n; ++i) {
    d.y[i] = static_cast<int>(csv::parse_int(t.rows[i][0]));
    for (std::size_t k = 0; k < dim; ++k) d.x[i * dim + k] = csv::parse_double(t.rows[i][k + 1]);
  }
  validate(d);
  return d;
}

inline void write_csv(const std::filesystem::path& path, const Dataset& d) {
  csv::Table t;
  const std::size_t dim = shape_size(d.input_shape());
  t.header.push_back("label");
  for (std::size_t k = 0; k < dim; ++k) t.header.push_back("v" + std::to_string(k));
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<std::string> row{std::to_string(d.y[i])};
    for (std::size_t k = 0; k < dim; ++k) row.push_back(csv::fmt(d.x[i * dim + k]));
    t.rows.push_back(std::move(row));
  }
  csv::write(path, t);
}

}  // namespace proard::data
