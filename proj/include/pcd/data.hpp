#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcd/errors.hpp"
#include "pcd/tensor.hpp"

namespace pcd {

struct SyntheticSpec {
  std::size_t num_classes = 20;
  std::size_t dim = 32;
  std::size_t samples_per_class = 100;
  double class_center_scale = 3.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synthetic num_classes must be >= 2");
    if (dim < 1) throw ConfigError("synthetic dim must be >= 1");
    if (samples_per_class < 1) throw ConfigError("synthetic samples_per_class must be >= 1");
    if (!(class_center_scale > 0.0)) throw ConfigError("synthetic center scale must be > 0");
    if (!(noise_std > 0.0)) throw ConfigError("synthetic noise_std must be > 0");
  }
};

// Row-major features [N, D] with labels and a fixed train/test split.
struct Dataset {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;

  std::size_t size() const noexcept { return labels.size(); }

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }

  Tensor gather_features(std::span<const std::size_t> idx) const {
    std::vector<double> out;
    out.reserve(idx.size() * dim);
    for (std::size_t i : idx) {
      auto r = row(i);
      out.insert(out.end(), r.begin(), r.end());
    }
    return Tensor::from({idx.size(), dim}, std::move(out));
  }

  std::vector<std::size_t> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
};

// Per class, every fifth sample (in row order) goes to the test split.
inline void assign_round_robin_split(Dataset& ds) {
  std::vector<std::size_t> seen(ds.num_classes, 0);
  ds.train_idx.clear();
  ds.test_idx.clear();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t k = seen[ds.labels[i]]++;
    (k % 5 == 4 ? ds.test_idx : ds.train_idx).push_back(i);
  }
}

// Class centers uniform on the sphere of radius class_center_scale; samples
// are center + N(0, noise_std^2 I). Rows are grouped by class.
inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> centers(spec.num_classes * spec.dim);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    double norm2 = 0.0;
    for (std::size_t d = 0; d < spec.dim; ++d) {
      const double v = unit(rng);
      centers[c * spec.dim + d] = v;
      norm2 += v * v;
    }
    const double k = spec.class_center_scale / std::sqrt(norm2);
    for (std::size_t d = 0; d < spec.dim; ++d) centers[c * spec.dim + d] *= k;
  }
  Dataset ds;
  ds.dim = spec.dim;
  ds.num_classes = spec.num_classes;
  ds.features.reserve(spec.num_classes * spec.samples_per_class * spec.dim);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
      for (std::size_t d = 0; d < spec.dim; ++d) {
        ds.features.push_back(centers[c * spec.dim + d] + spec.noise_std * unit(rng));
      }
      ds.labels.push_back(c);
    }
  }
  assign_round_robin_split(ds);
  return ds;
}

// Header-less CSV, one sample per line: label,f1,...,fD.
inline void write_csv_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.labels[i];
    for (double v : ds.row(i)) os << ',' << v;
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

namespace detail {

inline double parse_double(std::string_view field, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size()) {
    throw ParseError("non-numeric field '" + std::string(field) + "'", line);
  }
  if (!std::isfinite(v)) throw ParseError("non-finite value '" + std::string(field) + "'", line);
  return v;
}

}  // namespace detail

inline Dataset load_csv_dataset(const std::filesystem::path& path, std::size_t num_classes) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset " + path.string());
  Dataset ds;
  ds.num_classes = num_classes;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(is, text)) {
    ++line_no;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(text);
    for (;;) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() < 2) throw ParseError("expected label and at least one feature", line_no);
    std::size_t label = 0;
    auto [ptr, ec] =
        std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), label);
    if (ec != std::errc{} || ptr != fields[0].data() + fields[0].size()) {
      throw ParseError("label '" + std::string(fields[0]) + "' is not a class index", line_no);
    }
    if (label >= num_classes) {
      throw ParseError("label " + std::to_string(label) + " out of range for " +
                       std::to_string(num_classes) + " classes",
                       line_no);
    }
    if (ds.dim == 0) {
      ds.dim = fields.size() - 1;
    } else if (fields.size() - 1 != ds.dim) {
      throw ParseError("expected " + std::to_string(ds.dim) + " features, got " +
                           std::to_string(fields.size() - 1),
                       line_no);
    }
    for (std::size_t f = 1; f < fields.size(); ++f) {
      ds.features.push_back(detail::parse_double(fields[f], line_no));
    }
    ds.labels.push_back(label);
  }
  if (ds.size() == 0) throw DataError("dataset " + path.string() + " has no rows");
  assign_round_robin_split(ds);
  return ds;
}

// Shuffled minibatches of `indices`; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_iter(std::span<const std::size_t> indices,
                                                        std::size_t batch_size,
                                                        std::uint64_t epoch_seed) {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline std::vector<std::vector<std::size_t>> batch_iter(const Dataset& ds,
                                                        std::size_t batch_size,
                                                        std::uint64_t epoch_seed) {
  return batch_iter(ds.train_idx, batch_size, epoch_seed);
}

}  // namespace pcd
