#pragma once

// CSV artifacts for external plotting: teacher/student probability-gap
// matrices and penultimate-layer embeddings.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <vector>

#include "pcd/data.hpp"
#include "pcd/errors.hpp"
#include "pcd/models.hpp"
#include "pcd/tensor.hpp"

namespace pcd {

// Row-major [C, C]: entry (y, c) is the mean over samples with true class y
// of p_c - q_c, where p / q are the teacher / student softmax at tau.
// Classes absent from the split leave a zero row.
inline std::vector<double> logit_diff_matrix(const ModelParams& teacher, const ModelParams& student,
                                             const Dataset& ds, std::span<const std::size_t> split,
                                             double tau = 4.0) {
  const std::size_t classes = ds.num_classes;
  if (teacher.spec.num_classes != classes || student.spec.num_classes != classes) {
    throw DimensionError("logit diff: teacher has " + std::to_string(teacher.spec.num_classes) +
                         " classes, student " + std::to_string(student.spec.num_classes) +
                         ", dataset " + std::to_string(classes));
  }
  const Tensor x = ds.gather_features(split);
  const Mask all = Mask::full(split.size(), classes);
  const Tensor p = masked_softmax_temp(forward_logits(teacher, x).detach(), all, tau);
  const Tensor q = masked_softmax_temp(forward_logits(student, x).detach(), all, tau);
  std::vector<double> out(classes * classes, 0.0);
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t r = 0; r < split.size(); ++r) {
    const std::size_t y = ds.labels[split[r]];
    ++count[y];
    for (std::size_t c = 0; c < classes; ++c) out[y * classes + c] += p.at(r, c) - q.at(r, c);
  }
  for (std::size_t y = 0; y < classes; ++y) {
    if (count[y] == 0) continue;
    for (std::size_t c = 0; c < classes; ++c) out[y * classes + c] /= static_cast<double>(count[y]);
  }
  return out;
}

inline double frobenius_norm(std::span<const double> m) {
  double acc = 0.0;
  for (double v : m) acc += v * v;
  return std::sqrt(acc);
}

inline void write_matrix_csv(const std::filesystem::path& path, std::span<const double> m,
                             std::size_t cols) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << m[i] << ((i + 1) % cols == 0 ? '\n' : ',');
  }
  if (!os) throw IoError("failed writing " + path.string());
}

// One line per sample: label,h1,...,hW from the last hidden layer.
inline void export_embeddings(const std::filesystem::path& path, const ModelParams& model,
                              const Dataset& ds) {
  const auto idx = ds.all_indices();
  const Tensor h = forward_features(model, ds.gather_features(idx)).detach();
  const std::size_t width = h.dim(1);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    os << ds.labels[idx[r]];
    for (std::size_t k = 0; k < width; ++k) os << ',' << h.at(r, k);
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace pcd
