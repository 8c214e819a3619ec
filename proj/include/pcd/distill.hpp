#pragma once

// Logit distillation losses: vanilla temperature-scaled KD and progressive
// class-level distillation (ranked, grouped, stage-wise masked KL with
// cosine-distance group weights in two group-size progressions).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcd/errors.hpp"
#include "pcd/tensor.hpp"

namespace pcd {

enum class Direction { fine_to_coarse, coarse_to_fine };

inline std::string_view to_string(Direction d) {
  return d == Direction::fine_to_coarse ? "F2CL" : "C2FL";
}

// Which objective a student is trained with.
enum class Method { ce, kd, pcd };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::ce: return "ce";
    case Method::kd: return "kd";
    case Method::pcd: return "pcd";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "ce") return Method::ce;
  if (s == "kd") return Method::kd;
  if (s == "pcd") return Method::pcd;
  throw ConfigError("unknown method '" + std::string(s) + "' (expected ce, kd or pcd)");
}

struct PcdConfig {
  Method method = Method::pcd;
  double tau = 4.0;
  double alpha = 1.0;
  std::size_t stages = 3;
  bool use_ldr = true;
  bool use_f2cl = true;
  bool use_c2fl = true;
  bool use_wdm = true;
  // Vanilla KD weights (CE and KL terms); unused by the progressive loss.
  double kd_alpha_ce = 1.0;
  double kd_beta = 1.0;

  void validate(std::size_t num_classes) const {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
      throw ConfigError("tau must be positive, got " + std::to_string(tau));
    }
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
      throw ConfigError("alpha must be non-negative, got " + std::to_string(alpha));
    }
    if (!(kd_alpha_ce >= 0.0) || !(kd_beta >= 0.0)) {
      throw ConfigError("kd weights must be non-negative");
    }
    if (method != Method::pcd) return;
    if (!use_f2cl && !use_c2fl) {
      throw ConfigError("progressive distillation needs use_f2cl or use_c2fl");
    }
    if (stages < 1 || stages > num_classes) {
      throw ConfigError("stages must lie in [1, " + std::to_string(num_classes) +
                        "], got " + std::to_string(stages));
    }
  }
};

// Paired teacher/student logits [B, C] for one minibatch.
struct LogitBatch {
  Tensor teacher;
  Tensor student;
  std::vector<std::size_t> labels;

  std::size_t batch_size() const { return student.dim(0); }
  std::size_t num_classes() const { return student.dim(1); }

  void validate() const {
    if (!teacher || !student) throw ContractError("LogitBatch: missing logits");
    if (student.rank() != 2 || teacher.shape() != student.shape()) {
      throw DimensionError("LogitBatch: teacher " + shape_str(teacher.shape()) +
                           " vs student " + shape_str(student.shape()));
    }
    if (num_classes() < 2) throw DimensionError("LogitBatch: need at least 2 classes");
    if (labels.size() != batch_size()) {
      throw DimensionError("LogitBatch: " + std::to_string(labels.size()) +
                           " labels for batch of " + std::to_string(batch_size()));
    }
    for (std::size_t b = 0; b < labels.size(); ++b) {
      if (labels[b] >= num_classes()) {
        throw DataError("label " + std::to_string(labels[b]) + " of sample " +
                        std::to_string(b) + " out of range for " +
                        std::to_string(num_classes()) + " classes");
      }
    }
  }
};

// Per-sample class order, most divergent teacher/student logit first.
class RankSequence {
 public:
  RankSequence(std::size_t rows, std::size_t cols, std::vector<std::size_t> indices)
      : rows_(rows), cols_(cols), indices_(std::move(indices)) {
    if (indices_.size() != rows_ * cols_) {
      throw DimensionError("RankSequence: size mismatch");
    }
  }

  static RankSequence natural(std::size_t rows, std::size_t cols) {
    std::vector<std::size_t> idx(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      std::iota(idx.begin() + static_cast<std::ptrdiff_t>(r * cols),
                idx.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), std::size_t{0});
    }
    return RankSequence(rows, cols, std::move(idx));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<const std::size_t> row(std::size_t r) const {
    return std::span<const std::size_t>(indices_).subspan(r * cols_, cols_);
  }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::size_t> indices_;
};

// Descending |teacher - student| per sample; ties keep ascending class index.
inline RankSequence rank_logit_difference(const LogitBatch& batch) {
  batch.validate();
  const std::size_t rows = batch.batch_size(), cols = batch.num_classes();
  std::vector<std::size_t> idx(rows * cols);
  std::vector<double> gap(cols);
  auto t = batch.teacher.data();
  auto s = batch.student.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) gap[c] = std::abs(t[r * cols + c] - s[r * cols + c]);
    auto first = idx.begin() + static_cast<std::ptrdiff_t>(r * cols);
    auto last = first + static_cast<std::ptrdiff_t>(cols);
    std::iota(first, last, std::size_t{0});
    std::stable_sort(first, last,
                     [&gap](std::size_t a, std::size_t b) { return gap[a] > gap[b]; });
  }
  return RankSequence(rows, cols, std::move(idx));
}

// Group size per stage: ceil(C / (S - i + 1)) growing for fine-to-coarse,
// ceil(C / i) shrinking for coarse-to-fine, i = 1..S.
inline std::vector<std::size_t> stage_group_sizes(std::size_t classes, std::size_t stages,
                                                  Direction direction) {
  if (stages < 1) throw ParameterError("stage count must be at least 1");
  if (stages > classes) {
    throw ParameterError("stage count " + std::to_string(stages) + " exceeds class count " +
                         std::to_string(classes) + "; use S <= C");
  }
  std::vector<std::size_t> sizes(stages);
  for (std::size_t i = 1; i <= stages; ++i) {
    const std::size_t denom =
        direction == Direction::fine_to_coarse ? stages - i + 1 : i;
    sizes[i - 1] = (classes + denom - 1) / denom;
  }
  return sizes;
}

struct StagePlan {
  std::size_t group_size;
  std::size_t group_count;
};

// Stage-wise partition of each sample's ranked classes into consecutive
// chunks. Group 0 of every stage holds the most divergent classes.
class DistillSchedule {
 public:
  DistillSchedule(Direction direction, RankSequence ranks, std::vector<StagePlan> stages)
      : direction_(direction), ranks_(std::move(ranks)), stages_(std::move(stages)) {}

  Direction direction() const noexcept { return direction_; }
  const RankSequence& ranks() const noexcept { return ranks_; }
  std::span<const StagePlan> stages() const { return stages_; }
  std::size_t samples() const noexcept { return ranks_.rows(); }
  std::size_t classes() const noexcept { return ranks_.cols(); }

  std::span<const std::size_t> group(std::size_t stage, std::size_t sample,
                                     std::size_t j) const {
    const StagePlan& plan = stages_.at(stage);
    if (j >= plan.group_count) throw ContractError("group index out of range");
    const std::size_t begin = j * plan.group_size;
    const std::size_t len = std::min(plan.group_size, classes() - begin);
    return ranks_.row(sample).subspan(begin, len);
  }

  Mask group_mask(std::size_t stage, std::size_t j) const {
    Mask mask(samples(), classes());
    for (std::size_t b = 0; b < samples(); ++b) {
      for (std::size_t c : group(stage, b, j)) mask.set(b, c);
    }
    return mask;
  }

 private:
  Direction direction_;
  RankSequence ranks_;
  std::vector<StagePlan> stages_;
};

inline DistillSchedule build_schedule(const RankSequence& ranks, std::size_t classes,
                                      std::size_t stages, Direction direction) {
  if (ranks.cols() != classes) {
    throw DimensionError("build_schedule: ranks have " + std::to_string(ranks.cols()) +
                         " classes, expected " + std::to_string(classes));
  }
  std::vector<StagePlan> plans;
  for (std::size_t m : stage_group_sizes(classes, stages, direction)) {
    plans.push_back({m, (classes + m - 1) / m});
  }
  return DistillSchedule(direction, ranks, std::move(plans));
}

// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const Mask all = Mask::full(logits.dim(0), logits.dim(1));
  return scale(mean(pick(masked_log_softmax_temp(logits, all, 1.0), labels)), -1.0);
}

// Teacher and student distributions over one group (masked-in classes).
struct GroupDistributions {
  Tensor teacher_prob;
  Tensor teacher_log_prob;
  Tensor student_prob;
  Tensor student_log_prob;
};

inline GroupDistributions group_distributions(const LogitBatch& batch, const Mask& mask,
                                              double tau) {
  const Tensor teacher =
      batch.teacher.requires_grad() ? batch.teacher.detach() : batch.teacher;
  return {masked_softmax_temp(teacher, mask, tau),
          masked_log_softmax_temp(teacher, mask, tau),
          masked_softmax_temp(batch.student, mask, tau),
          masked_log_softmax_temp(batch.student, mask, tau)};
}

// Per row KL(p || q) = sum_c p_c (log p_c - log q_c); zero-probability
// entries contribute nothing.
inline Tensor kl_rows(const Tensor& p, const Tensor& log_p, const Tensor& log_q) {
  return row_sum(mul(p, sub(log_p, log_q)));
}

// Per row cosine distance 1 - <p,q> / (|p| |q|), or constant 1 when the
// weighting is disabled.
inline Tensor group_weight(const Tensor& p, const Tensor& q, bool use_wdm = true) {
  detail::require_same_shape(p, q, "group_weight");
  detail::require_rank(p, 2, "group_weight");
  if (!use_wdm) return Tensor::from({p.dim(0)}, std::vector<double>(p.dim(0), 1.0));
  const Tensor cosine =
      div(row_dot(p, q), mul(sqrt(row_dot(p, p)), sqrt(row_dot(q, q))));
  return add_scalar(scale(cosine, -1.0), 1.0);
}

// Per row lambda * KL(p || q) * tau^2.
inline Tensor group_loss(const GroupDistributions& g, const Tensor& lambda, double tau) {
  return scale(mul(lambda, kl_rows(g.teacher_prob, g.teacher_log_prob, g.student_log_prob)),
               tau * tau);
}

// alpha_ce * CE(student, labels) + beta * tau^2 * mean_b KL(p_tau || q_tau)
inline Tensor vanilla_kd_loss(const LogitBatch& batch, double tau, double alpha_ce,
                              double beta) {
  batch.validate();
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
  const Mask all = Mask::full(batch.batch_size(), batch.num_classes());
  const GroupDistributions g = group_distributions(batch, all, tau);
  const Tensor kl =
      scale(mean(kl_rows(g.teacher_prob, g.teacher_log_prob, g.student_log_prob)),
            beta * tau * tau);
  return add(scale(cross_entropy(batch.student, batch.labels), alpha_ce), kl);
}

// Values recorded for one (stage, group) while computing a direction loss.
struct GroupTrace {
  Direction direction;
  std::size_t stage;
  std::size_t group;
  std::vector<double> lambda;  // per sample
  std::vector<double> loss;    // per sample
};

// mean_b sum_stages sum_groups D
inline Tensor direction_loss(const LogitBatch& batch, const DistillSchedule& schedule,
                             const PcdConfig& cfg, std::vector<GroupTrace>* trace = nullptr) {
  if (schedule.samples() != batch.batch_size() ||
      schedule.classes() != batch.num_classes()) {
    throw DimensionError("direction_loss: schedule does not match batch");
  }
  Tensor per_sample;
  for (std::size_t i = 0; i < schedule.stages().size(); ++i) {
    for (std::size_t j = 0; j < schedule.stages()[i].group_count; ++j) {
      const GroupDistributions g = group_distributions(batch, schedule.group_mask(i, j), cfg.tau);
      const Tensor lambda = group_weight(g.teacher_prob, g.student_prob, cfg.use_wdm);
      const Tensor d = group_loss(g, lambda, cfg.tau);
      if (trace) {
        trace->push_back({schedule.direction(), i, j,
                          {lambda.data().begin(), lambda.data().end()},
                          {d.data().begin(), d.data().end()}});
      }
      per_sample = per_sample ? add(per_sample, d) : d;
    }
  }
  return mean(per_sample);
}

struct PcdTerms {
  Tensor ce;
  Tensor f2cl;  // null when the direction is disabled
  Tensor c2fl;
  Tensor total;
};

// CE + alpha * (L_F2CL + L_C2FL). One ranking per batch feeds both directions.
inline PcdTerms pcd_loss_terms(const LogitBatch& batch, const PcdConfig& cfg,
                               std::vector<GroupTrace>* trace = nullptr) {
  batch.validate();
  if (!cfg.use_f2cl && !cfg.use_c2fl) {
    throw ConfigError("progressive distillation needs use_f2cl or use_c2fl");
  }
  const std::size_t classes = batch.num_classes();
  const RankSequence ranks = cfg.use_ldr ? rank_logit_difference(batch)
                                         : RankSequence::natural(batch.batch_size(), classes);
  PcdTerms terms;
  terms.ce = cross_entropy(batch.student, batch.labels);
  Tensor distill;
  if (cfg.use_f2cl) {
    terms.f2cl = direction_loss(
        batch, build_schedule(ranks, classes, cfg.stages, Direction::fine_to_coarse), cfg,
        trace);
    distill = terms.f2cl;
  }
  if (cfg.use_c2fl) {
    terms.c2fl = direction_loss(
        batch, build_schedule(ranks, classes, cfg.stages, Direction::coarse_to_fine), cfg,
        trace);
    distill = distill ? add(distill, terms.c2fl) : terms.c2fl;
  }
  terms.total = add(terms.ce, scale(distill, cfg.alpha));
  return terms;
}

inline Tensor pcd_loss(const LogitBatch& batch, const PcdConfig& cfg) {
  return pcd_loss_terms(batch, cfg).total;
}

// Training objective selected by cfg.method.
inline Tensor objective(const LogitBatch& batch, const PcdConfig& cfg) {
  switch (cfg.method) {
    case Method::ce:
      batch.validate();
      return cross_entropy(batch.student, batch.labels);
    case Method::kd:
      return vanilla_kd_loss(batch, cfg.tau, cfg.kd_alpha_ce, cfg.kd_beta);
    case Method::pcd:
      return pcd_loss(batch, cfg);
  }
  throw ContractError("unknown method");
}

}  // namespace pcd
