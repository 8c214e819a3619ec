#pragma once

// SGD-with-momentum training loops: CE pretraining of the teacher and
// distillation of a student against a frozen teacher.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcd/data.hpp"
#include "pcd/distill.hpp"
#include "pcd/errors.hpp"
#include "pcd/models.hpp"
#include "pcd/tensor.hpp"

namespace pcd {

struct TrainConfig {
  std::size_t epochs = 60;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> lr_decay_epochs{30, 45};
  double lr_decay_factor = 0.1;
  std::size_t warmup_epochs = 5;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be < epochs");
    for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
      if (lr_decay_epochs[i] >= epochs) {
        throw ConfigError("lr_decay_epochs entries must be < epochs");
      }
      if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
        throw ConfigError("lr_decay_epochs must be strictly increasing");
      }
    }
  }
};

// Linear warm-up from 0 over warmup_epochs (per step), then base_lr scaled
// by lr_decay_factor once for every decay epoch already reached.
inline double lr_at(std::size_t epoch, std::size_t step_in_epoch, std::size_t steps_per_epoch,
                    const TrainConfig& cfg) {
  if (epoch < cfg.warmup_epochs) {
    const double done = static_cast<double>(epoch * steps_per_epoch + step_in_epoch);
    return cfg.base_lr * done / static_cast<double>(cfg.warmup_epochs * steps_per_epoch);
  }
  double lr = cfg.base_lr;
  for (std::size_t d : cfg.lr_decay_epochs) {
    if (epoch >= d) lr *= cfg.lr_decay_factor;
  }
  return lr;
}

// splitmix64 finalizer; derives independent stream seeds from one base seed.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  // v = m v + (g + wd w);  w -= lr v
  void step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + (g[i] + weight_decay_ * w[i]);
        w[i] -= lr * v[i];
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

struct TrainReport {
  std::string label;
  std::uint64_t seed = 0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_test_top1;
  double final_top1 = 0.0;
  double train_top1 = 0.0;
  double wall_seconds = 0.0;
  TrainConfig train;
  std::optional<PcdConfig> loss;
};

// Percentage of rows whose argmax logit (lowest index on ties) equals the label.
inline double evaluate_top1(const ModelParams& params, const Dataset& ds,
                            std::span<const std::size_t> split) {
  if (split.empty()) throw DataError("evaluate_top1: empty split");
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < split.size(); begin += kChunk) {
    auto idx = split.subspan(begin, std::min(kChunk, split.size() - begin));
    const Tensor logits = forward_logits(params, ds.gather_features(idx)).detach();
    const std::size_t classes = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      }
      if (best == ds.labels[idx[r]]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(split.size());
}

namespace detail {

inline void check_model_matches(const MlpSpec& spec, const Dataset& ds, const char* who) {
  if (spec.input_dim != ds.dim || spec.num_classes != ds.num_classes) {
    throw ConfigError(std::string(who) + " expects input_dim " + std::to_string(spec.input_dim) +
                      " and " + std::to_string(spec.num_classes) + " classes; dataset has " +
                      std::to_string(ds.dim) + " and " + std::to_string(ds.num_classes));
  }
}

// Shared epoch loop. `loss_fn(logits, batch_indices)` returns the scalar loss.
template <class LossFn>
TrainReport fit(ModelParams& model, const Dataset& ds, const TrainConfig& cfg, LossFn&& loss_fn) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  SgdMomentum opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  TrainReport report;
  report.seed = cfg.seed;
  report.train = cfg;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = batch_iter(ds.train_idx, cfg.batch_size, mix_seed(cfg.seed, epoch));
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < batches.size(); ++step) {
      const auto& idx = batches[step];
      const Tensor logits = forward_logits(model, ds.gather_features(idx));
      const Tensor loss = loss_fn(logits, idx);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step));
      }
      loss_sum += value * static_cast<double>(idx.size());
      opt.zero_grad();
      loss.backward();
      opt.step(lr_at(epoch, step, batches.size(), cfg));
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(ds.train_idx.size()));
    report.epoch_test_top1.push_back(evaluate_top1(model, ds, ds.test_idx));
  }
  report.final_top1 = report.epoch_test_top1.back();
  report.train_top1 = evaluate_top1(model, ds, ds.train_idx);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace detail

// CE training from a fresh He-initialized model.
inline std::pair<ModelParams, TrainReport> train_teacher(
    const Dataset& ds, const MlpSpec& spec, const TrainConfig& cfg,
    const std::optional<std::filesystem::path>& checkpoint_path = std::nullopt) {
  detail::check_model_matches(spec, ds, "teacher");
  ModelParams model = init_mlp(spec);
  TrainReport report =
      detail::fit(model, ds, cfg, [&ds](const Tensor& logits, const std::vector<std::size_t>& idx) {
        return cross_entropy(logits, ds.gather_labels(idx));
      });
  report.label = "teacher";
  if (checkpoint_path) checkpoint::write(*checkpoint_path, model);
  return {std::move(model), std::move(report)};
}

// Trains a fresh student against the frozen teacher with the objective
// selected by loss_cfg.method.
inline std::pair<ModelParams, TrainReport> distill_student(
    const Dataset& ds, const ModelParams& teacher, const MlpSpec& student_spec,
    const TrainConfig& cfg, const PcdConfig& loss_cfg,
    const std::optional<std::filesystem::path>& checkpoint_path = std::nullopt) {
  detail::check_model_matches(teacher.spec, ds, "teacher");
  detail::check_model_matches(student_spec, ds, "student");
  loss_cfg.validate(ds.num_classes);
  const std::size_t classes = ds.num_classes;
  // Teacher logits for every sample, computed once and held constant.
  const std::vector<double> teacher_logits = [&] {
    const auto all = ds.all_indices();
    const Tensor t = forward_logits(teacher, ds.gather_features(all)).detach();
    return std::vector<double>(t.data().begin(), t.data().end());
  }();
  ModelParams model = init_mlp(student_spec);
  TrainReport report = detail::fit(
      model, ds, cfg, [&](const Tensor& logits, const std::vector<std::size_t>& idx) {
        std::vector<double> rows;
        rows.reserve(idx.size() * classes);
        for (std::size_t i : idx) {
          rows.insert(rows.end(), teacher_logits.begin() + static_cast<std::ptrdiff_t>(i * classes),
                      teacher_logits.begin() + static_cast<std::ptrdiff_t>((i + 1) * classes));
        }
        LogitBatch batch{Tensor::from({idx.size(), classes}, std::move(rows)), logits,
                         ds.gather_labels(idx)};
        return objective(batch, loss_cfg);
      });
  report.label = std::string(to_string(loss_cfg.method));
  report.loss = loss_cfg;
  if (checkpoint_path) checkpoint::write(*checkpoint_path, model);
  return {std::move(model), std::move(report)};
}

}  // namespace pcd
