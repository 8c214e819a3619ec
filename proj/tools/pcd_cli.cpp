// pcd: data generation, training, distillation, experiment grids and exports.
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pcd/data.hpp"
#include "pcd/distill.hpp"
#include "pcd/errors.hpp"
#include "pcd/experiment.hpp"
#include "pcd/export.hpp"
#include "pcd/models.hpp"
#include "pcd/trainer.hpp"

namespace fs = std::filesystem;
using namespace pcd;

namespace {

struct DataArgs {
  fs::path path;
  std::size_t classes = 20;
};

void add_data_args(CLI::App* cmd, DataArgs& a) {
  cmd->add_option("--data", a.path, "CSV dataset (label,f1,...,fD)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--classes", a.classes, "Number of classes C")->capture_default_str();
}

void add_train_args(CLI::App* cmd, TrainConfig& t) {
  cmd->add_option("--epochs", t.epochs)->capture_default_str();
  cmd->add_option("--lr", t.base_lr, "Base learning rate")->capture_default_str();
  cmd->add_option("--momentum", t.momentum)->capture_default_str();
  cmd->add_option("--weight-decay", t.weight_decay)->capture_default_str();
  cmd->add_option("--decay-epochs", t.lr_decay_epochs, "Comma-separated decay epochs")
      ->delimiter(',')
      ->capture_default_str();
  cmd->add_option("--decay-factor", t.lr_decay_factor)->capture_default_str();
  cmd->add_option("--warmup", t.warmup_epochs, "Warm-up epochs")->capture_default_str();
  cmd->add_option("--batch", t.batch_size)->capture_default_str();
  cmd->add_option("--seed", t.seed, "Shuffle seed")->capture_default_str();
}

Dataset load(const DataArgs& a) { return load_csv_dataset(a.path, a.classes); }

void write_report(const std::optional<fs::path>& path, const TrainReport& r) {
  if (path) write_json_file(*path, to_json(r));
}

void print_table(const ResultsTable& t) { std::cout << format_table(t); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive class-level distillation toolkit"};
  app.require_subcommand(1);

  // gen-data
  SyntheticSpec synth;
  fs::path gen_out;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic Gaussian-cluster dataset as CSV");
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--classes", synth.num_classes)->capture_default_str();
  gen->add_option("--dim", synth.dim)->capture_default_str();
  gen->add_option("--samples-per-class", synth.samples_per_class)->capture_default_str();
  gen->add_option("--scale", synth.class_center_scale, "Radius of the class-center sphere")
      ->capture_default_str();
  gen->add_option("--noise", synth.noise_std)->capture_default_str();
  gen->add_option("--seed", synth.seed)->capture_default_str();

  // train-teacher
  DataArgs teach_data;
  TrainConfig teach_train;
  std::vector<std::size_t> teach_hidden{256, 256};
  std::uint64_t teach_model_seed = 0;
  fs::path teach_out;
  std::optional<fs::path> teach_report;
  auto* teach = app.add_subcommand("train-teacher", "Train a model with cross-entropy");
  add_data_args(teach, teach_data);
  teach->add_option("--hidden", teach_hidden, "Comma-separated hidden widths")
      ->delimiter(',')
      ->capture_default_str();
  teach->add_option("--model-seed", teach_model_seed, "Initialization seed")->capture_default_str();
  add_train_args(teach, teach_train);
  teach->add_option("--out", teach_out, "Checkpoint path")->required();
  teach->add_option("--report", teach_report, "Report JSON path");

  // distill
  DataArgs dist_data;
  TrainConfig dist_train;
  std::vector<std::size_t> dist_hidden{32};
  std::uint64_t dist_model_seed = 0;
  fs::path dist_teacher, dist_out;
  std::optional<fs::path> dist_report;
  std::string dist_method = "pcd";
  PcdConfig loss;
  bool no_ldr = false, no_f2cl = false, no_c2fl = false, no_wdm = false;
  auto* dist = app.add_subcommand("distill", "Train a student against a frozen teacher");
  add_data_args(dist, dist_data);
  dist->add_option("--teacher", dist_teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  dist->add_option("--hidden", dist_hidden, "Comma-separated hidden widths")
      ->delimiter(',')
      ->capture_default_str();
  dist->add_option("--model-seed", dist_model_seed, "Initialization seed")->capture_default_str();
  add_train_args(dist, dist_train);
  dist->add_option("--method", dist_method, "ce, kd or pcd")->capture_default_str();
  dist->add_option("--tau", loss.tau, "Temperature")->capture_default_str();
  dist->add_option("--alpha", loss.alpha, "Weight of the progressive terms")->capture_default_str();
  dist->add_option("--stages", loss.stages, "Stage count S")->capture_default_str();
  dist->add_flag("--no-ldr", no_ldr, "Keep natural class order instead of ranking");
  dist->add_flag("--no-f2cl", no_f2cl, "Drop the fine-to-coarse direction");
  dist->add_flag("--no-c2fl", no_c2fl, "Drop the coarse-to-fine direction");
  dist->add_flag("--no-wdm", no_wdm, "Use unit group weights");
  dist->add_option("--kd-alpha-ce", loss.kd_alpha_ce, "KD cross-entropy weight")->capture_default_str();
  dist->add_option("--kd-beta", loss.kd_beta, "KD distillation weight")->capture_default_str();
  dist->add_option("--out", dist_out, "Checkpoint path")->required();
  dist->add_option("--report", dist_report, "Report JSON path");

  // run / report
  fs::path run_config;
  std::optional<fs::path> run_out;
  std::size_t run_jobs = 1;
  bool run_quiet = false;
  auto* run = app.add_subcommand("run", "Run every phase of an experiment config");
  run->add_option("--config", run_config)->required()->check(CLI::ExistingFile);
  run->add_option("--out", run_out, "Override output_dir");
  run->add_option("--jobs", run_jobs, "Seeds trained concurrently")->capture_default_str();
  run->add_flag("--quiet", run_quiet, "No progress log");

  fs::path rep_config;
  std::optional<fs::path> rep_out;
  auto* rep = app.add_subcommand("report", "Rebuild the results table from finished runs");
  rep->add_option("--config", rep_config)->required()->check(CLI::ExistingFile);
  rep->add_option("--out", rep_out, "Override output_dir");

  // exports
  DataArgs ld_data;
  fs::path ld_teacher, ld_student, ld_out;
  double ld_tau = 4.0;
  std::string ld_split = "test";
  auto* ld = app.add_subcommand("export-logit-diff", "Write the CxC teacher-student probability gap");
  add_data_args(ld, ld_data);
  ld->add_option("--teacher", ld_teacher)->required()->check(CLI::ExistingFile);
  ld->add_option("--student", ld_student)->required()->check(CLI::ExistingFile);
  ld->add_option("--tau", ld_tau)->capture_default_str();
  ld->add_option("--split", ld_split)->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
  ld->add_option("--out", ld_out)->required();

  DataArgs em_data;
  fs::path em_model, em_out;
  auto* em = app.add_subcommand("export-embeddings", "Write label plus last hidden activations");
  add_data_args(em, em_data);
  em->add_option("--model", em_model)->required()->check(CLI::ExistingFile);
  em->add_option("--out", em_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const Dataset ds = gen_synthetic(synth);
      write_csv_dataset(gen_out, ds);
      std::cout << "wrote " << ds.size() << " samples to " << gen_out.string() << '\n';
    } else if (*teach) {
      const Dataset ds = load(teach_data);
      const MlpSpec spec{ds.dim, teach_hidden, teach_data.classes, teach_model_seed};
      auto [model, report] = train_teacher(ds, spec, teach_train, teach_out);
      write_report(teach_report, report);
      std::cout << "teacher top1 " << report.final_top1 << '\n';
    } else if (*dist) {
      loss.method = parse_method(dist_method);
      loss.use_ldr = !no_ldr;
      loss.use_f2cl = !no_f2cl;
      loss.use_c2fl = !no_c2fl;
      loss.use_wdm = !no_wdm;
      const Dataset ds = load(dist_data);
      const ModelParams teacher = checkpoint::read(dist_teacher);
      const MlpSpec spec{ds.dim, dist_hidden, dist_data.classes, dist_model_seed};
      auto [model, report] = distill_student(ds, teacher, spec, dist_train, loss, dist_out);
      write_report(dist_report, report);
      std::cout << report.label << " student top1 " << report.final_top1 << '\n';
    } else if (*run || *rep) {
      ExperimentConfig cfg = load_experiment_config(*run ? run_config : rep_config);
      const auto& out = *run ? run_out : rep_out;
      if (out) cfg.output_dir = *out;
      RunOptions opt;
      opt.train = static_cast<bool>(*run);
      opt.jobs = run_jobs;
      opt.log = (*run && !run_quiet) ? &std::cerr : nullptr;
      print_table(run_experiment(cfg, opt));
    } else if (*ld) {
      const Dataset ds = load(ld_data);
      const ModelParams t = checkpoint::read(ld_teacher);
      const ModelParams s = checkpoint::read(ld_student);
      const auto all = ds.all_indices();
      const std::span<const std::size_t> split =
          ld_split == "train" ? std::span<const std::size_t>(ds.train_idx)
          : ld_split == "test" ? std::span<const std::size_t>(ds.test_idx)
                               : std::span<const std::size_t>(all);
      const auto m = logit_diff_matrix(t, s, ds, split, ld_tau);
      write_matrix_csv(ld_out, m, ds.num_classes);
      std::cout << "frobenius norm " << frobenius_norm(m) << '\n';
    } else if (*em) {
      const Dataset ds = load(em_data);
      export_embeddings(em_out, checkpoint::read(em_model), ds);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
