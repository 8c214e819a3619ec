#pragma once

// Config-driven experiment runner: dataset, per-seed teacher, one student per
// method row, and an aggregated results table. Every artifact lives under
// output_dir; finished runs are detected by their report files and reused.

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "pcd/data.hpp"
#include "pcd/distill.hpp"
#include "pcd/errors.hpp"
#include "pcd/export.hpp"
#include "pcd/models.hpp"
#include "pcd/trainer.hpp"

namespace pcd {

using json = nlohmann::json;

inline constexpr int kConfigVersion = 1;

struct ExperimentConfig {
  std::filesystem::path output_dir = "runs/default";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::string> suites{"baseline"};

  std::string data_source = "synthetic";  // or "csv"
  std::filesystem::path data_csv_path;
  SyntheticSpec synthetic;

  std::vector<std::size_t> teacher_hidden{256, 256};
  std::vector<std::size_t> student_hidden{32};
  TrainConfig teacher_train;
  TrainConfig student_train;
  PcdConfig pcd;

  std::vector<std::size_t> sweep_stages{3, 4, 5};
  std::vector<double> sweep_alpha{0.1, 0.2, 0.5, 1.0, 2.0, 3.0};

  std::size_t num_classes() const { return synthetic.num_classes; }

  void validate() const {
    if (seeds.empty()) throw ConfigError("seeds: must list at least one seed");
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        if (seeds[i] == seeds[j]) throw ConfigError("seeds: duplicate seed " + std::to_string(seeds[i]));
      }
    }
    if (suites.empty()) throw ConfigError("suites: must list at least one suite");
    for (const auto& s : suites) {
      if (s != "baseline" && s != "ablation" && s != "stages" && s != "alpha") {
        throw ConfigError("suites: unknown suite '" + s +
                          "' (expected baseline, ablation, stages or alpha)");
      }
    }
    if (data_source == "synthetic") {
      synthetic.validate();
    } else if (data_source == "csv") {
      if (data_csv_path.empty()) throw ConfigError("data.csv_path: required when data.source is csv");
      if (!std::filesystem::exists(data_csv_path)) {
        throw ConfigError("data.csv_path: file not found: " + data_csv_path.string());
      }
      if (synthetic.num_classes < 2) throw ConfigError("data.num_classes: must be >= 2");
    } else {
      throw ConfigError("data.source: expected 'synthetic' or 'csv', got '" + data_source + "'");
    }
    for (std::size_t w : teacher_hidden) {
      if (w < 1) throw ConfigError("teacher.hidden: widths must be >= 1");
    }
    for (std::size_t w : student_hidden) {
      if (w < 1) throw ConfigError("student.hidden: widths must be >= 1");
    }
    try {
      teacher_train.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("teacher_train: ") + e.what());
    }
    try {
      student_train.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("student_train: ") + e.what());
    }
    try {
      pcd.validate(num_classes());
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("pcd: ") + e.what());
    }
    for (std::size_t s : sweep_stages) {
      if (s < 1 || s > num_classes()) {
        throw ConfigError("sweep.stages: " + std::to_string(s) + " outside [1, " +
                          std::to_string(num_classes()) + "]");
      }
    }
    for (double a : sweep_alpha) {
      if (!(a >= 0.0)) throw ConfigError("sweep.alpha: values must be >= 0");
    }
  }
};

namespace detail {

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
void read_value(const json& j, T& out, const std::string& key) {
  auto fail = [&](const char* expected) {
    throw ConfigError("config key '" + key + "': expected " + expected + ", got " + j.dump());
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) fail("a boolean");
    out = j.get<bool>();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<long long>() < 0)) {
      fail("a non-negative integer");
    }
    out = j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) fail("a number");
    out = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) fail("a string");
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    if (!j.is_string()) fail("a string");
    out = j.get<std::string>();
  } else if constexpr (is_vector<T>::value) {
    if (!j.is_array()) fail("an array");
    T values(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) read_value(j[i], values[i], key);
    out = std::move(values);
  } else {
    static_assert(is_vector<T>::value, "unsupported config field type");
  }
}

template <class T>
json write_value(const T& v) {
  if constexpr (std::is_same_v<T, std::filesystem::path>) {
    return v.string();
  } else {
    return json(v);
  }
}

struct Field {
  std::string key;
  std::function<void(const json&)> read;
  std::function<json()> write;
};

template <class T>
Field field(std::string key, T& ref) {
  return {key, [&ref, key](const json& j) { read_value(j, ref, key); },
          [&ref] { return write_value(ref); }};
}

inline void add_train_fields(std::vector<Field>& f, const std::string& prefix, TrainConfig& t) {
  f.push_back(field(prefix + ".epochs", t.epochs));
  f.push_back(field(prefix + ".base_lr", t.base_lr));
  f.push_back(field(prefix + ".momentum", t.momentum));
  f.push_back(field(prefix + ".weight_decay", t.weight_decay));
  f.push_back(field(prefix + ".lr_decay_epochs", t.lr_decay_epochs));
  f.push_back(field(prefix + ".lr_decay_factor", t.lr_decay_factor));
  f.push_back(field(prefix + ".warmup_epochs", t.warmup_epochs));
  f.push_back(field(prefix + ".batch_size", t.batch_size));
}

// The complete key schema; see README for meanings.
inline std::vector<Field> config_fields(ExperimentConfig& c) {
  std::vector<Field> f;
  f.push_back(field("output_dir", c.output_dir));
  f.push_back(field("seeds", c.seeds));
  f.push_back(field("suites", c.suites));
  f.push_back(field("data.source", c.data_source));
  f.push_back(field("data.csv_path", c.data_csv_path));
  f.push_back(field("data.num_classes", c.synthetic.num_classes));
  f.push_back(field("data.dim", c.synthetic.dim));
  f.push_back(field("data.samples_per_class", c.synthetic.samples_per_class));
  f.push_back(field("data.center_scale", c.synthetic.class_center_scale));
  f.push_back(field("data.noise_std", c.synthetic.noise_std));
  f.push_back(field("data.seed", c.synthetic.seed));
  f.push_back(field("teacher.hidden", c.teacher_hidden));
  f.push_back(field("student.hidden", c.student_hidden));
  add_train_fields(f, "teacher_train", c.teacher_train);
  add_train_fields(f, "student_train", c.student_train);
  f.push_back(field("pcd.tau", c.pcd.tau));
  f.push_back(field("pcd.alpha", c.pcd.alpha));
  f.push_back(field("pcd.stages", c.pcd.stages));
  f.push_back(field("pcd.ldr", c.pcd.use_ldr));
  f.push_back(field("pcd.f2cl", c.pcd.use_f2cl));
  f.push_back(field("pcd.c2fl", c.pcd.use_c2fl));
  f.push_back(field("pcd.wdm", c.pcd.use_wdm));
  f.push_back(field("kd.alpha_ce", c.pcd.kd_alpha_ce));
  f.push_back(field("kd.beta", c.pcd.kd_beta));
  f.push_back(field("sweep.stages", c.sweep_stages));
  f.push_back(field("sweep.alpha", c.sweep_alpha));
  return f;
}

}  // namespace detail

// Flat object, dotted keys, "version" required. Missing keys keep defaults;
// unknown keys are rejected.
inline ExperimentConfig parse_experiment_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: top level must be a JSON object");
  if (!doc.contains("version")) throw ConfigError("config key 'version': required");
  if (!doc["version"].is_number_integer() || doc["version"].get<long long>() != kConfigVersion) {
    throw ConfigError("config key 'version': unsupported value " + doc["version"].dump() +
                      " (expected " + std::to_string(kConfigVersion) + ")");
  }
  ExperimentConfig cfg;
  auto fields = detail::config_fields(cfg);
  for (const auto& [key, value] : doc.items()) {
    if (key == "version") continue;
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError("config key '" + key + "': unknown key");
    it->read(value);
  }
  cfg.pcd.method = Method::pcd;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_experiment_config(doc);
}

inline json config_to_json(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  json doc;
  doc["version"] = kConfigVersion;
  for (const auto& f : detail::config_fields(copy)) doc[f.key] = f.write();
  return doc;
}

// ---- serialization of run records ----

inline json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"base_lr", t.base_lr},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"lr_decay_epochs", t.lr_decay_epochs},
          {"lr_decay_factor", t.lr_decay_factor},
          {"warmup_epochs", t.warmup_epochs},
          {"batch_size", t.batch_size},
          {"seed", t.seed}};
}

inline json to_json(const PcdConfig& c) {
  return {{"method", std::string(to_string(c.method))},
          {"tau", c.tau},
          {"alpha", c.alpha},
          {"stages", c.stages},
          {"ldr", c.use_ldr},
          {"f2cl", c.use_f2cl},
          {"c2fl", c.use_c2fl},
          {"wdm", c.use_wdm},
          {"kd_alpha_ce", c.kd_alpha_ce},
          {"kd_beta", c.kd_beta}};
}

inline json to_json(const MlpSpec& s) {
  return {{"input_dim", s.input_dim},
          {"hidden", s.hidden},
          {"num_classes", s.num_classes},
          {"seed", s.seed}};
}

inline json to_json(const TrainReport& r) {
  json j{{"label", r.label},
         {"seed", r.seed},
         {"epoch_loss", r.epoch_loss},
         {"epoch_test_top1", r.epoch_test_top1},
         {"final_top1", r.final_top1},
         {"train_top1", r.train_top1},
         {"wall_seconds", r.wall_seconds},
         {"train", to_json(r.train)}};
  if (r.loss) j["loss"] = to_json(*r.loss);
  return j;
}

inline TrainReport report_from_json(const json& j) {
  try {
    TrainReport r;
    r.label = j.at("label").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    r.epoch_test_top1 = j.at("epoch_test_top1").get<std::vector<double>>();
    r.final_top1 = j.at("final_top1").get<double>();
    r.train_top1 = j.at("train_top1").get<double>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    const auto& t = j.at("train");
    r.train.epochs = t.at("epochs").get<std::size_t>();
    r.train.base_lr = t.at("base_lr").get<double>();
    r.train.momentum = t.at("momentum").get<double>();
    r.train.weight_decay = t.at("weight_decay").get<double>();
    r.train.lr_decay_epochs = t.at("lr_decay_epochs").get<std::vector<std::size_t>>();
    r.train.lr_decay_factor = t.at("lr_decay_factor").get<double>();
    r.train.warmup_epochs = t.at("warmup_epochs").get<std::size_t>();
    r.train.batch_size = t.at("batch_size").get<std::size_t>();
    r.train.seed = t.at("seed").get<std::uint64_t>();
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      PcdConfig c;
      c.method = parse_method(l.at("method").get<std::string>());
      c.tau = l.at("tau").get<double>();
      c.alpha = l.at("alpha").get<double>();
      c.stages = l.at("stages").get<std::size_t>();
      c.use_ldr = l.at("ldr").get<bool>();
      c.use_f2cl = l.at("f2cl").get<bool>();
      c.use_c2fl = l.at("c2fl").get<bool>();
      c.use_wdm = l.at("wdm").get<bool>();
      c.kd_alpha_ce = l.at("kd_alpha_ce").get<double>();
      c.kd_beta = l.at("kd_beta").get<double>();
      r.loss = c;
    }
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// Write to a sibling temp file, then rename, so an interrupted run never
// leaves a truncated report that looks complete.
inline void write_json_file(const std::filesystem::path& path, const json& doc) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os << doc.dump(2) << '\n';
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// FNV-1a over labels and feature bit patterns.
inline std::uint64_t dataset_digest(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(ds.dim);
  mix(ds.num_classes);
  for (std::size_t l : ds.labels) mix(l);
  for (double v : ds.features) mix(std::bit_cast<std::uint64_t>(v));
  return h;
}

// ---- method rows ----

struct MethodRow {
  std::string suite;
  std::string label;
  PcdConfig loss;
};

namespace detail {

inline std::string short_number(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

// Directory name identifying everything about a row's objective. Rows with
// equal keys train the same student and share one run.
inline std::string row_key(const PcdConfig& c) {
  using detail::short_number;
  switch (c.method) {
    case Method::ce:
      return "ce";
    case Method::kd:
      return "kd_t" + short_number(c.tau) + "_ce" + short_number(c.kd_alpha_ce) + "_b" +
             short_number(c.kd_beta);
    case Method::pcd:
      break;
  }
  return "pcd_t" + short_number(c.tau) + "_a" + short_number(c.alpha) + "_s" +
         std::to_string(c.stages) + "_l" + std::to_string(c.use_ldr) + "f" +
         std::to_string(c.use_f2cl) + "c" + std::to_string(c.use_c2fl) + "w" +
         std::to_string(c.use_wdm);
}

inline std::vector<MethodRow> plan_rows(const ExperimentConfig& cfg) {
  std::vector<MethodRow> rows;
  PcdConfig ce = cfg.pcd;
  ce.method = Method::ce;
  PcdConfig kd = cfg.pcd;
  kd.method = Method::kd;
  for (const auto& suite : cfg.suites) {
    if (suite == "baseline") {
      rows.push_back({suite, "student", ce});
      rows.push_back({suite, "kd", kd});
      rows.push_back({suite, "pcd", cfg.pcd});
    } else if (suite == "ablation") {
      // LDR / F2CL / C2FL grid. Without a direction the objective is plain KD.
      const bool grid[8][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                               {1, 1, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
      for (const auto& g : grid) {
        PcdConfig c = cfg.pcd;
        c.use_ldr = g[0];
        c.use_f2cl = g[1];
        c.use_c2fl = g[2];
        c.use_wdm = true;
        if (!c.use_f2cl && !c.use_c2fl) c.method = Method::kd;
        std::string label = std::string("LDR=") + (g[0] ? "1" : "0") + " F2CL=" +
                            (g[1] ? "1" : "0") + " C2FL=" + (g[2] ? "1" : "0");
        rows.push_back({suite, label, c});
      }
      PcdConfig off = cfg.pcd;
      off.use_ldr = off.use_f2cl = off.use_c2fl = true;
      off.use_wdm = false;
      rows.push_back({suite, "w/o WDM", off});
      off.use_wdm = true;
      rows.push_back({suite, "w/ WDM", off});
    } else if (suite == "stages") {
      for (std::size_t s : cfg.sweep_stages) {
        PcdConfig c = cfg.pcd;
        c.stages = s;
        rows.push_back({suite, "S=" + std::to_string(s), c});
      }
    } else if (suite == "alpha") {
      for (double a : cfg.sweep_alpha) {
        PcdConfig c = cfg.pcd;
        c.alpha = a;
        rows.push_back({suite, "alpha=" + detail::short_number(a), c});
      }
    }
  }
  return rows;
}

// ---- results ----

struct ResultRow {
  std::string suite;
  std::string label;
  std::string method;  // teacher, ce, kd or pcd
  std::optional<PcdConfig> loss;
  std::vector<double> top1;  // one per seed, in config order
  double mean = 0.0;
  double stddev = 0.0;
};

struct Claims {
  double teacher_mean = 0.0;
  double student_mean = 0.0;
  double kd_mean = 0.0;
  double pcd_mean = 0.0;
  double kd_logit_gap_norm = 0.0;   // mean Frobenius norm of the test-split gap matrix
  double pcd_logit_gap_norm = 0.0;
  bool pcd_beats_kd = false;
};

struct ResultsTable {
  std::vector<std::uint64_t> seeds;
  std::vector<ResultRow> rows;
  std::optional<Claims> claims;

  const ResultRow* find(std::string_view suite, std::string_view label) const {
    for (const auto& r : rows) {
      if (r.suite == suite && r.label == label) return &r;
    }
    return nullptr;
  }
};

inline void summarize(ResultRow& row) {
  const double n = static_cast<double>(row.top1.size());
  row.mean = 0.0;
  for (double v : row.top1) row.mean += v;
  row.mean /= n;
  double sq = 0.0;
  for (double v : row.top1) sq += (v - row.mean) * (v - row.mean);
  row.stddev = row.top1.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
}

inline json to_json(const ResultsTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json j{{"suite", r.suite},     {"label", r.label}, {"method", r.method},
           {"top1", r.top1},       {"mean", r.mean},   {"std", r.stddev}};
    if (r.loss) {
      j["ldr"] = r.loss->use_ldr;
      j["f2cl"] = r.loss->use_f2cl;
      j["c2fl"] = r.loss->use_c2fl;
      j["wdm"] = r.loss->use_wdm;
      j["stages"] = r.loss->stages;
      j["alpha"] = r.loss->alpha;
      j["tau"] = r.loss->tau;
    }
    rows.push_back(j);
  }
  json doc{{"seeds", t.seeds}, {"rows", rows}};
  if (t.claims) {
    const Claims& c = *t.claims;
    doc["claims"] = {{"teacher_mean", c.teacher_mean},
                     {"student_mean", c.student_mean},
                     {"kd_mean", c.kd_mean},
                     {"pcd_mean", c.pcd_mean},
                     {"teacher_minus_student", c.teacher_mean - c.student_mean},
                     {"kd_minus_student", c.kd_mean - c.student_mean},
                     {"pcd_minus_kd", c.pcd_mean - c.kd_mean},
                     {"pcd_beats_kd", c.pcd_beats_kd},
                     {"kd_logit_gap_norm", c.kd_logit_gap_norm},
                     {"pcd_logit_gap_norm", c.pcd_logit_gap_norm}};
  }
  return doc;
}

inline std::string format_table(const ResultsTable& t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "seeds:";
  for (auto s : t.seeds) os << ' ' << s;
  os << "\n\n";
  os << std::left << std::setw(10) << "suite" << std::setw(22) << "row" << std::setw(9)
     << "method" << std::setw(5) << "LDR" << std::setw(6) << "F2CL" << std::setw(6) << "C2FL"
     << std::setw(5) << "WDM" << std::setw(4) << "S" << std::setw(7) << "alpha" << std::right
     << std::setw(7) << "mean" << std::setw(7) << "std" << "  per-seed\n";
  for (const auto& r : t.rows) {
    auto flag = [&](bool on) { return std::string(on ? "x" : "."); };
    os << std::left << std::setw(10) << r.suite << std::setw(22) << r.label << std::setw(9)
       << r.method;
    if (r.loss && r.method == "pcd") {
      os << std::setw(5) << flag(r.loss->use_ldr) << std::setw(6) << flag(r.loss->use_f2cl)
         << std::setw(6) << flag(r.loss->use_c2fl) << std::setw(5) << flag(r.loss->use_wdm)
         << std::setw(4) << r.loss->stages << std::setw(7) << detail::short_number(r.loss->alpha);
    } else {
      os << std::setw(5) << "-" << std::setw(6) << "-" << std::setw(6) << "-" << std::setw(5)
         << "-" << std::setw(4) << "-" << std::setw(7) << "-";
    }
    os << std::right << std::setw(7) << r.mean << std::setw(7) << r.stddev << " ";
    for (double v : r.top1) os << ' ' << v;
    os << '\n';
  }
  if (t.claims) {
    const Claims& c = *t.claims;
    os << "\nteacher - student : " << std::showpos << c.teacher_mean - c.student_mean << '\n'
       << "kd - student      : " << c.kd_mean - c.student_mean << '\n'
       << "pcd - kd          : " << c.pcd_mean - c.kd_mean << std::noshowpos << '\n'
       << "pcd > kd          : " << (c.pcd_beats_kd ? "yes" : "no") << '\n'
       << std::setprecision(4) << "logit gap norm    : kd " << c.kd_logit_gap_norm << ", pcd "
       << c.pcd_logit_gap_norm << '\n';
  }
  return os.str();
}

// ---- runner ----

struct RunOptions {
  bool train = true;           // false: only aggregate existing reports
  std::size_t jobs = 1;        // seeds processed concurrently
  std::ostream* log = nullptr;
};

struct SeedPlan {
  MlpSpec teacher;
  TrainConfig teacher_train;
  MlpSpec student;
  TrainConfig student_train;
};

// Stream seeds for one run seed. Every student row of a seed starts from the
// same initialization and batch order.
inline SeedPlan seed_plan(const ExperimentConfig& cfg, const Dataset& ds, std::uint64_t seed) {
  SeedPlan p;
  p.teacher = {ds.dim, cfg.teacher_hidden, ds.num_classes, mix_seed(seed, 1)};
  p.teacher_train = cfg.teacher_train;
  p.teacher_train.seed = mix_seed(seed, 2);
  p.student = {ds.dim, cfg.student_hidden, ds.num_classes, mix_seed(seed, 3)};
  p.student_train = cfg.student_train;
  p.student_train.seed = mix_seed(seed, 4);
  return p;
}

inline Dataset load_experiment_data(const ExperimentConfig& cfg) {
  if (cfg.data_source == "csv") return load_csv_dataset(cfg.data_csv_path, cfg.num_classes());
  return gen_synthetic(cfg.synthetic);
}

namespace detail {

inline std::string digest_hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

class Logger {
 public:
  explicit Logger(std::ostream* os) : os_(os) {}
  void operator()(const std::string& line) {
    if (!os_) return;
    std::lock_guard<std::mutex> lock(mu_);
    *os_ << line << std::endl;
  }

 private:
  std::ostream* os_;
  std::mutex mu_;
};

// Returns the stored report when it was produced under `fingerprint` and its
// checkpoint exists; otherwise runs `train` and records the new report.
template <class TrainFn>
TrainReport cached_run(const std::filesystem::path& dir, const json& fingerprint, bool allow_train,
                       TrainFn&& train) {
  const auto report_path = dir / "report.json";
  const auto ckpt_path = dir / "model.ckpt";
  if (std::filesystem::exists(report_path) && std::filesystem::exists(ckpt_path)) {
    const json doc = read_json_file(report_path);
    if (doc.contains("fingerprint") && doc["fingerprint"] == fingerprint) {
      return report_from_json(doc.at("report"));
    }
  }
  if (!allow_train) throw IoError("no finished run in " + dir.string());
  std::filesystem::create_directories(dir);
  TrainReport report = train(ckpt_path);
  write_json_file(report_path, {{"fingerprint", fingerprint}, {"report", to_json(report)}});
  return report;
}

}  // namespace detail

struct SeedOutcome {
  TrainReport teacher;
  std::map<std::string, TrainReport> students;  // by row key
  std::optional<double> kd_gap_norm;
  std::optional<double> pcd_gap_norm;
};

inline SeedOutcome run_seed(const ExperimentConfig& cfg, const Dataset& ds,
                            const std::vector<MethodRow>& rows, std::uint64_t seed,
                            const RunOptions& opt, detail::Logger& log) {
  const SeedPlan plan = seed_plan(cfg, ds, seed);
  const auto seed_dir = cfg.output_dir / ("seed_" + std::to_string(seed));
  const std::string data_id = detail::digest_hex(dataset_digest(ds));
  SeedOutcome out;

  const json teacher_fp{{"data", data_id},
                        {"model", to_json(plan.teacher)},
                        {"train", to_json(plan.teacher_train)}};
  out.teacher = detail::cached_run(seed_dir / "teacher", teacher_fp, opt.train, [&](const auto& ckpt) {
    log("seed " + std::to_string(seed) + ": training teacher");
    return train_teacher(ds, plan.teacher, plan.teacher_train, ckpt).second;
  });
  log("seed " + std::to_string(seed) + ": teacher top1 " + detail::short_number(out.teacher.final_top1));

  std::optional<ModelParams> teacher;
  for (const auto& row : rows) {
    const std::string key = row_key(row.loss);
    if (out.students.count(key)) continue;
    const json fp{{"teacher", teacher_fp},
                  {"model", to_json(plan.student)},
                  {"train", to_json(plan.student_train)},
                  {"loss", to_json(row.loss)}};
    out.students[key] = detail::cached_run(seed_dir / key, fp, opt.train, [&](const auto& ckpt) {
      if (!teacher) teacher = checkpoint::read(seed_dir / "teacher" / "model.ckpt");
      log("seed " + std::to_string(seed) + ": training " + key);
      return distill_student(ds, *teacher, plan.student, plan.student_train, row.loss, ckpt).second;
    });
    log("seed " + std::to_string(seed) + ": " + key + " top1 " +
        detail::short_number(out.students[key].final_top1));
  }

  // Gap matrices for the baseline KD / PCD students, also written as CSV.
  const bool has_baseline = std::ranges::find(cfg.suites, "baseline") != cfg.suites.end();
  if (has_baseline) {
    const ModelParams t = checkpoint::read(seed_dir / "teacher" / "model.ckpt");
    for (const auto& row : rows) {
      if (row.suite != "baseline" || row.label == "student") continue;
      const auto dir = seed_dir / row_key(row.loss);
      const ModelParams s = checkpoint::read(dir / "model.ckpt");
      const auto m = logit_diff_matrix(t, s, ds, ds.test_idx, cfg.pcd.tau);
      if (opt.train) write_matrix_csv(dir / "logit_diff.csv", m, ds.num_classes);
      (row.label == "kd" ? out.kd_gap_norm : out.pcd_gap_norm) = frobenius_norm(m);
    }
  }
  return out;
}

// Runs (or, with opt.train == false, only collects) every seed and row, then
// writes results.json and results.txt into output_dir.
inline ResultsTable run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  detail::Logger log(opt.log);
  const Dataset ds = load_experiment_data(cfg);
  if (ds.num_classes != cfg.num_classes()) throw ConfigError("data.num_classes: mismatch");
  const auto rows = plan_rows(cfg);
  std::filesystem::create_directories(cfg.output_dir);
  if (opt.train) {
    write_json_file(cfg.output_dir / "config.json", config_to_json(cfg));
    const auto data_path = cfg.output_dir / "data.csv";
    if (cfg.data_source == "synthetic" && !std::filesystem::exists(data_path)) {
      write_csv_dataset(data_path, ds);
    }
  }

  std::vector<SeedOutcome> outcomes(cfg.seeds.size());
  std::vector<std::exception_ptr> errors(cfg.seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfg.seeds.size(); i = next++) {
      try {
        outcomes[i] = run_seed(cfg, ds, rows, cfg.seeds[i], opt, log);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(opt.jobs, 1, cfg.seeds.size());
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  ResultsTable table;
  table.seeds = cfg.seeds;
  if (std::ranges::find(cfg.suites, "baseline") != cfg.suites.end()) {
    ResultRow t{"baseline", "teacher", "teacher", std::nullopt, {}, 0, 0};
    for (const auto& o : outcomes) t.top1.push_back(o.teacher.final_top1);
    summarize(t);
    table.rows.push_back(t);
  }
  for (const auto& row : rows) {
    ResultRow r{row.suite, row.label, std::string(to_string(row.loss.method)), row.loss, {}, 0, 0};
    for (const auto& o : outcomes) r.top1.push_back(o.students.at(row_key(row.loss)).final_top1);
    summarize(r);
    table.rows.push_back(r);
  }
  if (const auto* kd = table.find("baseline", "kd")) {
    Claims c;
    c.teacher_mean = table.find("baseline", "teacher")->mean;
    c.student_mean = table.find("baseline", "student")->mean;
    c.kd_mean = kd->mean;
    c.pcd_mean = table.find("baseline", "pcd")->mean;
    c.pcd_beats_kd = c.pcd_mean > c.kd_mean;
    for (const auto& o : outcomes) {
      c.kd_logit_gap_norm += o.kd_gap_norm.value_or(0.0);
      c.pcd_logit_gap_norm += o.pcd_gap_norm.value_or(0.0);
    }
    c.kd_logit_gap_norm /= static_cast<double>(outcomes.size());
    c.pcd_logit_gap_norm /= static_cast<double>(outcomes.size());
    table.claims = c;
  }
  write_json_file(cfg.output_dir / "results.json", to_json(table));
  {
    std::ofstream os(cfg.output_dir / "results.txt", std::ios::trunc);
    os << format_table(table);
    if (!os) throw IoError("failed writing results.txt");
  }
  return table;
}

}  // namespace pcd
