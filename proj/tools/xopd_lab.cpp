// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// xopd-lab: dataset generation, training, evaluation and the full
// trend-reproduction pipeline behind one command.
//
// Exit codes: 0 success, 1 runtime or training failure, 2 usage or config error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/errors.hpp"
#include "xopd/eval.hpp"
#include "xopd/params.hpp"
#include "xopd/pipeline.hpp"
#include "xopd/trainer.hpp"

namespace fs = std::filesystem;
using namespace xopd;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// A missing input file or directory; reported with exit code 2.
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
};

fs::path default_out_root() {
  if (const char* env = std::getenv("XOPD_LAB_OUT"); env && *env) return env;
  return "xopd-runs";
}

nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingInput("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + p.string() + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ReportError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

// key=value with a dotted key; the value is parsed as JSON when possible and
// kept as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + kv + "' is not key=value");
  std::string ptr = "/" + kv.substr(0, eq);
  for (auto& c : ptr) {
    if (c == '.') c = '/';
  }
  const std::string raw = kv.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  const nlohmann::json::json_pointer p(ptr);
  if (!j.contains(p.parent_pointer())) throw ConfigError("override '" + kv + "' names an unknown section");
  j[p] = value;
}

// Defaults, then the config file, then overrides, then flags.
PipelineConfig resolve_config(const Common& c) {
  nlohmann::json j = PipelineConfig::defaults();
  if (!c.config_path.empty()) j.merge_patch(read_json_file(c.config_path));
  for (const auto& kv : c.overrides) apply_override(j, kv);
  PipelineConfig cfg;
  try {
    cfg = j.get<PipelineConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad configuration: ") + e.what());
  }
  if (c.seed && std::find(cfg.seeds.begin(), cfg.seeds.end(), *c.seed) == cfg.seeds.end()) {
    cfg.seeds.push_back(*c.seed);
  }
  if (c.workers) {
    cfg.workers = *c.workers;
    cfg.train.workers = *c.workers;
  }
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c, const std::string& leaf) {
  return c.out.empty() ? default_out_root() / leaf : fs::path(c.out);
}

std::uint64_t chosen_seed(const Common& c, const PipelineConfig& cfg) {
  return c.seed ? *c.seed : cfg.seeds.front();
}

void write_run_spec(const fs::path& dir, const std::string& sub, const PipelineConfig& cfg,
                    const nlohmann::json& flags) {
  write_json_file(dir / "run_spec.json",
                  {{"subcommand", sub}, {"config", cfg}, {"flags", flags}, {"git_describe", build_describe()}});
}

void require_exists(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingInput(what + " not found: " + path);
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON configuration file");
  app->add_option("--set", c.overrides, "override key=value (dotted keys, repeatable)");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--workers", c.workers, "sampling and evaluation workers")->check(CLI::PositiveNumber);
  app->add_option("--out", c.out, "output directory (default under $XOPD_LAB_OUT or ./xopd-runs)");
}

// ---- gen-data ----------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  const PipelineConfig cfg = resolve_config(c);
  const std::uint64_t seed = chosen_seed(c, cfg);
  const fs::path dir = out_dir(c, "data-seed" + std::to_string(seed));
  write_run_spec(dir, "gen-data", cfg, {{"seed", seed}});
  const Dataset ds = pipeline_dataset(cfg, seed);
  const nlohmann::json m = write_dataset(ds, dir);
  const FilterStats total = ds.total_stats();
  std::cout << "dataset written to " << dir.string() << "\n";
  for (const auto& [name, xs] : ds.splits) std::cout << "  " << name << ": " << xs.size() << " examples\n";
  std::cout << "  rejection rate " << total.rejection_rate() << " (predicted " << total.predicted_rate() << ")\n";
  std::cout << "  manifest sha256 " << sha256_file(dir / "manifest.json") << "\n";
  (void)m;
  return 0;
}

// ---- shared input resolution --------------------------------------------------------------

struct Inputs {
  Dataset data;
  TeacherModel teacher;
  StudentModel base;
};

Inputs resolve_inputs(const PipelineConfig& cfg, std::uint64_t seed, const std::string& data_dir,
                      const std::string& teacher_path, const std::string& student_path, bool autobuild,
                      const fs::path& dir) {
  Inputs in;
  if (!data_dir.empty()) {
    require_exists(data_dir, "dataset directory");
    in.data = load_dataset(data_dir);
  } else if (autobuild) {
    in.data = pipeline_dataset(cfg, seed);
    write_dataset(in.data, dir / "dataset");
  } else {
    throw MissingInput("no dataset given: pass --data DIR or --auto");
  }

  if (!teacher_path.empty()) {
    require_exists(teacher_path, "teacher checkpoint");
    in.teacher = load_teacher(teacher_path);
  } else if (autobuild) {
    in.teacher = prepare_teachers(cfg).teacher;
  } else {
    throw MissingInput("no teacher checkpoint given: pass --teacher PATH or --auto");
  }

  if (!student_path.empty()) {
    require_exists(student_path, "student checkpoint");
    in.base = load_student(student_path);
  } else if (autobuild) {
    GapConfig gc = cfg.gap;
    gc.seed = seed;
    GapReport rep;
    in.base = build_gapped_student(in.teacher, cfg.teacher.model, gc, in.data.split("gap"), in.data.split("val"), &rep);
    save_student(dir / "base_student.ckpt", in.base);
    write_json_file(dir / "gap_report.json", to_json(rep));
  } else {
    throw MissingInput("no student checkpoint given: pass --student PATH or --auto");
  }
  return in;
}

// ---- train -------------------------------------------------------------------------------

struct TrainFlags {
  std::string method = "xopd";
  std::optional<double> lambda;
  std::optional<int> rollouts;
  bool autobuild = false;
  std::string data, teacher, student;
};

int cmd_train(const Common& c, const TrainFlags& f) {
  const Method method = method_from_string(f.method);
  PipelineConfig cfg = resolve_config(c);
  if (f.lambda) cfg.train.lambda = *f.lambda;
  if (f.rollouts) cfg.train.n_rollouts = *f.rollouts;
  cfg.train.method = method;
  const std::uint64_t seed = chosen_seed(c, cfg);
  cfg.train.seed = seed;
  cfg.train.validate();
  const fs::path dir = out_dir(c, "train-" + f.method + "-seed" + std::to_string(seed));
  write_run_spec(dir, "train", cfg,
                 {{"method", f.method}, {"seed", seed}, {"auto", f.autobuild}, {"data", f.data},
                  {"teacher", f.teacher}, {"student", f.student}});
  Inputs in = resolve_inputs(cfg, seed, f.data, f.teacher, f.student, f.autobuild, dir);
  RunResult r = run_method(cfg.train, in.base, in.teacher, in.data.split("train"), dir / "run",
                           {{"pipeline_seed", seed}});
  std::cout << "run written to " << (dir / "run").string() << "\n"
            << "  steps " << r.metrics.size() << ", final hash " << r.final_hash << "\n"
            << "  rollouts: text " << r.text_rollouts << ", speech " << r.speech_rollouts << "\n";
  return 0;
}

// ---- eval --------------------------------------------------------------------------------

struct EvalFlags {
  std::vector<std::string> checkpoints;
  std::string ablation;
  bool autobuild = false;
  std::string data, teacher, student;
};

std::vector<double> parse_lambda_grid(const std::string& spec) {
  const std::string prefix = "lambda=";
  if (spec.rfind(prefix, 0) != 0) throw UsageError("--ablation expects lambda=v1,v2,...");
  std::vector<double> out;
  std::stringstream ss(spec.substr(prefix.size()));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad lambda value '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("--ablation lambda grid is empty");
  return out;
}

int cmd_eval(const Common& c, const EvalFlags& f) {
  for (const auto& p : f.checkpoints) require_exists(p, "checkpoint");
  std::optional<std::vector<double>> grid;
  if (!f.ablation.empty()) grid = parse_lambda_grid(f.ablation);
  PipelineConfig cfg = resolve_config(c);
  if (grid) cfg.lambdas = *grid;
  cfg.validate();
  const std::uint64_t seed = chosen_seed(c, cfg);
  const fs::path dir = out_dir(c, "eval-seed" + std::to_string(seed));
  write_run_spec(dir, "eval", cfg,
                 {{"checkpoints", f.checkpoints}, {"ablation", f.ablation}, {"seed", seed}, {"auto", f.autobuild}});
  Inputs in = resolve_inputs(cfg, seed, f.data, f.teacher, f.student, f.autobuild, dir);
  EvalConfig ec = cfg.eval;
  ec.seed = seed;
  const auto& test = in.data.split("test");
  const auto fams = drop_families();
  const auto acoustic = select_family(test, TaskFamily::kAcoustic, ec.per_family);

  EvalReport teacher = evaluate_teacher(in.teacher, test, ec, "teacher");
  EvalReport base = evaluate_student(in.base, test, ec, "base");
  attach_avg_drop(base, teacher, fams);
  write_json_file(dir / "reports" / "teacher.json", to_json(teacher));
  write_json_file(dir / "reports" / "base.json", to_json(base));

  auto score = [&](const StudentModel& s, const std::string& id) {
    EvalReport r = evaluate_student(s, test, ec, id);
    attach_avg_drop(r, teacher, fams);
    r.acoustic = forgetting_eval(s, in.base, acoustic, ec.max_new, cfg.forgetting_threshold);
    write_json_file(dir / "reports" / (id + ".json"), to_json(r));
    return r;
  };

  std::vector<EvalReport> rows{teacher, base};
  for (const auto& p : f.checkpoints) rows.push_back(score(load_student(p), fs::path(p).stem().string()));
  write_modality_table_csv(dir / "table1.csv", rows, fams);
  std::cout << "table written to " << (dir / "table1.csv").string() << "\n";

  if (grid) {
    std::vector<EvalReport> ab;
    for (double l : *grid) {
      TrainConfig tc = cfg.train;
      tc.method = Method::kXopd;
      tc.lambda = l;
      tc.seed = seed;
      std::ostringstream tag;
      tag << "xopd_l" << l;
      RunResult r = run_method(tc, in.base, in.teacher, in.data.split("train"), dir / "runs" / tag.str());
      ab.push_back(score(r.student, tag.str()));
    }
    write_modality_table_csv(dir / "table2.csv", ab, fams);
    std::cout << "ablation table written to " << (dir / "table2.csv").string() << "\n";
  }
  return 0;
}

// ---- reproduce-paper-trends --------------------------------------------------------------

int cmd_reproduce(const Common& c, const std::vector<std::uint64_t>& seeds) {
  PipelineConfig cfg = resolve_config(c);
  if (!seeds.empty()) cfg.seeds = seeds;
  const fs::path dir = out_dir(c, "reproduce");
  if (cfg.teacher_cache.empty()) cfg.teacher_cache = dir / "teacher-cache";
  cfg.validate();
  write_run_spec(dir, "reproduce-paper-trends", cfg, {{"seeds", cfg.seeds}});
  const PipelineOutcome res = reproduce_trends(cfg, dir);
  const int n = static_cast<int>(res.seeds.size());
  std::cout << "results in " << dir.string() << "\n"
            << "  gap narrowing reproduced on " << res.gap_narrowing_passes << "/" << n << " seeds\n"
            << "  forgetting ordering reproduced on " << res.forgetting_passes << "/" << n << " seeds\n"
            << "  SFT text degradation reproduced on " << res.sft_degradation_passes << "/" << n << " seeds\n";
  for (const auto& d : res.deviations) std::cout << "  DEVIATION: " << d.at("trend").get<std::string>() << "\n";
  for (const auto& s : res.seeds) {
    if (s.failure) std::cout << "  seed " << s.seed << " failed: " << *s.failure << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xopd-lab: cross-modal on-policy distillation laboratory"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "generate the paired text/speech corpus");
  add_common(gen, common);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train a student with one method");
  add_common(train, common);
  train->add_option("--method", tf.method, "xopd, sft, offline_kd or gkd");
  train->add_option("--lambda", tf.lambda, "in-modal weight for xopd");
  train->add_option("--rollouts", tf.rollouts, "rollouts per prompt")->check(CLI::PositiveNumber);
  train->add_flag("--auto", tf.autobuild, "build missing dataset, teacher and student");
  train->add_option("--data", tf.data, "dataset directory");
  train->add_option("--teacher", tf.teacher, "teacher checkpoint");
  train->add_option("--student", tf.student, "gapped student checkpoint");

  EvalFlags ef;
  auto* ev = app.add_subcommand("eval", "score checkpoints and emit comparison tables");
  add_common(ev, common);
  ev->add_option("checkpoints", ef.checkpoints, "student checkpoints to score");
  ev->add_option("--ablation", ef.ablation, "lambda=v1,v2,... runs and tabulates an xopd grid");
  ev->add_flag("--auto", ef.autobuild, "build missing dataset, teacher and student");
  ev->add_option("--data", ef.data, "dataset directory");
  ev->add_option("--teacher", ef.teacher, "teacher checkpoint");
  ev->add_option("--student", ef.student, "base student checkpoint");

  std::vector<std::uint64_t> seeds;
  auto* rep = app.add_subcommand("reproduce-paper-trends", "run the whole pipeline on every seed");
  add_common(rep, common);
  rep->add_option("--seeds", seeds, "seed list (overrides the config)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*train) return cmd_train(common, tf);
    if (*ev) return cmd_eval(common, ef);
    if (*rep) return cmd_reproduce(common, seeds);
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
