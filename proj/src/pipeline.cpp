// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xopd/errors.hpp"
#include "xopd/params.hpp"
#include "xopd/rng.hpp"

namespace xopd {

namespace fs = std::filesystem;

PipelineConfig PipelineConfig::defaults() { return PipelineConfig{}; }

void PipelineConfig::validate() const {
  if (seeds.empty()) throw ConfigError("pipeline: at least one seed is required");
  if (lambdas.empty()) throw ConfigError("pipeline: the lambda grid is empty");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("pipeline: lambda values must lie in [0, 1]");
  }
  if (workers < 1) throw ConfigError("pipeline: workers must be >= 1");
  dataset.validate();
  codec.validate();
  teacher.validate();
  if (big_teacher) big_teacher->validate();
  gap.validate();
  train.validate();
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"seeds", c.seeds},
       {"dataset", c.dataset},
       {"codec", c.codec},
       {"teacher", c.teacher},
       {"gap", c.gap},
       {"train", c.train},
       {"lambdas", c.lambdas},
       {"eval", c.eval},
       {"forgetting_threshold", c.forgetting_threshold},
       {"workers", c.workers},
       {"teacher_cache", c.teacher_cache.string()}};
  j["big_teacher"] = c.big_teacher ? nlohmann::json(*c.big_teacher) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  const PipelineConfig d;
  c.seeds = j.value("seeds", d.seeds);
  c.dataset = j.contains("dataset") ? j.at("dataset").get<DatasetSpec>() : d.dataset;
  c.codec = j.contains("codec") ? j.at("codec").get<CodecConfig>() : d.codec;
  c.teacher = j.contains("teacher") ? j.at("teacher").get<TeacherPretrainConfig>() : d.teacher;
  c.big_teacher.reset();
  if (j.contains("big_teacher") && !j.at("big_teacher").is_null()) {
    c.big_teacher = j.at("big_teacher").get<TeacherPretrainConfig>();
  }
  c.gap = j.contains("gap") ? j.at("gap").get<GapConfig>() : d.gap;
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.lambdas = j.value("lambdas", d.lambdas);
  c.eval = j.contains("eval") ? j.at("eval").get<EvalConfig>() : d.eval;
  c.forgetting_threshold = j.value("forgetting_threshold", d.forgetting_threshold);
  c.workers = j.value("workers", d.workers);
  c.teacher_cache = j.value("teacher_cache", d.teacher_cache.string());
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ReportError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string lambda_tag(double l) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "xopd_l%g", l);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const std::string kSft = "sft";
const std::string kOfflineKd = "offline_kd";
const std::string kGkd = "gkd";

}  // namespace

Dataset pipeline_dataset(const PipelineConfig& cfg, std::uint64_t seed) {
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  CodecConfig cc = cfg.codec;
  cc.seed = derive_seed(seed, SeedStream::kCodec);
  return build_dataset(spec, SpeechCodec(cc));
}

std::vector<TaskFamily> drop_families() { return {TaskFamily::kReasoning, TaskFamily::kInstruction}; }

TeacherModel obtain_teacher(const TeacherPretrainConfig& cfg, const std::set<std::string>& excluded,
                            std::span<const PairedExample> val, const fs::path& cache_dir,
                            TeacherReport* report) {
  std::ostringstream key;
  key << nlohmann::json(cfg).dump() << '\n';
  for (const auto& k : excluded) key << k << '\n';
  for (const auto& e : val) key << e.id << ':' << prompt_key(e.family, e.text_prompt, e.label) << '\n';
  const std::string digest = sha256_hex(key.str()).substr(0, 16);
  const fs::path ckpt = cache_dir / ("teacher-" + digest + ".ckpt");
  const fs::path meta = cache_dir / ("teacher-" + digest + ".json");
  if (!cache_dir.empty() && fs::exists(ckpt) && fs::exists(meta)) {
    if (report) {
      std::ifstream in(meta);
      const auto j = nlohmann::json::parse(in);
      report->steps = j.at("steps");
      report->reasoning_accuracy = j.at("reasoning_accuracy");
      report->instruction_accuracy = j.at("instruction_accuracy");
      report->reached_target = j.at("reached_target");
      report->curve = j.at("curve").get<std::vector<nlohmann::json>>();
    }
    return load_teacher(ckpt);
  }
  TeacherReport rep;
  TeacherModel t = pretrain_teacher(cfg, excluded, val, &rep);
  if (!cache_dir.empty()) {
    fs::create_directories(cache_dir);
    const fs::path tmp = ckpt.string() + ".tmp";
    save_teacher(tmp, t);
    fs::rename(tmp, ckpt);
    write_json(meta, to_json(rep));
  }
  if (report) *report = rep;
  return t;
}

nlohmann::json to_json(const MethodOutcome& m) {
  nlohmann::json j = {{"tag", m.tag},
                      {"method", to_string(m.method)},
                      {"lambda", m.lambda},
                      {"teacher", m.teacher_id},
                      {"final_hash", m.final_hash},
                      {"text_rollouts", m.text_rollouts},
                      {"speech_rollouts", m.speech_rollouts},
                      {"wall_seconds", m.wall_seconds}};
  if (m.failure) {
    j["failure"] = *m.failure;
  } else {
    j["report"] = to_json(m.report);
    j["retention"] = to_json(m.retention);
  }
  return j;
}

const MethodOutcome* SeedOutcome::find(const std::string& tag) const {
  for (const auto& m : methods) {
    if (m.tag == tag) return &m;
  }
  return nullptr;
}

nlohmann::json to_json(const SeedOutcome& s) {
  nlohmann::json j = {{"seed", s.seed}};
  if (s.failure) j["failure"] = *s.failure;
  j["teacher"] = to_json(s.teacher);
  j["base"] = to_json(s.base);
  j["gap"] = to_json(s.gap);
  j["methods"] = nlohmann::json::array();
  for (const auto& m : s.methods) j["methods"].push_back(to_json(m));
  return j;
}

TrendCheck check_trends(const SeedOutcome& s, const std::string& xopd_tag) {
  TrendCheck t;
  if (s.failure) {
    t.notes.push_back("seed failed: " + *s.failure);
    return t;
  }
  const MethodOutcome* x = s.find(xopd_tag);
  std::vector<const MethodOutcome*> baselines{s.find(kSft), s.find(kOfflineKd), s.find(kGkd)};
  auto usable = [](const MethodOutcome* m) {
    return m && !m->failure && m->report.avg_drop_speech && m->report.avg_drop_text;
  };
  const bool base_ok = s.base.avg_drop_speech && s.base.avg_drop_text;
  bool all_usable = usable(x) && base_ok;
  for (auto* b : baselines) all_usable = all_usable && usable(b);
  if (!all_usable) {
    t.notes.push_back("missing or failed runs; trends not evaluated");
    return t;
  }

  const double base_s = *s.base.avg_drop_speech, base_t = *s.base.avg_drop_text;
  const double xs = *x->report.avg_drop_speech, xt = *x->report.avg_drop_text;
  bool narrowing = base_s > 0.0 && xs <= 0.5 * base_s && xt <= base_t + 2.0;
  std::ostringstream n;
  n << xopd_tag << " dS " << xs << " vs base " << base_s << ", dT " << xt << " vs base " << base_t;
  for (auto* b : baselines) {
    narrowing = narrowing && xs < *b->report.avg_drop_speech;
    n << "; " << b->tag << " dS " << *b->report.avg_drop_speech;
  }
  t.gap_narrowing = narrowing;
  t.notes.push_back(n.str());

  bool forgetting = true;
  std::ostringstream f;
  f << "acoustic drop:";
  for (const auto& m : s.methods) {
    if (m.method != Method::kXopd || m.teacher_id != "teacher") continue;
    if (m.failure) {
      forgetting = false;
      continue;
    }
    f << ' ' << m.tag << '=' << m.retention.drop;
    for (auto* b : baselines) forgetting = forgetting && m.retention.drop < b->retention.drop;
  }
  for (auto* b : baselines) f << ' ' << b->tag << '=' << b->retention.drop;
  t.forgetting = forgetting;
  t.notes.push_back(f.str());

  const double sft_t = *baselines[0]->report.avg_drop_text;
  t.sft_degrades_text = sft_t > base_t;
  std::ostringstream d;
  d << "sft dT " << sft_t << " vs base dT " << base_t;
  t.notes.push_back(d.str());
  return t;
}

SeedOutcome run_seed(const PipelineConfig& cfg, std::uint64_t seed, const TeacherModel& teacher,
                     const std::optional<TeacherModel>& big_teacher, const fs::path& dir) {
  SeedOutcome out;
  out.seed = seed;
  fs::create_directories(dir);
  const Dataset ds = pipeline_dataset(cfg, seed);
  const nlohmann::json ds_manifest = write_dataset(ds, dir / "dataset");
  const auto& train = ds.split("train");
  const auto& test = ds.split("test");
  const auto fams = drop_families();

  EvalConfig ec = cfg.eval;
  ec.seed = seed;
  out.teacher = evaluate_teacher(teacher, test, ec, "teacher");

  GapConfig gc = cfg.gap;
  gc.seed = seed;
  StudentModel base;
  try {
    base = build_gapped_student(teacher, cfg.teacher.model, gc, ds.split("gap"), ds.split("val"), &out.gap);
  } catch (const TrainingFailure& e) {
    out.failure = e.what();
    write_json(dir / "student" / "gap_report.json", to_json(out.gap));
    return out;
  }
  save_student(dir / "student" / "base.ckpt", base);
  write_json(dir / "student" / "gap_report.json", to_json(out.gap));

  out.base = evaluate_student(base, test, ec, "base");
  attach_avg_drop(out.base, out.teacher, fams);
  const auto acoustic = select_family(test, TaskFamily::kAcoustic, ec.per_family);

  struct Plan {
    std::string tag;
    Method method;
    double lambda;
    bool big;
  };
  std::vector<Plan> plans;
  for (double l : cfg.lambdas) plans.push_back({lambda_tag(l), Method::kXopd, l, false});
  plans.push_back({kSft, Method::kSft, cfg.train.lambda, false});
  plans.push_back({kOfflineKd, Method::kOfflineKd, cfg.train.lambda, false});
  plans.push_back({kGkd, Method::kGkd, cfg.train.lambda, false});
  if (big_teacher) plans.push_back({lambda_tag(cfg.train.lambda) + "_big", Method::kXopd, cfg.train.lambda, true});

  for (const auto& p : plans) {
    MethodOutcome m;
    m.tag = p.tag;
    m.method = p.method;
    m.lambda = p.lambda;
    m.teacher_id = p.big ? "big_teacher" : "teacher";
    TrainConfig tc = cfg.train;
    tc.method = p.method;
    tc.lambda = p.lambda;
    tc.seed = seed;
    tc.workers = cfg.workers;
    const TeacherModel& t = p.big ? *big_teacher : teacher;
    const nlohmann::json extra = {{"pipeline_seed", seed},
                                  {"dataset_manifest_sha256", sha256_hex(ds_manifest.dump())},
                                  {"teacher_hash", param_hash(t.params)},
                                  {"base_student_hash", param_hash(base.params)}};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      RunResult r = run_method(tc, base, t, train, dir / "runs" / p.tag, extra);
      m.final_hash = r.final_hash;
      m.text_rollouts = r.text_rollouts;
      m.speech_rollouts = r.speech_rollouts;
      m.loss_curve.name = p.tag;
      m.kl_curve.name = p.tag;
      for (const auto& rec : r.metrics) {
        if (!rec.contains("loss")) continue;
        m.loss_curve.x.push_back(rec.at("step").get<double>());
        m.loss_curve.y.push_back(rec.at("loss").get<double>());
        if (rec.contains("xopd")) {
          m.kl_curve.x.push_back(rec.at("step").get<double>());
          m.kl_curve.y.push_back(rec.at("xopd").at("mean_reverse_kl_estimate").get<double>());
        }
      }
      m.report = evaluate_student(r.student, test, ec, p.tag);
      attach_avg_drop(m.report, out.teacher, fams);
      m.retention = forgetting_eval(r.student, base, acoustic, ec.max_new, cfg.forgetting_threshold);
      m.report.acoustic = m.retention;
    } catch (const TrainingFailure& e) {
      m.failure = e.what();
    }
    m.wall_seconds = seconds_since(t0);
    write_json(dir / "reports" / (p.tag + ".json"), to_json(m));
    out.methods.push_back(std::move(m));
  }
  write_json(dir / "reports" / "teacher.json", to_json(out.teacher));
  write_json(dir / "reports" / "base.json", to_json(out.base));

  std::vector<CurveSeries> loss, kl;
  for (const auto& m : out.methods) {
    if (m.failure) continue;
    loss.push_back(m.loss_curve);
    if (!m.kl_curve.x.empty()) kl.push_back(m.kl_curve);
  }
  write_curves_csv(dir / "curves_loss.csv", loss);
  write_curves_svg(dir / "curves_loss.svg", "training loss, seed " + std::to_string(seed), "step", "loss", loss);
  if (!kl.empty()) {
    write_curves_csv(dir / "curves_kl.csv", kl);
    write_curves_svg(dir / "curves_kl.svg", "sampled reverse KL, seed " + std::to_string(seed), "step",
                     "reverse KL estimate", kl);
  }
  return out;
}

namespace {

void write_forgetting_csv(const fs::path& path, const std::vector<SeedOutcome>& seeds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ReportError("cannot write " + path.string());
  out << "seed,model,acoustic_before,acoustic_after,drop_points,flagged\n";
  for (const auto& s : seeds) {
    for (const auto& m : s.methods) {
      if (m.failure) continue;
      out << s.seed << ',' << m.tag << ',' << m.retention.before * 100.0 << ',' << m.retention.after * 100.0 << ','
          << m.retention.drop << ',' << (m.retention.flagged ? "yes" : "no") << '\n';
    }
  }
}

EvalReport renamed(EvalReport r, std::uint64_t seed) {
  r.model_id = "seed" + std::to_string(seed) + "/" + r.model_id;
  return r;
}

nlohmann::json deviation(const std::string& trend, int passes, int total, const std::vector<TrendCheck>& checks,
                         bool (*pick)(const TrendCheck&)) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : checks) per.push_back({{"reproduced", pick(c)}, {"notes", c.notes}});
  return {{"type", "DEVIATION"},
          {"trend", trend},
          {"reproduced_on", passes},
          {"seeds", total},
          {"detail", "trend did not reproduce on a majority of seeds at desk scale"},
          {"per_seed", per}};
}

}  // namespace

TeacherBundle prepare_teachers(const PipelineConfig& cfg) {
  std::set<std::string> excluded;
  std::vector<PairedExample> val;
  for (std::uint64_t seed : cfg.seeds) {
    const Dataset ds = pipeline_dataset(cfg, seed);
    const auto keys = ds.prompt_keys({"val", "test"});
    excluded.insert(keys.begin(), keys.end());
    if (val.empty()) val = ds.split("val");
  }
  TeacherBundle b;
  b.teacher = obtain_teacher(cfg.teacher, excluded, val, cfg.teacher_cache, &b.report);
  if (cfg.big_teacher) {
    b.big_report.emplace();
    b.big = obtain_teacher(*cfg.big_teacher, excluded, val, cfg.teacher_cache, &*b.big_report);
  }
  return b;
}

PipelineOutcome reproduce_trends(const PipelineConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out);
  write_json(out / "config.json", {{"pipeline", cfg}, {"reference_hyperparameters", reference_hyperparameters()},
                                   {"git_describe", build_describe()}});

  TeacherBundle tb = prepare_teachers(cfg);
  const TeacherModel& teacher = tb.teacher;
  const TeacherReport& trep = tb.report;
  const std::optional<TeacherModel>& big = tb.big;
  write_json(out / "teacher_report.json", to_json(trep));
  if (tb.big_report) write_json(out / "big_teacher_report.json", to_json(*tb.big_report));
  {
    CurveSeries r{"reasoning", {}, {}}, i{"instruction", {}, {}};
    for (const auto& c : trep.curve) {
      r.x.push_back(c.at("step").get<double>());
      r.y.push_back(c.at("reasoning_accuracy").get<double>());
      i.x.push_back(c.at("step").get<double>());
      i.y.push_back(c.at("instruction_accuracy").get<double>());
    }
    write_curves_csv(out / "teacher_accuracy.csv", {r, i});
    write_curves_svg(out / "teacher_accuracy.svg", "teacher validation accuracy", "step", "accuracy", {r, i});
  }

  PipelineOutcome res;
  for (std::uint64_t seed : cfg.seeds) {
    SeedOutcome s = run_seed(cfg, seed, teacher, big, out / ("seed-" + std::to_string(seed)));
    res.trends.push_back(check_trends(s, lambda_tag(cfg.train.lambda)));
    res.seeds.push_back(std::move(s));
  }
  for (const auto& t : res.trends) {
    res.gap_narrowing_passes += t.gap_narrowing;
    res.forgetting_passes += t.forgetting;
    res.sft_degradation_passes += t.sft_degrades_text;
  }
  const int n = static_cast<int>(res.seeds.size());
  const int need = n / 2 + 1;
  if (res.gap_narrowing_passes < need) {
    res.deviations.push_back(deviation("gap_narrowing", res.gap_narrowing_passes, n, res.trends,
                                       [](const TrendCheck& c) { return c.gap_narrowing; }));
  }
  if (res.forgetting_passes < need) {
    res.deviations.push_back(deviation("forgetting", res.forgetting_passes, n, res.trends,
                                       [](const TrendCheck& c) { return c.forgetting; }));
  }
  if (res.sft_degradation_passes < need) {
    res.deviations.push_back(deviation("sft_text_degradation", res.sft_degradation_passes, n, res.trends,
                                       [](const TrendCheck& c) { return c.sft_degrades_text; }));
  }

  const auto fams = drop_families();
  std::vector<EvalReport> t1, t2;
  for (const auto& s : res.seeds) {
    if (s.failure) continue;
    t1.push_back(renamed(s.teacher, s.seed));
    t1.push_back(renamed(s.base, s.seed));
    for (const auto& m : s.methods) {
      if (m.failure) continue;
      if (m.tag == lambda_tag(cfg.train.lambda) || m.method != Method::kXopd) t1.push_back(renamed(m.report, s.seed));
      if (m.method == Method::kXopd) t2.push_back(renamed(m.report, s.seed));
    }
  }
  write_modality_table_csv(out / "table1.csv", t1, fams);
  write_modality_table_csv(out / "table2.csv", t2, fams);
  write_forgetting_csv(out / "table3.csv", res.seeds);

  nlohmann::json summary = {{"seeds", nlohmann::json::array()},
                            {"gap_narrowing_passes", res.gap_narrowing_passes},
                            {"forgetting_passes", res.forgetting_passes},
                            {"sft_degradation_passes", res.sft_degradation_passes},
                            {"deviations", res.deviations},
                            {"teacher", to_json(trep)},
                            {"wall_seconds", seconds_since(t0)}};
  for (std::size_t i = 0; i < res.seeds.size(); ++i) {
    nlohmann::json s = to_json(res.seeds[i]);
    s["trends"] = {{"gap_narrowing", res.trends[i].gap_narrowing},
                   {"forgetting", res.trends[i].forgetting},
                   {"sft_degrades_text", res.trends[i].sft_degrades_text},
                   {"notes", res.trends[i].notes}};
    summary["seeds"].push_back(s);
  }
  write_json(out / "summary.json", summary);
  return res;
}

}  // namespace xopd
