// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "xopd/baselines.hpp"
#include "xopd/errors.hpp"
#include "xopd/eval.hpp"
#include "xopd/vocab.hpp"

#ifndef XOPD_GIT_DESCRIBE
#define XOPD_GIT_DESCRIBE "unknown"
#endif

namespace xopd {

// ---- optimiser ---------------------------------------------------------------

void Adam::step(ParamSet& params, const std::function<bool(const std::string&)>& trainable) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (trainable && !trainable(name)) continue;
    if (!p.grad) continue;
    auto& st = state_[name];
    if (st.m.empty()) {
      st.m.assign(p.numel(), 0.0);
      st.v.assign(p.numel(), 0.0);
    }
    const auto& g = *p.grad;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = st.m[i] / c1;
      const double vh = st.v[i] / c2;
      p.data[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
    if (cfg_.weight_decay > 0.0 && p.shape.size() >= 2) {
      const double keep = 1.0 - cfg_.lr * cfg_.weight_decay;
      for (double& v : p.data) v *= keep;
    }
  }
}

// ---- configuration -------------------------------------------------------------

std::string to_string(Method m) {
  switch (m) {
    case Method::kXopd: return "xopd";
    case Method::kSft: return "sft";
    case Method::kOfflineKd: return "offline_kd";
    case Method::kGkd: return "gkd";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::kXopd, Method::kSft, Method::kOfflineKd, Method::kGkd}) {
    if (to_string(m) == s) return m;
  }
  throw UsageError("unknown method '" + s + "'; valid methods: xopd, sft, offline_kd, gkd");
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (n_rollouts < 1) throw ConfigError("n_rollouts must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (mini_epochs < 1) throw ConfigError("mini_epochs must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (max_new < 1) throw ConfigError("max_new must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (clip && !(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("clip_eps must lie in (0, 1)");
}

int TrainConfig::resolved_steps(std::size_t n) const {
  if (steps > 0) return steps;
  const auto per_epoch = (n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  return static_cast<int>(per_epoch) * epochs;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"method", to_string(c.method)},
       {"lambda", c.lambda},
       {"n_rollouts", c.n_rollouts},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"epochs", c.epochs},
       {"freeze_tower", c.freeze_tower},
       {"seed", c.seed},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"temperature", c.temperature},
       {"max_new", c.max_new},
       {"clip", c.clip},
       {"clip_eps", c.clip_eps},
       {"mini_epochs", c.mini_epochs},
       {"checkpoint_every", c.checkpoint_every},
       {"workers", c.workers},
       {"sft_text_conditioned", c.sft_text_conditioned},
       {"dump_trajectories", c.dump_trajectories}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.method = method_from_string(j.value("method", to_string(d.method)));
  c.lambda = j.value("lambda", d.lambda);
  c.n_rollouts = j.value("n_rollouts", d.n_rollouts);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.epochs = j.value("epochs", d.epochs);
  c.freeze_tower = j.value("freeze_tower", d.freeze_tower);
  c.seed = j.value("seed", d.seed);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.temperature = j.value("temperature", d.temperature);
  c.max_new = j.value("max_new", d.max_new);
  c.clip = j.value("clip", d.clip);
  c.clip_eps = j.value("clip_eps", d.clip_eps);
  c.mini_epochs = j.value("mini_epochs", d.mini_epochs);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.workers = j.value("workers", d.workers);
  c.sft_text_conditioned = j.value("sft_text_conditioned", d.sft_text_conditioned);
  c.dump_trajectories = j.value("dump_trajectories", d.dump_trajectories);
}

nlohmann::json reference_hyperparameters() {
  return {{"learning_rate", 2e-6}, {"batch_size", 256}, {"n_rollouts", 4}, {"lambda", 0.5},
          {"baseline_epochs", 1},  {"freeze_tower", true}};
}

std::string build_describe() { return XOPD_GIT_DESCRIBE; }

// ---- helpers -------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

bool all_finite(const ParamSet& ps) {
  for (const auto& [_, t] : ps) {
    if (!t.grad) continue;
    for (double g : *t.grad) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

double grad_norm(const ParamSet& ps, const std::function<bool(const std::string&)>& trainable) {
  double s = 0.0;
  for (const auto& [name, t] : ps) {
    if (!t.grad || (trainable && !trainable(name))) continue;
    for (double g : *t.grad) s += g * g;
  }
  return std::sqrt(s);
}

void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw TrainingFailure("cannot write " + p.string());
}

std::string examples_hash(std::span<const PairedExample> xs) {
  std::string all;
  for (const auto& e : xs) all += nlohmann::json(e).dump() + "\n";
  return sha256_hex(all);
}

// Seeded permutation using raw engine output.
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t k = n; k > 1; --k) std::swap(idx[k - 1], idx[rng() % k]);
  return idx;
}

// Mean NLL of answer+EOS over (prompt, answer) pairs in one graph.
Var likelihood_loss(Graph& g, const StudentModel* s, const TeacherModel* t,
                    const std::vector<std::pair<Prompt, std::vector<int>>>& items) {
  std::vector<Var> terms;
  for (const auto& [p, a] : items) {
    const auto y = answer_with_eos(a);
    Var logits = s ? forward_logits(g, *s, p, y) : forward_logits(g, *t, p, y);
    terms.push_back(mean(gather_log_prob(log_softmax(logits), y)));
  }
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, -1.0 / static_cast<double>(terms.size()));
}

}  // namespace

// ---- alignment methods ---------------------------------------------------------------

RunResult run_method(const TrainConfig& cfg, const StudentModel& initial, const TeacherModel& teacher,
                     std::span<const PairedExample> dataset, const std::optional<std::filesystem::path>& run_dir,
                     const nlohmann::json& extra_manifest) {
  cfg.validate();
  if (dataset.empty()) throw UsageError("run_method: empty alignment dataset");
  RunResult res;
  res.student = initial;
  StudentModel& student = res.student;
  student.tower_frozen = cfg.freeze_tower;
  const auto trainable = [&](const std::string& name) {
    return !(cfg.freeze_tower && is_speech_pathway_param(name));
  };
  for (auto& [name, t] : student.params) t.requires_grad = trainable(name);

  const std::string teacher_hash = param_hash(teacher.params);
  res.initial_hash = param_hash(student.params);
  res.tower_hash = param_hash(student.params, is_speech_pathway_param);

  std::vector<PairedExample> distilled;
  std::span<const PairedExample> data = dataset;
  if (cfg.method == Method::kOfflineKd) {
    distilled = offline_kd_build(teacher, dataset, cfg.max_new, "teacher:" + teacher_hash);
    data = distilled;
  }

  std::ofstream metrics_out, timing_out;
  std::filesystem::path ckpt_dir;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir / "checkpoints");
    ckpt_dir = *run_dir / "checkpoints";
    nlohmann::json conf = {{"train", cfg}, {"reference_hyperparameters", reference_hyperparameters()}};
    write_json_file(*run_dir / "config.json", conf);
    metrics_out.open(*run_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    timing_out.open(*run_dir / "timing.jsonl", std::ios::binary | std::ios::trunc);
    if (cfg.method == Method::kOfflineKd) write_examples_jsonl(*run_dir / "distilled.jsonl", distilled);
    if (cfg.dump_trajectories) std::filesystem::remove(*run_dir / "trajectories.jsonl");
  }

  Adam adam({cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps});
  const int total = cfg.resolved_steps(data.size());
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (data.size() + B - 1) / B;
  std::vector<std::size_t> order;
  std::string last_good = "none (initial student)";

  const bool uses_rollouts = cfg.method == Method::kXopd || cfg.method == Method::kGkd;
  RolloutConfig rc;
  rc.n = cfg.n_rollouts;
  rc.temperature = cfg.temperature;
  rc.max_new = cfg.max_new;
  rc.workers = cfg.workers;
  rc.text = cfg.method == Method::kXopd && cfg.lambda > 0.0;
  rc.speech = cfg.method == Method::kGkd || (cfg.method == Method::kXopd && cfg.lambda < 1.0);
  const XopdConfig xc{cfg.lambda, cfg.clip, cfg.clip_eps};

  for (int step = 0; step < total; ++step) {
    const auto t0 = Clock::now();
    const std::size_t epoch = static_cast<std::size_t>(step) / per_epoch;
    const std::size_t k = static_cast<std::size_t>(step) % per_epoch;
    if (k == 0) order = permutation(data.size(), derive_seed(cfg.seed, SeedStream::kMethod, {epoch}));
    std::vector<PairedExample> batch;
    for (std::size_t i = k * B; i < std::min(data.size(), (k + 1) * B); ++i) batch.push_back(data[order[i]]);

    nlohmann::json rec = {{"step", step + 1}, {"epoch", epoch}, {"method", to_string(cfg.method)}};
    std::optional<RolloutBatch> rollouts;
    if (uses_rollouts) {
      rollouts = collect_rollouts(student, batch, rc,
                                  derive_seed(cfg.seed, SeedStream::kRollout, {static_cast<std::uint64_t>(step)}));
      res.text_rollouts += rollouts->text_trajectories;
      res.speech_rollouts += rollouts->speech_trajectories;
      if (run_dir && cfg.dump_trajectories) write_trajectories_jsonl(*run_dir / "trajectories.jsonl", *rollouts);
      long len = 0, count = 0;
      for (const auto* grp : {&rollouts->text, &rollouts->speech}) {
        for (const auto& per : *grp) {
          for (const auto& tr : per) {
            len += static_cast<long>(tr.tokens.size());
            ++count;
          }
        }
      }
      rec["mean_completion_length"] = count ? static_cast<double>(len) / static_cast<double>(count) : 0.0;
      rec["text_trajectories"] = rollouts->text_trajectories;
      rec["speech_trajectories"] = rollouts->speech_trajectories;
    }

    for (int mini = 0; mini < cfg.mini_epochs; ++mini) {
      Graph g;
      Var loss;
      try {
      if (cfg.method == Method::kXopd) {
        XopdLoss xl = xopd_loss(g, *rollouts, batch, teacher, student, xc);
        loss = scale(xl.objective, -1.0);
        if (mini == 0) rec["xopd"] = to_json(xl.report);
      } else if (cfg.method == Method::kGkd) {
        loss = gkd_batch_loss(g, teacher, student, *rollouts, batch);
      } else {
        std::vector<std::pair<Prompt, std::vector<int>>> items;
        for (const auto& e : batch) {
          items.emplace_back(cfg.sft_text_conditioned ? text_prompt_of(e) : speech_prompt_of(e), e.reference_answer);
        }
        loss = likelihood_loss(g, &student, nullptr, items);
      }
      } catch (const NumericError& e) {
        throw TrainingFailure(std::string("non-finite values at step ") + std::to_string(step + 1) + " (" +
                              e.what() + "); last good checkpoint: " + last_good);
      }
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainingFailure("non-finite loss at step " + std::to_string(step + 1) +
                              "; last good checkpoint: " + last_good);
      }
      g.backward(loss);
      student.params.zero_grad();
      student.params.accumulate_grads(g);
      if (!all_finite(student.params)) {
        throw TrainingFailure("non-finite gradient at step " + std::to_string(step + 1) +
                              "; last good checkpoint: " + last_good);
      }
      if (mini == 0) {
        rec["loss"] = lv;
        rec["grad_norm"] = grad_norm(student.params, trainable);
      }
      adam.step(student.params, trainable);
    }
    if (cfg.freeze_tower && param_hash(student.params, is_speech_pathway_param) != res.tower_hash) {
      throw TrainingFailure("frozen speech tower/adapter changed at step " + std::to_string(step + 1));
    }
    rec["learning_rate"] = cfg.learning_rate;
    res.metrics.push_back(rec);
    if (run_dir) {
      metrics_out << rec.dump() << '\n';
      metrics_out.flush();
      const bool final = step + 1 == total;
      if (final || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)) {
        const auto path = ckpt_dir / ("step-" + std::to_string(step + 1) + ".ckpt");
        save_student(path, student);
        last_good = path.string();
      }
      const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
      timing_out << nlohmann::json{{"step", step + 1}, {"wall_seconds", secs}}.dump() << '\n';
    }
  }
  for (auto& [_, t] : student.params) {
    t.requires_grad = true;
    t.grad.reset();
  }
  res.final_hash = param_hash(student.params);
  if (run_dir) {
    nlohmann::json man = {{"method", to_string(cfg.method)},
                          {"steps", total},
                          {"seed", cfg.seed},
                          {"rollout_seed_stream", static_cast<int>(SeedStream::kRollout)},
                          {"dataset_hash", examples_hash(dataset)},
                          {"teacher_hash", teacher_hash},
                          {"initial_hash", res.initial_hash},
                          {"final_hash", res.final_hash},
                          {"tower_hash", res.tower_hash},
                          {"text_rollouts", res.text_rollouts},
                          {"speech_rollouts", res.speech_rollouts},
                          {"git_describe", build_describe()},
                          {"reference_hyperparameters", reference_hyperparameters()}};
    if (total == 0) {
      save_student(ckpt_dir / "step-0.ckpt", student);
    }
    man.update(extra_manifest);
    write_json_file(*run_dir / "manifest.json", man);
  }
  return res;
}

// ---- teacher pretraining ---------------------------------------------------------------

void TeacherPretrainConfig::validate() const {
  model.validate();
  if (max_steps < 1 || batch_size < 1 || eval_every < 1) throw ConfigError("teacher: counts must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("teacher: learning_rate must be positive");
  if (warmup_steps < 0) throw ConfigError("teacher: warmup_steps must be >= 0");
  if (!(weight_decay >= 0.0 && learning_rate * weight_decay < 1.0)) {
    throw ConfigError("teacher: weight_decay must be >= 0 with learning_rate * weight_decay < 1");
  }
  if (!(reasoning_fraction >= 0.0 && reasoning_fraction <= 1.0)) {
    throw ConfigError("teacher: reasoning_fraction must lie in [0, 1]");
  }
  if (max_difficulty < 1 || max_difficulty > 3) throw ConfigError("teacher: max_difficulty must lie in [1, 3]");
}

void to_json(nlohmann::json& j, const TeacherPretrainConfig& c) {
  j = {{"model", c.model},
       {"max_steps", c.max_steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"warmup_steps", c.warmup_steps},
       {"weight_decay", c.weight_decay},
       {"reasoning_fraction", c.reasoning_fraction},
       {"eval_every", c.eval_every},
       {"reasoning_target", c.reasoning_target},
       {"instruction_target", c.instruction_target},
       {"max_difficulty", c.max_difficulty},
       {"seed", c.seed},
       {"max_new", c.max_new}};
}

void from_json(const nlohmann::json& j, TeacherPretrainConfig& c) {
  TeacherPretrainConfig d;
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.max_steps = j.value("max_steps", d.max_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.reasoning_fraction = j.value("reasoning_fraction", d.reasoning_fraction);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.reasoning_target = j.value("reasoning_target", d.reasoning_target);
  c.instruction_target = j.value("instruction_target", d.instruction_target);
  c.max_difficulty = j.value("max_difficulty", d.max_difficulty);
  c.seed = j.value("seed", d.seed);
  c.max_new = j.value("max_new", d.max_new);
}

nlohmann::json to_json(const TeacherReport& r) {
  return {{"steps", r.steps},
          {"reasoning_accuracy", r.reasoning_accuracy},
          {"instruction_accuracy", r.instruction_accuracy},
          {"reached_target", r.reached_target},
          {"curve", r.curve}};
}

TeacherModel pretrain_teacher(const TeacherPretrainConfig& cfg, const std::set<std::string>& excluded,
                              std::span<const PairedExample> val, TeacherReport* report) {
  cfg.validate();
  TeacherModel teacher = init_teacher(cfg.model, derive_seed(cfg.seed, SeedStream::kTeacherInit));
  std::vector<PairedExample> val_r, val_i;
  for (const auto& e : val) {
    if (e.difficulty > cfg.max_difficulty) continue;
    if (e.family == TaskFamily::kReasoning) val_r.push_back(e);
    if (e.family == TaskFamily::kInstruction) val_i.push_back(e);
  }
  if (val_r.empty() || val_i.empty()) throw DataError("teacher pretraining needs reasoning and instruction validation examples");

  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  TeacherReport rep;
  for (int step = 0; step < cfg.max_steps; ++step) {
    double scale = 1.0;
    if (step < cfg.warmup_steps) {
      scale = static_cast<double>(step + 1) / cfg.warmup_steps;
    } else if (cfg.max_steps > cfg.warmup_steps) {
      scale = 1.0 - 0.9 * static_cast<double>(step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps);
    }
    adam.set_lr(cfg.learning_rate * scale);
    std::vector<std::pair<Prompt, std::vector<int>>> items;
    for (int k = 0; k < cfg.batch_size; ++k) {
      Rng rng(derive_seed(cfg.seed, SeedStream::kTeacherData,
                          {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(k)}));
      TaskInstance ti;
      do {
        const TaskFamily f = uniform01(rng) < cfg.reasoning_fraction ? TaskFamily::kReasoning : TaskFamily::kInstruction;
        ti = generate_task(f, 1 + static_cast<int>(uniform_int(rng, static_cast<std::uint64_t>(cfg.max_difficulty))), rng);
      } while (excluded.count(prompt_key(ti.family, ti.prompt, ti.label)));
      items.emplace_back(Prompt{Modality::kText, ti.prompt}, ti.answer);
    }
    Graph g;
    Var loss = likelihood_loss(g, nullptr, &teacher, items);
    g.backward(loss);
    teacher.params.zero_grad();
    teacher.params.accumulate_grads(g);
    if (!std::isfinite(loss.item()) || !all_finite(teacher.params)) {
      throw TrainingFailure("teacher pretraining diverged at step " + std::to_string(step + 1));
    }
    adam.step(teacher.params);
    rep.steps = step + 1;
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
      rep.reasoning_accuracy = score_model(teacher, val_r, Modality::kText, cfg.max_new).accuracy;
      rep.instruction_accuracy = score_model(teacher, val_i, Modality::kText, cfg.max_new).accuracy;
      rep.curve.push_back({{"step", step + 1},
                           {"loss", loss.item()},
                           {"reasoning_accuracy", rep.reasoning_accuracy},
                           {"instruction_accuracy", rep.instruction_accuracy}});
      if (rep.reasoning_accuracy >= cfg.reasoning_target && rep.instruction_accuracy >= cfg.instruction_target) {
        rep.reached_target = true;
        break;
      }
    }
  }
  for (auto& [_, t] : teacher.params) t.grad.reset();
  if (report) *report = rep;
  if (!rep.reached_target) {
    throw TrainingFailure("teacher missed its validation targets after " + std::to_string(rep.steps) +
                          " steps: reasoning " + std::to_string(rep.reasoning_accuracy) + " (target " +
                          std::to_string(cfg.reasoning_target) + "), instruction " +
                          std::to_string(rep.instruction_accuracy) + " (target " +
                          std::to_string(cfg.instruction_target) + ")");
  }
  return teacher;
}

// ---- gapped student ---------------------------------------------------------------------

void GapConfig::validate() const {
  if (steps < 0 || batch_size < 1 || speech_examples < 0) throw ConfigError("gap: bad counts");
  if (!(learning_rate > 0.0 && tower_learning_rate > 0.0)) {
    throw ConfigError("gap: learning_rate and tower_learning_rate must be positive");
  }
  if (!(align_weight >= 0.0)) throw ConfigError("gap: align_weight must be >= 0");
}

void to_json(nlohmann::json& j, const GapConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"tower_learning_rate", c.tower_learning_rate},
       {"speech_examples", c.speech_examples},
       {"train_backbone", c.train_backbone},
       {"text_replay", c.text_replay},
       {"align_weight", c.align_weight},
       {"acoustic_target", c.acoustic_target},
       {"seed", c.seed},
       {"max_new", c.max_new}};
}

void from_json(const nlohmann::json& j, GapConfig& c) {
  GapConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.tower_learning_rate = j.value("tower_learning_rate", d.tower_learning_rate);
  c.speech_examples = j.value("speech_examples", d.speech_examples);
  c.train_backbone = j.value("train_backbone", d.train_backbone);
  c.text_replay = j.value("text_replay", d.text_replay);
  c.align_weight = j.value("align_weight", d.align_weight);
  c.acoustic_target = j.value("acoustic_target", d.acoustic_target);
  c.seed = j.value("seed", d.seed);
  c.max_new = j.value("max_new", d.max_new);
}

nlohmann::json to_json(const GapReport& r) {
  return {{"teacher_text_reasoning", r.teacher_text_reasoning},
          {"speech_reasoning", r.speech_reasoning},
          {"text_reasoning", r.text_reasoning},
          {"speech_instruction", r.speech_instruction},
          {"text_instruction", r.text_instruction},
          {"acoustic", r.acoustic},
          {"gap_ok", r.gap_ok},
          {"acoustic_ok", r.acoustic_ok}};
}

StudentModel build_gapped_student(const TeacherModel& teacher, const ModelConfig& student_cfg,
                                  const GapConfig& cfg, std::span<const PairedExample> gap_split,
                                  std::span<const PairedExample> val, GapReport* report) {
  cfg.validate();
  StudentModel student =
      init_student_from_teacher(teacher, student_cfg, derive_seed(cfg.seed, SeedStream::kStudentInit));
  student.tower_frozen = false;

  std::vector<PairedExample> pool;
  const std::size_t half = static_cast<std::size_t>(cfg.speech_examples) / 2;
  for (TaskFamily f : {TaskFamily::kReasoning, TaskFamily::kInstruction}) {
    auto xs = select_family(gap_split, f, half);
    if (half > 0 && xs.size() < half) throw DataError("gap split has too few " + to_string(f) + " examples");
    pool.insert(pool.end(), xs.begin(), xs.end());
  }
  auto ac = select_family(gap_split, TaskFamily::kAcoustic);
  if (ac.empty()) throw DataError("gap split has no acoustic examples");
  pool.insert(pool.end(), ac.begin(), ac.end());

  const auto trainable = [&](const std::string& name) {
    return cfg.train_backbone || is_speech_pathway_param(name);
  };
  for (auto& [name, t] : student.params) t.requires_grad = trainable(name);
  Adam backbone_adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
  Adam tower_adam({cfg.tower_learning_rate, 0.9, 0.999, 1e-8});
  const auto in_backbone = [&](const std::string& name) {
    return cfg.train_backbone && !is_speech_pathway_param(name);
  };
  const auto in_tower = [](const std::string& name) { return is_speech_pathway_param(name); };
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (pool.size() + B - 1) / B;
  std::vector<std::size_t> order;
  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t epoch = static_cast<std::size_t>(step) / per_epoch;
    const std::size_t k = static_cast<std::size_t>(step) % per_epoch;
    if (k == 0) order = permutation(pool.size(), derive_seed(cfg.seed, SeedStream::kGapTraining, {epoch}));
    std::vector<std::pair<Prompt, std::vector<int>>> items;
    for (std::size_t i = k * B; i < std::min(pool.size(), (k + 1) * B); ++i) {
      const auto& e = pool[order[i]];
      items.emplace_back(speech_prompt_of(e), e.reference_answer);
      if (cfg.text_replay && e.family != TaskFamily::kAcoustic) items.emplace_back(text_prompt_of(e), e.reference_answer);
    }
    Graph g;
    Var loss = likelihood_loss(g, &student, nullptr, items);
    if (cfg.align_weight > 0.0) {
      const Tensor& emb = teacher.params.at("tok_emb");
      const std::size_t D = emb.shape[1];
      Var align;
      std::size_t count = 0;
      for (std::size_t i = k * B; i < std::min(pool.size(), (k + 1) * B); ++i) {
        const auto& e = pool[order[i]];
        std::vector<double> target;
        target.reserve(e.text_prompt.size() * D);
        for (int t : e.text_prompt) {
          const auto row = emb.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(t) * D);
          target.insert(target.end(), row, row + static_cast<std::ptrdiff_t>(D));
        }
        Var diff = sub(speech_token_embeddings(g, student, e.speech_prompt),
                       g.constant(Tensor({e.text_prompt.size(), D}, std::move(target))));
        Var term = mean(mul(diff, diff));
        align = count++ == 0 ? term : add(align, term);
      }
      double mean_sq = 0.0;
      for (double v : emb.data) mean_sq += v * v;
      mean_sq /= static_cast<double>(emb.numel());
      loss = add(loss, scale(align, cfg.align_weight / (static_cast<double>(count) * mean_sq)));
    }
    g.backward(loss);
    student.params.zero_grad();
    student.params.accumulate_grads(g);
    if (!std::isfinite(loss.item()) || !all_finite(student.params)) {
      throw TrainingFailure("gap construction diverged at step " + std::to_string(step + 1));
    }
    backbone_adam.step(student.params, in_backbone);
    tower_adam.step(student.params, in_tower);
  }
  for (auto& [_, t] : student.params) {
    t.requires_grad = true;
    t.grad.reset();
  }
  student.tower_frozen = true;

  GapReport rep;
  auto vr = select_family(val, TaskFamily::kReasoning);
  auto vi = select_family(val, TaskFamily::kInstruction);
  auto va = select_family(val, TaskFamily::kAcoustic);
  rep.teacher_text_reasoning = score_model(teacher, vr, Modality::kText, cfg.max_new).accuracy;
  rep.speech_reasoning = score_model(student, vr, Modality::kSpeech, cfg.max_new).accuracy;
  rep.text_reasoning = score_model(student, vr, Modality::kText, cfg.max_new).accuracy;
  rep.speech_instruction = score_model(student, vi, Modality::kSpeech, cfg.max_new).accuracy;
  rep.text_instruction = score_model(student, vi, Modality::kText, cfg.max_new).accuracy;
  rep.acoustic = score_model(student, va, Modality::kSpeech, cfg.max_new).accuracy;
  rep.gap_ok = rep.speech_reasoning < rep.teacher_text_reasoning;
  rep.acoustic_ok = rep.acoustic >= cfg.acoustic_target;
  if (report) *report = rep;
  if (!rep.gap_ok || !rep.acoustic_ok) {
    throw TrainingFailure("gapped student construction failed: speech reasoning " +
                          std::to_string(rep.speech_reasoning) + " vs teacher text " +
                          std::to_string(rep.teacher_text_reasoning) + ", acoustic " +
                          std::to_string(rep.acoustic) + " (target " + std::to_string(cfg.acoustic_target) + ")");
  }
  return student;
}

// ---- exact sequence KL -------------------------------------------------------------------

double exhaustive_sequence_kl(const TeacherModel& teacher, const StudentModel& student,
                              const Prompt& teacher_prompt, const Prompt& student_prompt, int max_new) {
  if (max_new < 1) throw ConfigError("max_new must be >= 1");
  double kl = 0.0;
  std::vector<int> prefix;
  auto rec = [&](auto&& self, double logp_prefix, double log_ratio) -> void {
    Graph g(GradMode::kNoGrad);
    const auto q = log_softmax(next_token_logits(g, student, student_prompt, prefix)).value().data;
    const auto p = log_softmax(next_token_logits(g, teacher, teacher_prompt, prefix)).value().data;
    for (std::size_t v = 0; v < q.size(); ++v) {
      const double lp = logp_prefix + q[v];
      const double lr = log_ratio + q[v] - p[v];
      if (static_cast<int>(v) == vocab::kEos || static_cast<int>(prefix.size()) + 1 == max_new) {
        kl += std::exp(lp) * lr;
      } else {
        prefix.push_back(static_cast<int>(v));
        self(self, lp, lr);
        prefix.pop_back();
      }
    }
  };
  rec(rec, 0.0, 0.0);
  return kl;
}

std::vector<ProbePosition> enumerate_probe(const StudentModel& reference, const Prompt& teacher_prompt,
                                           const Prompt& student_prompt, int max_new) {
  if (max_new < 1) throw ConfigError("max_new must be >= 1");
  std::vector<ProbePosition> out;
  std::vector<int> prefix;
  auto rec = [&](auto&& self, double logp_prefix) -> void {
    out.push_back({teacher_prompt, student_prompt, prefix, std::exp(logp_prefix)});
    if (static_cast<int>(prefix.size()) + 1 >= max_new) return;
    Graph g(GradMode::kNoGrad);
    const auto q = log_softmax(next_token_logits(g, reference, student_prompt, prefix)).value().data;
    for (std::size_t v = 0; v < q.size(); ++v) {
      if (static_cast<int>(v) == vocab::kEos) continue;
      prefix.push_back(static_cast<int>(v));
      self(self, logp_prefix + q[v]);
      prefix.pop_back();
    }
  };
  rec(rec, 0.0);
  return out;
}

double probe_reverse_kl(const TeacherModel& teacher, const StudentModel& student,
                        std::span<const ProbePosition> probe) {
  double kl = 0.0;
  for (const auto& pos : probe) {
    kl += pos.weight * next_token_reverse_kl(teacher, pos.teacher_prompt, student, pos.student_prompt, pos.prefix);
  }
  return kl;
}

}  // namespace xopd
