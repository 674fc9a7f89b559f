// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Optimisation loops: teacher pretraining, construction of the gapped base
// student, and the alignment methods (X-OPD and the three baselines).

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/corpus.hpp"
#include "xopd/model.hpp"
#include "xopd/rollout.hpp"
#include "xopd/xopd.hpp"

namespace xopd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled decay, scaled by lr, on tensors of rank >= 2 only.
  double weight_decay = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // One bias-corrected update of every selected parameter that holds a
  // gradient. Unselected parameters are never written.
  void step(ParamSet& params, const std::function<bool(const std::string&)>& trainable = {});
  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

enum class Method { kXopd, kSft, kOfflineKd, kGkd };

std::string to_string(Method m);
// Throws UsageError listing the valid names.
Method method_from_string(const std::string& s);

struct TrainConfig {
  Method method = Method::kXopd;
  double lambda = 0.5;
  int n_rollouts = 4;
  double learning_rate = 1e-3;
  int batch_size = 32;
  int steps = 0;   // 0: epochs over the dataset
  int epochs = 1;
  bool freeze_tower = true;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double temperature = 1.0;
  int max_new = 8;
  bool clip = false;
  double clip_eps = 0.2;
  int mini_epochs = 1;
  int checkpoint_every = 0;  // 0: final checkpoint only
  int workers = 1;
  bool sft_text_conditioned = false;
  bool dump_trajectories = false;

  void validate() const;
  int resolved_steps(std::size_t dataset_size) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Values the desk defaults replace; recorded in every run for provenance.
nlohmann::json reference_hyperparameters();

// Build identification baked in at configure time.
std::string build_describe();

struct RunResult {
  StudentModel student;
  std::vector<nlohmann::json> metrics;
  std::string initial_hash;
  std::string final_hash;
  std::string tower_hash;
  long text_rollouts = 0;
  long speech_rollouts = 0;
};

// Trains a copy of `student` with the configured method. When `run_dir` is
// given, writes config.json, metrics.jsonl, timing.jsonl, checkpoints/ and
// manifest.json there. `extra_manifest` is merged into manifest.json.
// Throws TrainingFailure on a non-finite loss or gradient, or when a frozen
// parameter changes.
RunResult run_method(const TrainConfig& cfg, const StudentModel& student, const TeacherModel& teacher,
                     std::span<const PairedExample> dataset,
                     const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                     const nlohmann::json& extra_manifest = nlohmann::json::object());

struct TeacherPretrainConfig {
  ModelConfig model;
  int max_steps = 60000;
  int batch_size = 32;
  // Peak rate: linear warmup over warmup_steps, then linear decay to 10% at max_steps.
  double learning_rate = 1e-3;
  int warmup_steps = 300;
  double weight_decay = 1.0;
  // Share of reasoning prompts in each batch; the rest are instruction prompts.
  double reasoning_fraction = 0.9;
  int eval_every = 250;
  // Stop once every family reaches its target on the validation prompts.
  double reasoning_target = 0.95;
  double instruction_target = 0.95;
  int max_difficulty = 2;
  std::uint64_t seed = 0;
  int max_new = 8;

  void validate() const;
};

void to_json(nlohmann::json& j, const TeacherPretrainConfig& c);
void from_json(const nlohmann::json& j, TeacherPretrainConfig& c);

struct TeacherReport {
  int steps = 0;
  double reasoning_accuracy = 0.0;
  double instruction_accuracy = 0.0;
  bool reached_target = false;
  std::vector<nlohmann::json> curve;
};

nlohmann::json to_json(const TeacherReport& r);

// Trains the text teacher on a freshly generated stream of text tasks whose
// prompt keys avoid `excluded`. Throws TrainingFailure (with the measured
// accuracies) when the targets are not met within max_steps.
TeacherModel pretrain_teacher(const TeacherPretrainConfig& cfg, const std::set<std::string>& excluded,
                              std::span<const PairedExample> val, TeacherReport* report = nullptr);

struct GapConfig {
  int steps = 600;
  int batch_size = 32;
  // Backbone rate; the freshly initialised speech tower and adapter use
  // tower_learning_rate.
  double learning_rate = 1e-4;
  double tower_learning_rate = 1e-3;
  // Number of REASONING and INSTRUCTION speech examples drawn from the gap
  // split (the rest of the gap split's alignment families is ignored).
  int speech_examples = 300;
  bool train_backbone = true;
  // Each REASONING or INSTRUCTION speech item in a batch is joined by its
  // text-conditioned twin, which limits drift of the text pathway.
  bool text_replay = true;
  // Weight of a squared-error term pulling each token's adapter output
  // towards the teacher's embedding of the paired text token. The error is
  // divided by the mean square of the teacher's embedding table.
  double align_weight = 1.0;
  double acoustic_target = 0.9;
  std::uint64_t seed = 0;
  int max_new = 8;

  void validate() const;
};

void to_json(nlohmann::json& j, const GapConfig& c);
void from_json(const nlohmann::json& j, GapConfig& c);

struct GapReport {
  double teacher_text_reasoning = 0.0;
  double speech_reasoning = 0.0;
  double text_reasoning = 0.0;
  double speech_instruction = 0.0;
  double text_instruction = 0.0;
  double acoustic = 0.0;
  bool gap_ok = false;
  bool acoustic_ok = false;
};

nlohmann::json to_json(const GapReport& r);

// Initialises a student from the teacher and trains the speech pathway (and,
// when configured, the backbone) on a small speech subset plus the ACOUSTIC
// task. Throws TrainingFailure with the measured numbers when the result
// shows no modality gap or misses the ACOUSTIC target.
StudentModel build_gapped_student(const TeacherModel& teacher, const ModelConfig& student_cfg,
                                  const GapConfig& cfg, std::span<const PairedExample> gap_split,
                                  std::span<const PairedExample> val, GapReport* report = nullptr);

// Exact reverse KL of the student's completion distribution to the teacher's,
// enumerating every sequence up to max_new tokens (EOS terminates). Only
// usable for tiny vocabularies.
double exhaustive_sequence_kl(const TeacherModel& teacher, const StudentModel& student,
                              const Prompt& teacher_prompt, const Prompt& student_prompt, int max_new);

// One context of a frozen KL probe: the next-token distributions after
// `prefix`, weighted by the prefix probability under a reference student.
struct ProbePosition {
  Prompt teacher_prompt;
  Prompt student_prompt;
  std::vector<int> prefix;
  double weight = 0.0;
};

// Every unterminated prefix shorter than max_new, weighted by `reference`.
std::vector<ProbePosition> enumerate_probe(const StudentModel& reference, const Prompt& teacher_prompt,
                                           const Prompt& student_prompt, int max_new);

// sum_k weight_k * KL(student(.|prefix_k) || teacher(.|prefix_k)), full vocabulary.
// With `reference` equal to `student` this equals exhaustive_sequence_kl.
double probe_reverse_kl(const TeacherModel& teacher, const StudentModel& student,
                        std::span<const ProbePosition> probe);

}  // namespace xopd
