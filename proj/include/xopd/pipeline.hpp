// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment driver: dataset, teacher, gapped student, every
// method, evaluation and the comparison tables.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/corpus.hpp"
#include "xopd/eval.hpp"
#include "xopd/trainer.hpp"

namespace xopd {

struct PipelineConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  // Dataset shape; its seed is replaced by each pipeline seed.
  DatasetSpec dataset = DatasetSpec::defaults(0);
  CodecConfig codec;
  TeacherPretrainConfig teacher;
  // Optional larger teacher for the capacity row of the ablation table.
  std::optional<TeacherPretrainConfig> big_teacher;
  GapConfig gap;
  // Shared method settings; method and lambda are set per run. The backbone
  // rate is lowered from the TrainConfig default because the teacher's
  // weight-decayed parameters are small and 1e-3 Adam steps erase both the
  // text skills and the ACOUSTIC skill within one epoch.
  TrainConfig train = [] {
    TrainConfig t;
    t.learning_rate = 3e-5;
    return t;
  }();
  std::vector<double> lambdas{0.0, 0.5, 1.0};
  EvalConfig eval;
  double forgetting_threshold = 5.0;
  int workers = 1;
  // Where trained teachers are cached; empty disables caching.
  std::filesystem::path teacher_cache;

  static PipelineConfig defaults();
  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

// Trains the teacher, or loads it from `cache_dir` when a checkpoint trained
// with the same configuration and exclusion set is there.
TeacherModel obtain_teacher(const TeacherPretrainConfig& cfg, const std::set<std::string>& excluded,
                            std::span<const PairedExample> val, const std::filesystem::path& cache_dir,
                            TeacherReport* report = nullptr);

struct MethodOutcome {
  std::string tag;  // e.g. "xopd_l0.5", "sft"
  Method method = Method::kXopd;
  double lambda = 0.5;
  std::string teacher_id;
  EvalReport report;
  RetentionRecord retention;
  std::string final_hash;
  long text_rollouts = 0;
  long speech_rollouts = 0;
  CurveSeries loss_curve;
  // Sampled reverse-KL estimate per step; empty for methods without rollouts.
  CurveSeries kl_curve;
  double wall_seconds = 0.0;
  std::optional<std::string> failure;
};

nlohmann::json to_json(const MethodOutcome& m);

struct SeedOutcome {
  std::uint64_t seed = 0;
  EvalReport teacher;
  EvalReport base;
  GapReport gap;
  std::vector<MethodOutcome> methods;
  std::optional<std::string> failure;  // set when the seed could not be run

  const MethodOutcome* find(const std::string& tag) const;
};

nlohmann::json to_json(const SeedOutcome& s);

// Checks of the three directional trends on one seed.
struct TrendCheck {
  bool gap_narrowing = false;
  bool forgetting = false;
  bool sft_degrades_text = false;
  std::vector<std::string> notes;
};

TrendCheck check_trends(const SeedOutcome& s, const std::string& xopd_tag = "xopd_l0.5");

struct PipelineOutcome {
  std::vector<SeedOutcome> seeds;
  std::vector<TrendCheck> trends;
  int gap_narrowing_passes = 0;
  int forgetting_passes = 0;
  int sft_degradation_passes = 0;
  // One entry per trend that failed to reproduce on a majority of seeds.
  std::vector<nlohmann::json> deviations;
};

// The dataset of one pipeline seed (codec seed derived from it).
Dataset pipeline_dataset(const PipelineConfig& cfg, std::uint64_t seed);

struct TeacherBundle {
  TeacherModel teacher;
  TeacherReport report;
  std::optional<TeacherModel> big;
  std::optional<TeacherReport> big_report;
};

// Trains (or loads from cfg.teacher_cache) the teacher shared by all of
// cfg.seeds. Its training stream excludes the val and test prompts of every
// seed's dataset; validation uses the first seed's val split.
TeacherBundle prepare_teachers(const PipelineConfig& cfg);

// Families entering the Avg. Drop columns. ACOUSTIC is left out because the
// text teacher cannot see the label.
std::vector<TaskFamily> drop_families();

// Runs one seed. Writes dataset/, student/, runs/<tag>/ and reports/ under `dir`.
SeedOutcome run_seed(const PipelineConfig& cfg, std::uint64_t seed, const TeacherModel& teacher,
                     const std::optional<TeacherModel>& big_teacher, const std::filesystem::path& dir);

// Every seed, followed by table1.csv, table2.csv, table3.csv, curves and
// summary.json in `out`.
PipelineOutcome reproduce_trends(const PipelineConfig& cfg, const std::filesystem::path& out);

}  // namespace xopd
