// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exact-match scoring, modality reports, Avg. Drop, ACOUSTIC retention and
// table/curve emitters.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/corpus.hpp"
#include "xopd/model.hpp"

namespace xopd {

struct ScoreResult {
  double accuracy = 0.0;
  std::vector<bool> correct;
};

// Greedy decode per example, exact token match against the reference.
ScoreResult score_model(const TeacherModel& m, std::span<const PairedExample> split, Modality modality,
                        int max_new);
ScoreResult score_model(const StudentModel& m, std::span<const PairedExample> split, Modality modality,
                        int max_new);

// Examples of one family (optionally capped at `limit`, keeping file order).
std::vector<PairedExample> select_family(std::span<const PairedExample> xs, TaskFamily f,
                                         std::size_t limit = 0);

struct RetentionRecord {
  double before = 0.0;  // ACOUSTIC accuracy of the pre-method student
  double after = 0.0;
  double drop = 0.0;    // (before - after) * 100, points lost
  bool flagged = false;
};

nlohmann::json to_json(const RetentionRecord& r);

struct EvalReport {
  std::string model_id;
  std::string role;  // "teacher" or "student"
  std::map<TaskFamily, std::map<Modality, double>> accuracy;
  std::map<TaskFamily, int> n_eval;
  std::uint64_t seed = 0;
  std::optional<double> avg_drop_speech;
  std::optional<double> avg_drop_text;
  std::string drop_base_id;
  std::vector<std::string> drop_excluded_families;
  std::optional<RetentionRecord> acoustic;

  std::optional<double> score(TaskFamily f, Modality m) const;
};

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

struct EvalConfig {
  std::vector<TaskFamily> families{TaskFamily::kReasoning, TaskFamily::kInstruction, TaskFamily::kAcoustic};
  std::size_t per_family = 500;
  int max_new = 8;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

EvalReport evaluate_teacher(const TeacherModel& m, std::span<const PairedExample> test, const EvalConfig& cfg,
                            const std::string& model_id);
EvalReport evaluate_student(const StudentModel& m, std::span<const PairedExample> test, const EvalConfig& cfg,
                            const std::string& model_id);

// Which base score each modality column is compared against.
enum class DropReference {
  kBaseText,          // both columns against the base model's text scores
  kMatchingModality,  // speech against base speech, text against base text
};

struct AvgDrop {
  double speech = 0.0;
  double text = 0.0;
  std::vector<std::string> excluded;  // families with a zero base score
};

// Mean over `families` of (base - model) / base * 100. Throws ReportError when
// a family is missing from either report.
AvgDrop avg_drop(const EvalReport& model, const EvalReport& base, std::span<const TaskFamily> families,
                 DropReference ref = DropReference::kBaseText);

// Fills avg_drop_* and drop_base_id of `model` in place.
void attach_avg_drop(EvalReport& model, const EvalReport& base, std::span<const TaskFamily> families,
                     DropReference ref = DropReference::kBaseText);

RetentionRecord forgetting_eval(const StudentModel& after, const StudentModel& before,
                                std::span<const PairedExample> acoustic_split, int max_new,
                                double flag_threshold_points = 5.0);

// Table writers. Rows keep the given order.
void write_modality_table_csv(const std::filesystem::path& path, const std::vector<EvalReport>& rows,
                              std::span<const TaskFamily> families);

struct CurveSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

void write_curves_csv(const std::filesystem::path& path, const std::vector<CurveSeries>& series);
// Self-contained SVG line plot.
void write_curves_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                      const std::string& y_label, const std::vector<CurveSeries>& series);

}  // namespace xopd
