// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"
#include "xopd/errors.hpp"
#include "xopd/eval.hpp"

using namespace xopd;
using namespace xopd::testing;

namespace {

EvalReport report(const std::string& id, std::vector<std::pair<TaskFamily, std::pair<double, double>>> rows) {
  EvalReport r;
  r.model_id = id;
  for (const auto& [f, st] : rows) {
    r.accuracy[f][Modality::kSpeech] = st.first;
    r.accuracy[f][Modality::kText] = st.second;
    r.n_eval[f] = 500;
  }
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("hand-scored five-example split") {
  TeacherModel t = init_teacher(tiny_config(6), 1);
  StudentModel s = init_student_from_teacher(t, tiny_config(6), 2);
  force_constant_output(s, 5);
  force_constant_output(t, 5);
  auto xs = toy_examples(5);
  xs[0].reference_answer = {5};
  xs[1].reference_answer = {4};
  xs[2].reference_answer = {5};
  xs[3].reference_answer = {5, 5};
  xs[4].reference_answer = {4};
  auto r = score_model(s, xs, Modality::kSpeech, 1);
  CHECK(r.accuracy == Catch::Approx(0.4));
  CHECK(r.correct == std::vector<bool>{true, false, true, false, false});
  CHECK(score_model(s, xs, Modality::kSpeech, 2).accuracy == Catch::Approx(0.2));
  CHECK(score_model(t, xs, Modality::kText, 1).accuracy == Catch::Approx(0.4));
  CHECK_THROWS_AS(score_model(t, xs, Modality::kSpeech, 1), ModalityError);
}

TEST_CASE("scoring is deterministic and leaves parameters unchanged") {
  TeacherModel t = init_teacher(tiny_config(6), 3);
  randomize(t.params, 3);
  StudentModel s = init_student_from_teacher(t, tiny_config(6), 4);
  randomize(s.params, 5);
  auto xs = toy_examples(20);
  const auto h = param_hash(s.params);
  EvalConfig cfg;
  cfg.families = {TaskFamily::kReasoning, TaskFamily::kInstruction};
  cfg.max_new = 3;
  auto a = evaluate_student(s, xs, cfg, "s");
  auto b = evaluate_student(s, xs, cfg, "s");
  CHECK(to_json(a) == to_json(b));
  CHECK(param_hash(s.params) == h);
  CHECK(a.n_eval.at(TaskFamily::kReasoning) == 10);
  auto tr = evaluate_teacher(t, xs, cfg, "t");
  CHECK(!tr.score(TaskFamily::kReasoning, Modality::kSpeech).has_value());
  CHECK(tr.score(TaskFamily::kReasoning, Modality::kText).has_value());
}

TEST_CASE("avg drop hand arithmetic") {
  const std::vector<TaskFamily> fams{TaskFamily::kReasoning, TaskFamily::kInstruction, TaskFamily::kAcoustic};
  auto base = report("base", {{TaskFamily::kReasoning, {0.80, 0.80}},
                              {TaskFamily::kInstruction, {0.90, 0.90}},
                              {TaskFamily::kAcoustic, {0.70, 0.70}}});
  auto model = report("m", {{TaskFamily::kReasoning, {0.72, 0.80}},
                            {TaskFamily::kInstruction, {0.81, 0.90}},
                            {TaskFamily::kAcoustic, {0.63, 0.70}}});
  auto d = avg_drop(model, base, fams);
  CHECK(d.speech == Catch::Approx(10.0).epsilon(1e-12));
  CHECK(d.text == Catch::Approx(0.0).margin(1e-12));
  auto self = avg_drop(base, base, fams);
  CHECK(self.speech == Catch::Approx(0.0).margin(1e-12));
  CHECK(self.text == Catch::Approx(0.0).margin(1e-12));

  auto better = report("b", {{TaskFamily::kReasoning, {0.88, 0.88}},
                             {TaskFamily::kInstruction, {0.99, 0.99}},
                             {TaskFamily::kAcoustic, {0.77, 0.77}}});
  CHECK(avg_drop(better, base, fams).speech == Catch::Approx(-10.0).epsilon(1e-12));
}

TEST_CASE("avg drop against the matching modality and exclusions") {
  const std::vector<TaskFamily> fams{TaskFamily::kReasoning, TaskFamily::kInstruction};
  auto base = report("base", {{TaskFamily::kReasoning, {0.5, 1.0}}, {TaskFamily::kInstruction, {0.0, 0.5}}});
  auto model = report("m", {{TaskFamily::kReasoning, {0.25, 0.5}}, {TaskFamily::kInstruction, {0.5, 0.5}}});
  auto txt = avg_drop(model, base, fams, DropReference::kBaseText);
  CHECK(txt.speech == Catch::Approx((75.0 + 0.0) / 2.0));
  CHECK(txt.text == Catch::Approx((50.0 + 0.0) / 2.0));
  auto mm = avg_drop(model, base, fams, DropReference::kMatchingModality);
  CHECK(mm.excluded == std::vector<std::string>{to_string(TaskFamily::kInstruction)});
  CHECK(mm.speech == Catch::Approx(50.0));

  attach_avg_drop(model, base, fams);
  CHECK(model.drop_base_id == "base");
  auto back = eval_report_from_json(to_json(model));
  CHECK(to_json(back) == to_json(model));
}

TEST_CASE("avg drop rejects mismatched families") {
  const std::vector<TaskFamily> fams{TaskFamily::kReasoning, TaskFamily::kInstruction};
  auto base = report("base", {{TaskFamily::kReasoning, {0.5, 1.0}}});
  auto model = report("m", {{TaskFamily::kReasoning, {0.25, 0.5}}, {TaskFamily::kInstruction, {0.5, 0.5}}});
  CHECK_THROWS_AS(avg_drop(model, base, fams), ReportError);
  auto zero = report("z", {{TaskFamily::kReasoning, {0.0, 0.0}}, {TaskFamily::kInstruction, {0.0, 0.0}}});
  CHECK_THROWS_AS(avg_drop(model, zero, fams), ReportError);
  CHECK_THROWS_AS(eval_report_from_json(nlohmann::json{{"accuracy", 1}}), ReportError);
}

TEST_CASE("forgetting eval of an untouched student is zero") {
  TeacherModel t = init_teacher(tiny_config(6), 7);
  StudentModel s = init_student_from_teacher(t, tiny_config(6), 8);
  force_constant_output(s, 4);
  auto xs = toy_examples(6);
  for (auto& e : xs) {
    e.family = TaskFamily::kAcoustic;
    e.reference_answer = {4};
  }
  auto r = forgetting_eval(s, s, xs, 1);
  CHECK(r.before == 1.0);
  CHECK(r.drop == 0.0);
  CHECK(!r.flagged);
  StudentModel broken = s;
  force_constant_output(broken, 5);
  auto r2 = forgetting_eval(broken, s, xs, 1);
  CHECK(r2.drop == Catch::Approx(100.0));
  CHECK(r2.flagged);
}

TEST_CASE("table and curve writers") {
  const auto dir = std::filesystem::temp_directory_path() / "xopd_eval_writers";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const std::vector<TaskFamily> fams{TaskFamily::kReasoning, TaskFamily::kInstruction};
  auto base = report("base", {{TaskFamily::kReasoning, {0.5, 1.0}}, {TaskFamily::kInstruction, {0.4, 0.5}}});
  auto model = report("m", {{TaskFamily::kReasoning, {0.25, 0.5}}, {TaskFamily::kInstruction, {0.5, 0.5}}});
  attach_avg_drop(model, base, fams);
  write_modality_table_csv(dir / "t.csv", {base, model}, fams);
  const auto csv = slurp(dir / "t.csv");
  CHECK(csv.find("model") == 0);
  CHECK(csv.find("reasoning_S") != std::string::npos);
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  CHECK(lines == 3);

  std::vector<CurveSeries> series{{"loss", {1, 2, 3}, {0.5, 0.4, 0.2}}, {"kl", {1, 2, 3}, {1.0, 0.7, 0.6}}};
  write_curves_csv(dir / "c.csv", series);
  write_curves_svg(dir / "c.svg", "curves", "step", "value", series);
  const auto svg = slurp(dir / "c.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
  std::filesystem::remove_all(dir);
}
