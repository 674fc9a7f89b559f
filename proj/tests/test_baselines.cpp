// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>

#include "test_support.hpp"
#include "xopd/baselines.hpp"
#include "xopd/errors.hpp"
#include "xopd/eval.hpp"
#include "xopd/trainer.hpp"
#include "xopd/vocab.hpp"

using namespace xopd;
using namespace xopd::testing;

namespace {

std::vector<double> log_softmax_row(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  std::vector<double> out;
  for (double v : z) out.push_back(v - mx - std::log(s));
  return out;
}

std::vector<double> logits_at(const StudentModel& m, const Prompt& p, std::span<const int> prefix) {
  Graph g(GradMode::kNoGrad);
  return next_token_logits(g, m, p, prefix).value().data;
}

std::vector<double> logits_at(const TeacherModel& m, const Prompt& p, std::span<const int> prefix) {
  Graph g(GradMode::kNoGrad);
  return next_token_logits(g, m, p, prefix).value().data;
}

struct Pair {
  TeacherModel teacher;
  StudentModel student;
};

Pair toy_pair(std::uint64_t seed, int V) {
  Pair p;
  p.teacher = init_teacher(tiny_config(V), seed);
  randomize(p.teacher.params, seed);
  p.student = init_student_from_teacher(p.teacher, tiny_config(V), seed + 1);
  randomize(p.student.params, seed + 2);
  return p;
}

}  // namespace

TEST_CASE("SFT loss of a uniform student is ln V per token") {
  ModelConfig cfg = tiny_config(64);
  TeacherModel t = init_teacher(cfg, 1);  // zero head: uniform output
  StudentModel s = init_student_from_teacher(t, cfg, 2);
  auto xs = toy_examples(3, 64);
  for (const auto& e : xs) {
    Graph g;
    CHECK(sft_loss(g, s, e).item() == Catch::Approx(std::log(64.0)).epsilon(1e-12));
  }
}

TEST_CASE("SFT loss matches a hand-computed cross-entropy") {
  auto p = toy_pair(3, 6);
  PairedExample e = toy_examples(1)[0];
  e.reference_answer = {5, 4};
  const std::vector<int> y{5, 4, vocab::kEos};
  double nll = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    std::vector<int> prefix(y.begin(), y.begin() + static_cast<long>(t));
    nll -= log_softmax_row(logits_at(p.student, speech_prompt_of(e), prefix))[static_cast<std::size_t>(y[t])];
  }
  Graph g;
  CHECK(sft_loss(g, p.student, e).item() == Catch::Approx(nll / 3.0).epsilon(1e-12));
  Graph g2;
  double nll_text = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    std::vector<int> prefix(y.begin(), y.begin() + static_cast<long>(t));
    nll_text -= log_softmax_row(logits_at(p.student, text_prompt_of(e), prefix))[static_cast<std::size_t>(y[t])];
  }
  CHECK(sft_loss(g2, p.student, e, false).item() == Catch::Approx(nll_text / 3.0).epsilon(1e-12));
}

TEST_CASE("SFT loss approaches zero for a near-certain student") {
  auto p = toy_pair(4, 6);
  force_constant_output(p.student, vocab::kEos);
  PairedExample e = toy_examples(1)[0];
  e.reference_answer = {vocab::kEos};
  Graph g;
  CHECK(sft_loss(g, p.student, e).item() < 1e-40);
  e.reference_answer.clear();
  Graph g2;
  CHECK_THROWS_AS(sft_loss(g2, p.student, e), DataError);
}

TEST_CASE("offline KD targets are the teacher's greedy answers") {
  auto p = toy_pair(5, 6);
  auto xs = toy_examples(6);
  auto d1 = offline_kd_build(p.teacher, xs, 3, "teacher:abc");
  auto d2 = offline_kd_build(p.teacher, xs, 3, "teacher:abc");
  REQUIRE(d1.size() == xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(d1[i].reference_answer == greedy_answer(p.teacher, text_prompt_of(xs[i]), 3));
    CHECK(d1[i].speech_prompt == xs[i].speech_prompt);
    CHECK(d1[i].provenance == "teacher:abc");
    CHECK(nlohmann::json(d1[i]).dump() == nlohmann::json(d2[i]).dump());
  }

  // A teacher that always answers correctly reproduces the references.
  TeacherModel perfect = p.teacher;
  force_constant_output(perfect, 5);
  for (auto& e : xs) e.reference_answer = {5};
  for (const auto& d : offline_kd_build(perfect, xs, 1, "perfect")) CHECK(d.reference_answer == std::vector<int>{5});
}

TEST_CASE("a deliberately wrong teacher's targets are fitted by the student") {
  auto p = toy_pair(6, 6);
  TeacherModel wrong = p.teacher;
  force_constant_output(wrong, 5);
  auto xs = toy_examples(8);
  for (auto& e : xs) e.reference_answer = {4};
  TrainConfig cfg;
  cfg.method = Method::kOfflineKd;
  cfg.max_new = 2;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  cfg.steps = 150;
  cfg.freeze_tower = false;
  auto res = run_method(cfg, p.student, wrong, xs);
  auto score = score_model(res.student, xs, Modality::kSpeech, 2);
  CHECK(score.accuracy == 0.0);
  for (const auto& e : xs) {
    CHECK(greedy_answer(res.student, speech_prompt_of(e), 2) == std::vector<int>{5, 5});
  }
}

TEST_CASE("GKD loss matches the closed-form forward KL") {
  auto p = toy_pair(7, 5);
  PairedExample e = toy_examples(1, 5)[0];
  Trajectory tr;
  tr.modality = Modality::kSpeech;
  tr.tokens = {4, 2};
  tr.logp_old = completion_log_probs(p.student, speech_prompt_of(e), tr.tokens);
  double expect = 0.0;
  for (std::size_t t = 0; t < tr.tokens.size(); ++t) {
    std::vector<int> prefix(tr.tokens.begin(), tr.tokens.begin() + static_cast<long>(t));
    const auto lp = log_softmax_row(logits_at(p.teacher, text_prompt_of(e), prefix));
    const auto lq = log_softmax_row(logits_at(p.student, speech_prompt_of(e), prefix));
    for (std::size_t v = 0; v < lp.size(); ++v) expect += std::exp(lp[v]) * (lp[v] - lq[v]);
  }
  Graph g;
  const double got = gkd_loss(g, p.teacher, p.student, tr, e).item();
  CHECK(got == Catch::Approx(expect / 2.0).epsilon(1e-12));
  CHECK(got > 0.0);
}

TEST_CASE("GKD with a one-hot teacher reduces to the student's negative log-probability") {
  auto p = toy_pair(8, 6);
  force_constant_output(p.teacher, 4);
  PairedExample e = toy_examples(1)[0];
  Trajectory tr;
  tr.modality = Modality::kSpeech;
  tr.tokens = {5};
  tr.logp_old = {0.0};
  const double lq = log_softmax_row(logits_at(p.student, speech_prompt_of(e), {}))[4];
  Graph g;
  CHECK(gkd_loss(g, p.teacher, p.student, tr, e).item() == Catch::Approx(-lq).epsilon(1e-9));
}

TEST_CASE("GKD loss is zero for identical distributions and never negative") {
  ModelConfig cfg = tiny_config(6);
  cfg.speech_vocab_size = 6;
  cfg.speech_embed_dim = cfg.embed_dim;
  TeacherModel t = init_teacher(cfg, 4);
  randomize(t.params, 11);
  StudentModel s = init_student_from_teacher(t, cfg, 5);
  s.params.at("speech_tower.embedding").data = t.params.at("tok_emb").data;
  auto& w = s.params.at("adapter.weight");
  std::fill(w.data.begin(), w.data.end(), 0.0);
  for (int i = 0; i < cfg.embed_dim; ++i) w.data[static_cast<std::size_t>(i * cfg.embed_dim + i)] = 1.0;
  PairedExample e;
  e.text_prompt = {4, 5};
  e.speech_prompt = e.text_prompt;
  Trajectory tr;
  tr.modality = Modality::kSpeech;
  tr.tokens = {5, 4, 2};
  tr.logp_old = {0, 0, 0};
  Graph g;
  CHECK(gkd_loss(g, t, s, tr, e).item() == Catch::Approx(0.0).margin(1e-12));

  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    auto p = toy_pair(seed, 6);
    Graph g2;
    CHECK(gkd_loss(g2, p.teacher, p.student, tr, toy_examples(1, 6, seed)[0]).item() >= 0.0);
  }
}

TEST_CASE("GKD rejects mismatched vocabularies") {
  auto p = toy_pair(9, 6);
  TeacherModel other = init_teacher(tiny_config(7), 1);
  Trajectory tr;
  tr.modality = Modality::kSpeech;
  tr.tokens = {4};
  tr.logp_old = {0.0};
  Graph g;
  CHECK_THROWS_AS(gkd_loss(g, other, p.student, tr, toy_examples(1)[0]), ConfigError);
}

TEST_CASE("SFT training ignores the rollout stream") {
  auto p = toy_pair(10, 6);
  auto xs = toy_examples(8);
  TrainConfig cfg;
  cfg.method = Method::kSft;
  cfg.batch_size = 8;
  cfg.steps = 3;
  auto a = run_method(cfg, p.student, p.teacher, xs);
  CHECK(a.speech_rollouts == 0);
  CHECK(a.text_rollouts == 0);
  cfg.method = Method::kGkd;
  auto b = run_method(cfg, p.student, p.teacher, xs);
  CHECK(b.text_rollouts == 0);
  CHECK(b.speech_rollouts == 3 * 8 * 4);
}
