// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "test_support.hpp"
#include "xopd/errors.hpp"
#include "xopd/rollout.hpp"
#include "xopd/trainer.hpp"
#include "xopd/vocab.hpp"
#include "xopd/xopd.hpp"

using namespace xopd;
using namespace xopd::testing;


TEST_CASE("advantage table is an exact per-token subtraction") {
  auto t = make_advantage_table(Modality::kText, {-0.5, -2.0}, {-1.2, -0.25});
  CHECK(t.a_values[0] == -0.5 - -1.2);
  CHECK(t.a_values[0] == Catch::Approx(0.7).epsilon(1e-15));
  CHECK(t.a_values[1] == -2.0 - -0.25);
  CHECK_THROWS_AS(make_advantage_table(Modality::kText, {-1.0}, {}), ShapeError);
}

TEST_CASE("in-modal advantage vanishes when the student equals the teacher") {
  Toy toy = make_toy(3, 6, true);
  RolloutConfig rc;
  rc.n = 16;
  rc.max_new = 4;
  auto b = collect_rollouts(toy.student, std::span(&toy.example, 1), rc, 11);
  for (const auto& tr : b.text[0]) {
    auto a = in_modal_advantage(toy.teacher, toy.student, tr, toy.example.text_prompt);
    for (double v : a.a_values) CHECK(v == 0.0);
  }
  Graph g;
  XopdConfig cfg;
  cfg.lambda = 1.0;
  auto xl = xopd_loss(g, b, std::span(&toy.example, 1), toy.teacher, toy.student, cfg);
  CHECK(xl.report.loss_im == 0.0);
  g.backward(xl.objective);
  toy.student.params.zero_grad();
  toy.student.params.accumulate_grads(g);
  CHECK(norm(flat_grad(toy.student.params)) == 0.0);
}

TEST_CASE("advantages match a straight-line softmax recomputation") {
  Toy toy = make_toy(5, 4);
  toy.example.text_prompt = {3, 1};
  const std::vector<int> y{3, 0};
  Trajectory tr = fixed_traj(toy.student, text_prompt_of(toy.example), y);
  auto a = in_modal_advantage(toy.teacher, toy.student, tr, toy.example.text_prompt);
  for (std::size_t t = 0; t < y.size(); ++t) {
    std::vector<int> prefix(y.begin(), y.begin() + static_cast<long>(t));
    Graph g(GradMode::kNoGrad);
    auto lp = [&](Var logits) {
      const auto& z = logits.value().data;
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double s = 0.0;
      for (double v : z) s += std::exp(v - mx);
      return z[static_cast<std::size_t>(y[t])] - mx - std::log(s);
    };
    const double tlp = lp(next_token_logits(g, toy.teacher, text_prompt_of(toy.example), prefix));
    const double slp = lp(next_token_logits(g, toy.student, text_prompt_of(toy.example), prefix));
    CHECK(a.teacher_logp[t] == Catch::Approx(tlp).margin(1e-12));
    CHECK(a.student_logp[t] == Catch::Approx(slp).margin(1e-12));
    CHECK(a.a_values[t] == a.teacher_logp[t] - a.student_logp[t]);
  }

  Trajectory sp = fixed_traj(toy.student, speech_prompt_of(toy.example), y);
  auto c = cross_modal_advantage(toy.teacher, toy.student, sp, toy.example);
  const auto tl = completion_log_probs(toy.teacher, text_prompt_of(toy.example), y);
  const auto sl = completion_log_probs(toy.student, speech_prompt_of(toy.example), y);
  for (std::size_t t = 0; t < y.size(); ++t) CHECK(c.a_values[t] == tl[t] - sl[t]);
}

TEST_CASE("cross-modal advantage is zero for an identity speech pathway") {
  ModelConfig cfg = tiny_config(6);
  cfg.speech_vocab_size = 6;
  cfg.speech_embed_dim = cfg.embed_dim;
  TeacherModel teacher = init_teacher(cfg, 4);
  randomize(teacher.params, 9);
  StudentModel student = init_student_from_teacher(teacher, cfg, 5);
  student.params.at("speech_tower.embedding").data = teacher.params.at("tok_emb").data;
  auto& w = student.params.at("adapter.weight");
  std::fill(w.data.begin(), w.data.end(), 0.0);
  for (int i = 0; i < cfg.embed_dim; ++i) w.data[static_cast<std::size_t>(i * cfg.embed_dim + i)] = 1.0;

  PairedExample ex;
  ex.id = 0;
  ex.text_prompt = {4, 5, 4};
  ex.speech_prompt = ex.text_prompt;
  Trajectory tr = fixed_traj(student, speech_prompt_of(ex), {5, 4, 2});
  for (double v : cross_modal_advantage(teacher, student, tr, ex).a_values) CHECK(v == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("cross-modal advantage approaches ln V for a certain teacher and a uniform student") {
  Toy toy = make_toy(2, 6);
  auto& hw = toy.teacher.params.at("head.weight");
  std::fill(hw.data.begin(), hw.data.end(), 0.0);
  auto& hb = toy.teacher.params.at("head.bias");
  std::fill(hb.data.begin(), hb.data.end(), -60.0);
  hb.data[4] = 60.0;
  for (auto* name : {"head.weight", "head.bias"}) {
    auto& t = toy.student.params.at(name);
    std::fill(t.data.begin(), t.data.end(), 0.0);
  }
  Trajectory tr = fixed_traj(toy.student, speech_prompt_of(toy.example), {4, 4});
  for (double v : cross_modal_advantage(toy.teacher, toy.student, tr, toy.example).a_values) {
    CHECK(v == Catch::Approx(std::log(6.0)).margin(1e-12));
  }
}

TEST_CASE("advantage operations reject misuse") {
  Toy toy = make_toy(1, 6);
  Trajectory text = fixed_traj(toy.student, text_prompt_of(toy.example), {4});
  Trajectory speech = fixed_traj(toy.student, speech_prompt_of(toy.example), {4});
  CHECK_THROWS_AS(in_modal_advantage(toy.teacher, toy.student, speech, toy.example.text_prompt), UsageError);
  CHECK_THROWS_AS(cross_modal_advantage(toy.teacher, toy.student, text, toy.example), UsageError);
  PairedExample no_text = toy.example;
  no_text.text_prompt.clear();
  CHECK_THROWS_AS(cross_modal_advantage(toy.teacher, toy.student, speech, no_text), DataError);
  TeacherModel other = init_teacher(tiny_config(7), 1);
  CHECK_THROWS_AS(in_modal_advantage(other, toy.student, text, toy.example.text_prompt), ConfigError);

  Graph g;
  XopdConfig bad;
  bad.lambda = 1.5;
  CHECK_THROWS_AS(xopd_loss(g, single(text), std::span(&toy.example, 1), toy.teacher, toy.student, bad),
                  ConfigError);
  XopdConfig half;
  CHECK_THROWS_AS(xopd_loss(g, single(text), std::span(&toy.example, 1), toy.teacher, toy.student, half),
                  UsageError);
}

TEST_CASE("importance ratios are one at the sampling point and track logit changes") {
  Toy toy = make_toy(8, 6);
  RolloutConfig rc;
  rc.n = 8;
  rc.max_new = 3;
  auto b = collect_rollouts(toy.student, std::span(&toy.example, 1), rc, 3);
  for (const auto* grp : {&b.text, &b.speech}) {
    for (const auto& tr : (*grp)[0]) {
      const Prompt p = tr.modality == Modality::kText ? text_prompt_of(toy.example) : speech_prompt_of(toy.example);
      for (double r : importance_ratios(toy.student, p, tr)) CHECK(std::abs(r - 1.0) < 1e-9);
    }
  }
  const Trajectory& tr = b.text[0][0];
  const int tok = tr.tokens[0];
  StudentModel up = toy.student;
  up.params.at("head.bias").data[static_cast<std::size_t>(tok)] += 0.5;
  const double r_up = importance_ratios(up, text_prompt_of(toy.example), tr)[0];
  CHECK(r_up > 1.0);
  StudentModel down = toy.student;
  down.params.at("head.bias").data[static_cast<std::size_t>(tok)] -= 0.5;
  const double r_down = importance_ratios(down, text_prompt_of(toy.example), tr)[0];
  CHECK(r_down < 1.0);
  CHECK(r_down > 0.0);
}

TEST_CASE("loss_total is linear in lambda with exact endpoints") {
  Toy toy = make_toy(12, 6);
  std::vector<PairedExample> xs{toy.example, toy.example};
  xs[1].id = 1;
  xs[1].text_prompt = {5, 5};
  xs[1].speech_prompt = {3, 3, 4};
  RolloutConfig rc;
  rc.n = 4;
  rc.max_new = 4;
  auto b = collect_rollouts(toy.student, xs, rc, 99);
  auto run = [&](double lambda, std::vector<double>* grad) {
    Graph g;
    XopdConfig c;
    c.lambda = lambda;
    auto xl = xopd_loss(g, b, xs, toy.teacher, toy.student, c);
    if (grad) {
      g.backward(xl.objective);
      toy.student.params.zero_grad();
      toy.student.params.accumulate_grads(g);
      *grad = flat_grad(toy.student.params);
    }
    return xl.report;
  };
  std::vector<double> g0, g1;
  const auto r1 = run(1.0, &g1);
  const auto r0 = run(0.0, &g0);
  CHECK(r1.loss_total == r1.loss_im);
  CHECK(r0.loss_total == r0.loss_cm);
  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    std::vector<double> gl;
    const auto r = run(lambda, &gl);
    const double expect = lambda * r1.loss_im + (1.0 - lambda) * r0.loss_cm;
    CHECK(r.loss_total == Catch::Approx(expect).margin(1e-14));
    for (std::size_t i = 0; i < gl.size(); ++i) {
      CHECK(gl[i] == Catch::Approx(lambda * g1[i] + (1.0 - lambda) * g0[i]).margin(1e-12));
    }
  }
  const auto rh = run(0.5, nullptr);
  CHECK(std::abs(rh.mean_ratio - 1.0) < 1e-9);
  CHECK(rh.text_trajectories == 8);
  CHECK(rh.speech_trajectories == 8);
}

TEST_CASE("expected in-modal gradient equals the negative per-position KL gradient") {
  for (std::uint64_t seed : {1, 2, 3}) {
    Toy toy = make_toy(seed, 6);
    for (int L : {1, 2, 3}) {
      const auto lhs = expected_objective_gradient(toy, Modality::kText, L);
      const auto rhs = kl_gradient(toy, Modality::kText, L);
      INFO("seed " << seed << " L " << L << " |grad| " << norm(rhs));
      CHECK(norm(rhs) > 1e-3);
      CHECK(max_abs_diff(lhs, rhs) < 1e-6);
    }
  }
}

TEST_CASE("expected cross-modal gradient equals the negative per-position KL gradient") {
  Toy toy = make_toy(21, 5);
  for (int L : {1, 2, 3}) {
    const auto lhs = expected_objective_gradient(toy, Modality::kSpeech, L);
    const auto rhs = kl_gradient(toy, Modality::kSpeech, L);
    CHECK(max_abs_diff(lhs, rhs) < 1e-6);
  }
}

TEST_CASE("zero-gap fixed point: expected gradient vanishes when policies match") {
  Toy toy = make_toy(30, 6, true);
  const auto lhs = expected_objective_gradient(toy, Modality::kText, 3);
  CHECK(norm(lhs) < 1e-12);
}

TEST_CASE("negated mean advantage estimates the per-token reverse KL") {
  for (int V : {5, 8}) {
    Toy toy = make_toy(40 + static_cast<std::uint64_t>(V), V);
    const Prompt tp = text_prompt_of(toy.example);
    const double kl = next_token_reverse_kl(toy.teacher, tp, toy.student, tp, {});
    // exhaustive expectation over the first token
    double expect = 0.0;
    for (int v = 0; v < V; ++v) {
      const auto q = completion_log_probs(toy.student, tp, std::vector<int>{v})[0];
      const auto p = completion_log_probs(toy.teacher, tp, std::vector<int>{v})[0];
      expect += std::exp(q) * -(p - q);
    }
    CHECK(expect == Catch::Approx(kl).margin(1e-10));
    CHECK(kl > 0.0);

    // Monte Carlo over student samples
    const int N = 20000;
    Rng rng(7);
    SamplingConfig sc{1.0, 1, false};
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < N; ++i) {
      auto tr = sample_completion(toy.student, tp, sc, rng);
      const double a = completion_log_probs(toy.teacher, tp, tr.tokens)[0] - tr.logp_old[0];
      s += -a;
      s2 += a * a;
    }
    const double mean = s / N;
    const double sd = std::sqrt((s2 / N - mean * mean) / N);
    CHECK(std::abs(mean - kl) < 3.0 * sd);
  }
}

TEST_CASE("probe KL at the reference policy equals the exhaustive sequence KL") {
  Toy toy = make_toy(6, 6);
  const Prompt tp = text_prompt_of(toy.example);
  const Prompt sp = speech_prompt_of(toy.example);
  for (int max_new : {1, 2, 3}) {
    const auto probe = enumerate_probe(toy.student, tp, sp, max_new);
    CHECK(probe_reverse_kl(toy.teacher, toy.student, probe) ==
          Catch::Approx(exhaustive_sequence_kl(toy.teacher, toy.student, tp, sp, max_new)).epsilon(1e-12));
  }
}

TEST_CASE("a small X-OPD step lowers the exact reverse KL on a frozen probe batch") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const auto r = kl_probe_step(seed);
    INFO("seed " << seed << " before " << r.before << " after " << r.after);
    CHECK(r.after < r.before);
  }
}
