// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"
#include "xopd/errors.hpp"
#include "xopd/rollout.hpp"
#include "xopd/vocab.hpp"

using namespace xopd;
using namespace xopd::testing;

namespace {

StudentModel toy_student(std::uint64_t seed) {
  TeacherModel t = init_teacher(tiny_config(6), seed);
  randomize(t.params, seed);
  StudentModel s = init_student_from_teacher(t, tiny_config(6), seed + 1);
  randomize(s.params, seed + 2);
  return s;
}

}  // namespace

TEST_CASE("rollout counts per example and modality") {
  auto s = toy_student(1);
  auto xs = toy_examples(5);
  RolloutConfig rc;
  auto b = collect_rollouts(s, xs, rc, 7);
  REQUIRE(b.text.size() == 5);
  REQUIRE(b.speech.size() == 5);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(b.text[i].size() + b.speech[i].size() == 8);
    CHECK(b.example_ids[i] == xs[i].id);
    for (const auto& tr : b.text[i]) CHECK(tr.modality == Modality::kText);
    for (const auto& tr : b.speech[i]) CHECK(tr.modality == Modality::kSpeech);
  }
  CHECK(b.text_trajectories == 20);
  CHECK(b.speech_trajectories == 20);

  rc.speech = false;
  auto t = collect_rollouts(s, xs, rc, 7);
  CHECK(t.speech_trajectories == 0);
  for (const auto& per : t.speech) CHECK(per.empty());
}

TEST_CASE("greedy rollouts do not depend on the seed") {
  auto s = toy_student(2);
  auto xs = toy_examples(3);
  RolloutConfig rc;
  rc.n = 1;
  rc.greedy = true;
  CHECK(rollout_hash(collect_rollouts(s, xs, rc, 1)) == rollout_hash(collect_rollouts(s, xs, rc, 2)));
  rc.greedy = false;
  CHECK(rollout_hash(collect_rollouts(s, xs, rc, 1)) != rollout_hash(collect_rollouts(s, xs, rc, 2)));
}

TEST_CASE("rollouts are identical under any worker count") {
  auto s = toy_student(3);
  auto xs = toy_examples(6);
  RolloutConfig rc;
  rc.n = 3;
  rc.workers = 1;
  const auto h1 = rollout_hash(collect_rollouts(s, xs, rc, 42));
  for (int w : {2, 4, 7}) {
    rc.workers = w;
    CHECK(rollout_hash(collect_rollouts(s, xs, rc, 42)) == h1);
  }
}

TEST_CASE("rollouts are keyed by example id, not batch position") {
  auto s = toy_student(4);
  auto xs = toy_examples(4);
  RolloutConfig rc;
  auto a = collect_rollouts(s, xs, rc, 5);
  std::vector<PairedExample> rev(xs.rbegin(), xs.rend());
  auto b = collect_rollouts(s, rev, rc, 5);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t j = xs.size() - 1 - i;
    for (std::size_t k = 0; k < a.text[i].size(); ++k) CHECK(a.text[i][k].tokens == b.text[j][k].tokens);
  }
}

TEST_CASE("logp_old is fresh and trajectories respect their invariants") {
  auto s = toy_student(5);
  auto xs = toy_examples(4);
  RolloutConfig rc;
  rc.max_new = 3;
  auto b = collect_rollouts(s, xs, rc, 9);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (const auto* grp : {&b.text, &b.speech}) {
      for (const auto& tr : (*grp)[i]) {
        REQUIRE(!tr.tokens.empty());
        CHECK(tr.tokens.size() == tr.logp_old.size());
        CHECK(static_cast<int>(tr.tokens.size()) <= rc.max_new);
        CHECK(tr.example_id == xs[i].id);
        CHECK(tr.finished == (tr.tokens.back() == vocab::kEos));
        const Prompt p = tr.modality == Modality::kText ? text_prompt_of(xs[i]) : speech_prompt_of(xs[i]);
        const auto re = completion_log_probs(s, p, tr.tokens);
        for (std::size_t t = 0; t < re.size(); ++t) {
          CHECK(tr.logp_old[t] == re[t]);
          CHECK(tr.logp_old[t] <= 0.0);
        }
      }
    }
  }
}

TEST_CASE("rollout misuse is rejected") {
  auto s = toy_student(6);
  RolloutConfig rc;
  CHECK_THROWS_AS(collect_rollouts(s, {}, rc, 1), UsageError);
  auto xs = toy_examples(1);
  rc.n = 0;
  CHECK_THROWS_AS(collect_rollouts(s, xs, rc, 1), ConfigError);
}

TEST_CASE("trajectory dump writes one JSON line per trajectory") {
  auto s = toy_student(7);
  auto xs = toy_examples(2);
  RolloutConfig rc;
  auto b = collect_rollouts(s, xs, rc, 3);
  const auto path = std::filesystem::temp_directory_path() / "xopd_traj_test.jsonl";
  std::filesystem::remove(path);
  write_trajectories_jsonl(path, b);
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("logp_old"));
    CHECK(j["tokens"].size() == j["logp_old"].size());
    ++n;
  }
  CHECK(n == 16);
  std::filesystem::remove(path);
}
