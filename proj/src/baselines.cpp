// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/baselines.hpp"

#include <cmath>

#include "xopd/errors.hpp"
#include "xopd/vocab.hpp"

namespace xopd {

std::vector<int> answer_with_eos(const std::vector<int>& answer) {
  std::vector<int> y = answer;
  y.push_back(vocab::kEos);
  return y;
}

Var sft_loss(Graph& g, const StudentModel& student, const PairedExample& example, bool speech) {
  if (example.reference_answer.empty()) {
    throw DataError("example " + std::to_string(example.id) + " has no reference answer");
  }
  const auto y = answer_with_eos(example.reference_answer);
  const Prompt p = speech ? speech_prompt_of(example) : text_prompt_of(example);
  return scale(mean(gather_log_prob(log_softmax(forward_logits(g, student, p, y)), y)), -1.0);
}

std::vector<PairedExample> offline_kd_build(const TeacherModel& teacher,
                                            std::span<const PairedExample> dataset, int max_new,
                                            const std::string& provenance) {
  std::vector<PairedExample> out;
  out.reserve(dataset.size());
  for (const auto& e : dataset) {
    PairedExample d = e;
    d.reference_answer = greedy_answer(teacher, text_prompt_of(e), max_new);
    d.provenance = provenance;
    out.push_back(std::move(d));
  }
  return out;
}

Var gkd_loss(Graph& g, const TeacherModel& teacher, const StudentModel& student, const Trajectory& traj,
             const PairedExample& example) {
  if (teacher.cfg.text_vocab_size != student.cfg.text_vocab_size) {
    throw ConfigError("teacher and student vocabularies differ");
  }
  if (traj.tokens.empty()) throw ShapeError("gkd_loss: empty trajectory");
  Tensor teacher_lp;
  {
    Graph tg(GradMode::kNoGrad);
    teacher_lp = log_softmax(forward_logits(tg, teacher, text_prompt_of(example), traj.tokens)).value();
  }
  Tensor teacher_p = teacher_lp;
  for (auto& v : teacher_p.data) v = std::exp(v);
  teacher_p.requires_grad = false;
  teacher_lp.requires_grad = false;
  Var q = log_softmax(forward_logits(g, student, speech_prompt_of(example), traj.tokens));
  Var kl = sum(mul(g.constant(std::move(teacher_p)), sub(g.constant(std::move(teacher_lp)), q)));
  return scale(kl, 1.0 / static_cast<double>(traj.tokens.size()));
}

Var gkd_batch_loss(Graph& g, const TeacherModel& teacher, const StudentModel& student,
                   const RolloutBatch& rollouts, std::span<const PairedExample> examples) {
  if (examples.size() != rollouts.speech.size()) throw UsageError("gkd: examples and rollouts differ in length");
  std::vector<Var> per_example;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& trajs = rollouts.speech[i];
    if (trajs.empty()) continue;
    Var s = gkd_loss(g, teacher, student, trajs[0], examples[i]);
    for (std::size_t j = 1; j < trajs.size(); ++j) s = add(s, gkd_loss(g, teacher, student, trajs[j], examples[i]));
    per_example.push_back(scale(s, 1.0 / static_cast<double>(trajs.size())));
  }
  if (per_example.empty()) throw UsageError("gkd: no speech-conditioned rollouts");
  Var s = per_example[0];
  for (std::size_t i = 1; i < per_example.size(); ++i) s = add(s, per_example[i]);
  return scale(s, 1.0 / static_cast<double>(per_example.size()));
}

}  // namespace xopd
