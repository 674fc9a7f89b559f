// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/xopd.hpp"

#include <cmath>

#include "xopd/errors.hpp"

namespace xopd {

namespace {

void check_vocab(const TeacherModel& t, const StudentModel& s) {
  if (t.cfg.text_vocab_size != s.cfg.text_vocab_size) {
    throw ConfigError("teacher vocabulary (" + std::to_string(t.cfg.text_vocab_size) +
                      ") differs from student vocabulary (" + std::to_string(s.cfg.text_vocab_size) + ")");
  }
}

void check_traj(const Trajectory& tr) {
  if (tr.tokens.empty() || tr.tokens.size() != tr.logp_old.size()) {
    throw ShapeError("trajectory needs >= 1 token and one logp_old per token");
  }
}

struct PartitionSums {
  Var objective;
  double value = 0.0;
  double ratio_sum = 0.0;
  double abs_adv_sum = 0.0;
  double adv_sum = 0.0;
  long tokens = 0;
  long trajectories = 0;
};

// mean over examples of (1/m) sum_j (1/|y_j|) sum_t r * A
PartitionSums partition_objective(Graph& g, const std::vector<std::vector<Trajectory>>& groups,
                                  std::span<const PairedExample> examples, Modality modality,
                                  const TeacherModel& teacher, const StudentModel& student,
                                  const XopdConfig& cfg) {
  PartitionSums ps;
  std::vector<Var> per_example;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& trajs = groups[i];
    if (trajs.empty()) continue;
    const PairedExample& ex = examples[i];
    const Prompt tp = text_prompt_of(ex);
    const Prompt sp = modality == Modality::kText ? tp : speech_prompt_of(ex);
    if (modality == Modality::kSpeech && ex.text_prompt.empty()) {
      throw DataError("cross-modal advantage needs the paired text prompt of example " + std::to_string(ex.id));
    }
    std::vector<Var> per_traj;
    for (const auto& tr : trajs) {
      check_traj(tr);
      if (tr.modality != modality) throw UsageError("trajectory modality does not match its partition");
      const auto teacher_lp = completion_log_probs(teacher, tp, tr.tokens);
      Var logp = gather_log_prob(log_softmax(forward_logits(g, student, sp, tr.tokens)), tr.tokens);
      const std::size_t L = tr.tokens.size();
      Tensor adv({L}, std::vector<double>(L));
      for (std::size_t t = 0; t < L; ++t) {
        adv.data[t] = teacher_lp[t] - logp.value().data[t];
        ps.abs_adv_sum += std::abs(adv.data[t]);
        ps.adv_sum += adv.data[t];
      }
      Var ratio = exp(sub(logp, g.constant(Tensor({L}, tr.logp_old))));
      for (double r : ratio.value().data) ps.ratio_sum += r;
      Var a = g.constant(std::move(adv));
      Var term = mul(ratio, a);
      if (cfg.clip) {
        term = minimum(term, mul(clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), a));
      }
      per_traj.push_back(mean(term));
      ps.tokens += static_cast<long>(L);
      ps.trajectories++;
    }
    Var s = per_traj[0];
    for (std::size_t j = 1; j < per_traj.size(); ++j) s = add(s, per_traj[j]);
    per_example.push_back(scale(s, 1.0 / static_cast<double>(per_traj.size())));
  }
  if (per_example.empty()) {
    throw UsageError(std::string("no ") + to_string(modality) +
                     "-conditioned rollouts although its partition has nonzero weight");
  }
  Var s = per_example[0];
  for (std::size_t i = 1; i < per_example.size(); ++i) s = add(s, per_example[i]);
  ps.objective = scale(s, 1.0 / static_cast<double>(per_example.size()));
  ps.value = ps.objective.item();
  return ps;
}

}  // namespace

AdvantageTable make_advantage_table(Modality m, std::vector<double> teacher_logp,
                                    std::vector<double> student_logp) {
  if (teacher_logp.size() != student_logp.size()) throw ShapeError("advantage components differ in length");
  AdvantageTable t;
  t.modality = m;
  t.a_values.resize(teacher_logp.size());
  for (std::size_t i = 0; i < teacher_logp.size(); ++i) t.a_values[i] = teacher_logp[i] - student_logp[i];
  t.teacher_logp = std::move(teacher_logp);
  t.student_logp = std::move(student_logp);
  return t;
}

AdvantageTable in_modal_advantage(const TeacherModel& teacher, const StudentModel& student,
                                  const Trajectory& traj, std::span<const int> text_prompt) {
  check_vocab(teacher, student);
  check_traj(traj);
  if (traj.modality != Modality::kText) throw UsageError("in-modal advantage needs a text-conditioned trajectory");
  Prompt p{Modality::kText, {text_prompt.begin(), text_prompt.end()}};
  return make_advantage_table(Modality::kText, completion_log_probs(teacher, p, traj.tokens),
                              completion_log_probs(student, p, traj.tokens));
}

AdvantageTable cross_modal_advantage(const TeacherModel& teacher, const StudentModel& student,
                                     const Trajectory& traj, const PairedExample& example) {
  check_vocab(teacher, student);
  check_traj(traj);
  if (traj.modality != Modality::kSpeech) {
    throw UsageError("cross-modal advantage needs a speech-conditioned trajectory");
  }
  if (example.text_prompt.empty()) {
    throw DataError("example " + std::to_string(example.id) + " has no paired text prompt");
  }
  return make_advantage_table(Modality::kSpeech,
                              completion_log_probs(teacher, text_prompt_of(example), traj.tokens),
                              completion_log_probs(student, speech_prompt_of(example), traj.tokens));
}

std::vector<double> importance_ratios(const StudentModel& student, const Prompt& prompt,
                                      const Trajectory& traj) {
  check_traj(traj);
  auto lp = completion_log_probs(student, prompt, traj.tokens);
  for (std::size_t t = 0; t < lp.size(); ++t) lp[t] = std::exp(lp[t] - traj.logp_old[t]);
  return lp;
}

void XopdConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  if (clip && !(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("clip_eps must lie in (0, 1)");
}

nlohmann::json to_json(const XopdLossReport& r) {
  return {{"loss_im", r.loss_im},
          {"loss_cm", r.loss_cm},
          {"loss_total", r.loss_total},
          {"neg_loss_total", -r.loss_total},
          {"mean_ratio", r.mean_ratio},
          {"mean_abs_advantage", r.mean_abs_advantage},
          {"reverse_kl_im", r.reverse_kl_im},
          {"reverse_kl_cm", r.reverse_kl_cm},
          {"mean_reverse_kl_estimate", r.mean_reverse_kl_estimate},
          {"lambda", r.lambda},
          {"text_trajectories", r.text_trajectories},
          {"speech_trajectories", r.speech_trajectories}};
}

XopdLoss xopd_loss(Graph& g, const RolloutBatch& rollouts, std::span<const PairedExample> examples,
                   const TeacherModel& teacher, const StudentModel& student, const XopdConfig& cfg) {
  cfg.validate();
  check_vocab(teacher, student);
  if (examples.size() != rollouts.example_ids.size()) {
    throw UsageError("xopd_loss: examples and rollouts differ in length");
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].id != rollouts.example_ids[i]) throw UsageError("xopd_loss: example order mismatch");
  }
  XopdLoss out;
  auto& rep = out.report;
  rep.lambda = cfg.lambda;
  std::vector<Var> parts;
  double ratio_sum = 0.0, abs_sum = 0.0, adv_sum = 0.0;
  long tokens = 0;
  if (cfg.lambda > 0.0) {
    auto im = partition_objective(g, rollouts.text, examples, Modality::kText, teacher, student, cfg);
    rep.loss_im = im.value;
    rep.reverse_kl_im = -im.adv_sum / static_cast<double>(im.tokens);
    rep.text_trajectories = im.trajectories;
    ratio_sum += im.ratio_sum;
    abs_sum += im.abs_adv_sum;
    adv_sum += im.adv_sum;
    tokens += im.tokens;
    parts.push_back(scale(im.objective, cfg.lambda));
  }
  if (cfg.lambda < 1.0) {
    auto cm = partition_objective(g, rollouts.speech, examples, Modality::kSpeech, teacher, student, cfg);
    rep.loss_cm = cm.value;
    rep.reverse_kl_cm = -cm.adv_sum / static_cast<double>(cm.tokens);
    rep.speech_trajectories = cm.trajectories;
    ratio_sum += cm.ratio_sum;
    abs_sum += cm.abs_adv_sum;
    adv_sum += cm.adv_sum;
    tokens += cm.tokens;
    parts.push_back(scale(cm.objective, 1.0 - cfg.lambda));
  }
  out.objective = parts.size() == 1 ? parts[0] : add(parts[0], parts[1]);
  rep.loss_total = out.objective.item();
  rep.mean_ratio = ratio_sum / static_cast<double>(tokens);
  rep.mean_abs_advantage = abs_sum / static_cast<double>(tokens);
  rep.mean_reverse_kl_estimate = -adv_sum / static_cast<double>(tokens);
  return out;
}

double next_token_reverse_kl(const TeacherModel& teacher, const Prompt& teacher_prompt,
                             const StudentModel& student, const Prompt& student_prompt,
                             std::span<const int> prefix) {
  Graph g(GradMode::kNoGrad);
  const auto& q = log_softmax(next_token_logits(g, student, student_prompt, prefix)).value().data;
  const auto& p = log_softmax(next_token_logits(g, teacher, teacher_prompt, prefix)).value().data;
  double kl = 0.0;
  for (std::size_t v = 0; v < q.size(); ++v) kl += std::exp(q[v]) * (q[v] - p[v]);
  return kl;
}

}  // namespace xopd
