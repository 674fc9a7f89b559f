// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// The cross-modal on-policy distillation objective.
//
// For a student trajectory y sampled from pi_theta:
//   A_im(y_t) = log pi_phi(y_t | T, y_<t) - log pi_theta(y_t | T, y_<t)   (text rollouts)
//   A_cm(y_t) = log pi_phi(y_t | T, y_<t) - log pi_theta(y_t | S, y_<t)   (speech rollouts)
//   r_t       = exp(log pi_theta(y_t | .) - logp_old_t)
//   L         = mean_examples (1/m) sum_j (1/|y_j|) sum_t r_t * A(y_t)
// and the maximised objective is lambda * L_im + (1 - lambda) * L_cm.
// Advantages and logp_old are constants; gradient flows only through r.

#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/corpus.hpp"
#include "xopd/model.hpp"
#include "xopd/rollout.hpp"

namespace xopd {

struct AdvantageTable {
  Modality modality = Modality::kText;
  std::vector<double> teacher_logp;
  std::vector<double> student_logp;
  std::vector<double> a_values;  // teacher_logp - student_logp
};

AdvantageTable make_advantage_table(Modality m, std::vector<double> teacher_logp,
                                    std::vector<double> student_logp);

// Text-conditioned trajectory: teacher and student both read T.
AdvantageTable in_modal_advantage(const TeacherModel& teacher, const StudentModel& student,
                                  const Trajectory& traj, std::span<const int> text_prompt);
// Speech-conditioned trajectory: teacher reads T, student reads S.
AdvantageTable cross_modal_advantage(const TeacherModel& teacher, const StudentModel& student,
                                     const Trajectory& traj, const PairedExample& example);

// Per-token r under the current student (no gradient).
std::vector<double> importance_ratios(const StudentModel& student, const Prompt& prompt,
                                      const Trajectory& traj);

struct XopdConfig {
  double lambda = 0.5;
  bool clip = false;
  double clip_eps = 0.2;

  void validate() const;
};

struct XopdLossReport {
  double loss_im = 0.0;
  double loss_cm = 0.0;
  double loss_total = 0.0;
  double mean_ratio = 0.0;
  double mean_abs_advantage = 0.0;
  // -mean A over sampled tokens, per partition and pooled.
  double reverse_kl_im = 0.0;
  double reverse_kl_cm = 0.0;
  double mean_reverse_kl_estimate = 0.0;
  double lambda = 0.5;
  long text_trajectories = 0;
  long speech_trajectories = 0;
};

nlohmann::json to_json(const XopdLossReport& r);

struct XopdLoss {
  XopdLossReport report;
  Var objective;  // maximise
};

// Builds the objective in `g`. `examples[i]` must be the example behind
// rollouts.example_ids[i]. A partition whose weight is zero is skipped
// entirely (it may be absent from the batch).
XopdLoss xopd_loss(Graph& g, const RolloutBatch& rollouts, std::span<const PairedExample> examples,
                   const TeacherModel& teacher, const StudentModel& student, const XopdConfig& cfg);

// Exact KL(pi_theta(.|prompt_s, prefix) || pi_phi(.|prompt_t, prefix)) for
// one next-token distribution (diagnostic helper).
double next_token_reverse_kl(const TeacherModel& teacher, const Prompt& teacher_prompt,
                             const StudentModel& student, const Prompt& student_prompt,
                             std::span<const int> prefix);

}  // namespace xopd
