// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Comparison methods: supervised fine-tuning on reference answers, offline
// distillation from greedy teacher outputs, and on-policy forward-KL
// distillation (GKD) on student samples.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "xopd/corpus.hpp"
#include "xopd/model.hpp"
#include "xopd/rollout.hpp"

namespace xopd {

// Target sequence used for likelihood training: answer followed by EOS.
std::vector<int> answer_with_eos(const std::vector<int>& answer);

// Mean per-token NLL of reference_answer + EOS under the student, conditioned
// on the speech prompt (or the text prompt when `speech` is false).
Var sft_loss(Graph& g, const StudentModel& student, const PairedExample& example, bool speech = true);

// Replaces each reference answer with the teacher's greedy answer on T and
// records `provenance` (normally the teacher checkpoint id).
std::vector<PairedExample> offline_kd_build(const TeacherModel& teacher,
                                            std::span<const PairedExample> dataset, int max_new,
                                            const std::string& provenance);

// Mean over positions of KL(pi_phi(.|T, y_<t) || pi_theta(.|S, y_<t)); the
// teacher side is constant.
Var gkd_loss(Graph& g, const TeacherModel& teacher, const StudentModel& student, const Trajectory& traj,
             const PairedExample& example);

// Batch GKD objective (to minimise): mean over examples and their speech
// rollouts.
Var gkd_batch_loss(Graph& g, const TeacherModel& teacher, const StudentModel& student,
                   const RolloutBatch& rollouts, std::span<const PairedExample> examples);

}  // namespace xopd
