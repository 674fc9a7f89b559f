// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-policy trajectory collection. Every (example, modality, sample index)
// unit gets its own RNG seeded from the batch seed and the unit key, so the
// batch content does not depend on how work is spread over threads.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "xopd/corpus.hpp"
#include "xopd/model.hpp"

namespace xopd {

struct RolloutConfig {
  int n = 4;
  double temperature = 1.0;
  int max_new = 8;
  bool greedy = false;
  bool text = true;    // sample text-conditioned trajectories
  bool speech = true;  // sample speech-conditioned trajectories
  int workers = 1;

  void validate() const;
  SamplingConfig sampling() const { return {temperature, max_new, greedy}; }
};

struct RolloutBatch {
  RolloutConfig cfg;
  std::vector<std::int64_t> example_ids;
  // [example][sample]; empty inner vectors for a disabled modality.
  std::vector<std::vector<Trajectory>> text;
  std::vector<std::vector<Trajectory>> speech;
  long text_trajectories = 0;
  long speech_trajectories = 0;
};

Prompt text_prompt_of(const PairedExample& e);
Prompt speech_prompt_of(const PairedExample& e);

// Samples cfg.n text- and/or speech-conditioned completions per example from
// the (read-only) student. Throws UsageError on an empty batch.
RolloutBatch collect_rollouts(const StudentModel& student, std::span<const PairedExample> batch,
                              const RolloutConfig& cfg, std::uint64_t seed);

// Stable digest of the batch content (tokens and recorded log-probs).
std::string rollout_hash(const RolloutBatch& b);

// One JSON record per trajectory: example_id, modality, tokens, logp_old.
void write_trajectories_jsonl(const std::filesystem::path& path, const RolloutBatch& b);

}  // namespace xopd
