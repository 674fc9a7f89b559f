// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Text-only teacher and dual-modality student. Both are pre-LN decoder-only
// transformers with the same backbone parameter names; the student adds a
// speech-frame embedding table (the "tower") and a linear adapter into the
// backbone width. Completions are always text tokens.
//
// Input layout: [BOS] prompt [SEP] completion. A speech prompt is embedded
// frame by frame in the tower; the adapter maps each token's F stacked frame
// embeddings to one backbone position. BOS/SEP and the completion always use
// the text embedding.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/params.hpp"
#include "xopd/rng.hpp"
#include "xopd/tensor.hpp"

namespace xopd {

enum class Modality { kText, kSpeech };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

struct Prompt {
  Modality modality = Modality::kText;
  // Text token ids, or speech frame ids for a speech prompt.
  std::vector<int> tokens;
};

struct ModelConfig {
  int text_vocab_size = 64;
  int speech_vocab_size = 68;
  bool answer_vocab_is_text = true;
  int embed_dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int mlp_hidden = 128;
  int max_seq_len = 256;
  int frames_per_token = 3;
  int speech_embed_dim = 32;

  void validate() const;
  // True when the backbone tensors of both configs have identical shapes.
  bool backbone_compatible(const ModelConfig& other) const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TeacherModel {
  ModelConfig cfg;
  ParamSet params;
};

struct StudentModel {
  ModelConfig cfg;
  ParamSet params;  // backbone + speech_tower.* + adapter.*
  bool tower_frozen = true;
};

// Names of the speech pathway tensors.
bool is_speech_pathway_param(const std::string& name);

// Fresh backbone: N(0, 0.02) embeddings and projections, unit LayerNorm
// gains, zero biases and a zero output head.
ParamSet init_backbone(const ModelConfig& cfg, std::uint64_t seed);
TeacherModel init_teacher(const ModelConfig& cfg, std::uint64_t seed);

// Copies the backbone; tower and adapter drawn from N(0, 0.02) under `seed`.
StudentModel init_student_from_teacher(const TeacherModel& teacher, const ModelConfig& cfg,
                                       std::uint64_t seed);

// Logits for every completion position: row t predicts completion[t] from the
// prompt and completion[0..t). Result is [|completion| x text_vocab].
Var forward_logits(Graph& g, const TeacherModel& m, const Prompt& prompt,
                   std::span<const int> completion);
Var forward_logits(Graph& g, const StudentModel& m, const Prompt& prompt,
                   std::span<const int> completion);

// Adapter output for a speech prompt, one [1 x D] row per text token
// (before position embeddings).
Var speech_token_embeddings(Graph& g, const StudentModel& m, std::span<const int> frames);

// Unnormalised next-token logits after `prefix` ([1 x text_vocab]).
Var next_token_logits(Graph& g, const TeacherModel& m, const Prompt& prompt,
                      std::span<const int> prefix);
Var next_token_logits(Graph& g, const StudentModel& m, const Prompt& prompt,
                      std::span<const int> prefix);

// Per-token log-probabilities of `completion` (teacher-forced, no grad).
std::vector<double> completion_log_probs(const TeacherModel& m, const Prompt& prompt,
                                         std::span<const int> completion);
std::vector<double> completion_log_probs(const StudentModel& m, const Prompt& prompt,
                                         std::span<const int> completion);

struct Trajectory {
  std::int64_t example_id = -1;
  Modality modality = Modality::kText;
  std::vector<int> tokens;
  // log pi_old(y_t | .) under the unadjusted model distribution.
  std::vector<double> logp_old;
  // log-probability under the temperature-adjusted sampling distribution.
  std::vector<double> logp_sample;
  bool finished = false;
};

struct SamplingConfig {
  double temperature = 1.0;
  int max_new = 8;
  bool greedy = false;
};

// Ancestral sampling until EOS or max_new tokens.
Trajectory sample_completion(const TeacherModel& m, const Prompt& prompt,
                             const SamplingConfig& sc, Rng& rng);
Trajectory sample_completion(const StudentModel& m, const Prompt& prompt,
                             const SamplingConfig& sc, Rng& rng);

// Greedy answer with the trailing EOS stripped.
std::vector<int> greedy_answer(const TeacherModel& m, const Prompt& prompt, int max_new);
std::vector<int> greedy_answer(const StudentModel& m, const Prompt& prompt, int max_new);

nlohmann::json checkpoint_metadata(const ModelConfig& cfg, const std::string& role);
void save_teacher(const std::filesystem::path& path, const TeacherModel& m);
void save_student(const std::filesystem::path& path, const StudentModel& m);
TeacherModel load_teacher(const std::filesystem::path& path);
StudentModel load_student(const std::filesystem::path& path);

}  // namespace xopd
