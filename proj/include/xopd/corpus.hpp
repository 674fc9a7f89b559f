// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired text/speech corpus.
//
// The speech surrogate is a discrete frame code. Frame position i of a token t
// carries sigma_i(t), where sigma_0..sigma_{F-1} are independent seeded
// permutations of the base symbols, so any two distinct tokens disagree in all
// F frames. A prosody label l is carried by overwriting the last frame of
// every token with the extra symbol base + l. Noise replaces each frame, with
// probability epsilon, by a uniform draw over the whole frame alphabet.
// Decoding is a per-position vote: frame i votes for sigma_i^-1(symbol).

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/rng.hpp"

namespace xopd {

enum class TaskFamily { kReasoning, kInstruction, kAcoustic };

inline constexpr TaskFamily kAllFamilies[] = {TaskFamily::kReasoning, TaskFamily::kInstruction,
                                              TaskFamily::kAcoustic};

std::string to_string(TaskFamily f);
TaskFamily task_family_from_string(const std::string& s);

struct CodecConfig {
  int text_vocab_size = 64;
  int base_symbols = 64;
  int num_labels = 4;
  int frames_per_token = 3;
  double noise_rate = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const CodecConfig& c);
void from_json(const nlohmann::json& j, CodecConfig& c);

struct DecodeResult {
  std::vector<int> tokens;
  // Token positions whose vote had no strict majority.
  std::vector<std::size_t> error_positions;
};

class SpeechCodec {
 public:
  explicit SpeechCodec(CodecConfig cfg);

  const CodecConfig& config() const { return cfg_; }
  int frames_per_token() const { return cfg_.frames_per_token; }
  int speech_vocab_size() const { return cfg_.base_symbols + cfg_.num_labels; }
  int label_symbol(int label) const { return cfg_.base_symbols + label; }

  // Clean frames of one token (no label, no noise).
  std::vector<int> frame_map(int token) const;

  std::vector<int> encode(std::span<const int> text, std::optional<int> label, Rng& rng) const;
  DecodeResult decode(std::span<const int> frames) const;
  // Majority label symbol across the frames; ties go to the lowest label.
  std::optional<int> read_label(std::span<const int> frames) const;

  // Exact probability that one encoded token decodes to a different token,
  // enumerated over every noise outcome.
  double token_error_probability(int token, bool labelled) const;

 private:
  int vote(int position, int symbol) const;
  int decode_chunk(std::span<const int> chunk, int* winner_votes) const;

  CodecConfig cfg_;
  std::vector<std::vector<int>> forward_;  // [F][token] -> symbol
  std::vector<std::vector<int>> inverse_;  // [F][symbol] -> token
  mutable std::map<std::pair<int, bool>, double> error_cache_;
};

// Probability that more than `max_errors` of independent Bernoulli(p_i)
// events occur.
double poisson_binomial_tail(std::span<const double> p, int max_errors);

struct TaskInstance {
  TaskFamily family = TaskFamily::kReasoning;
  int difficulty = 1;
  std::vector<int> prompt;
  std::vector<int> answer;
  std::optional<int> label;
};

int min_difficulty(TaskFamily f);
int max_difficulty(TaskFamily f);

// Draws one task. REASONING: "( a op b ... ) mod m" with `difficulty`
// operators. INSTRUCTION: repeat/sort/reverse commands. ACOUSTIC: "tone?"
// followed by carrier words; the answer is the label, which only the speech
// channel carries.
TaskInstance generate_task(TaskFamily family, int difficulty, Rng& rng);

// Recomputes the canonical answer from prompt tokens (and label for
// ACOUSTIC). Throws DataError on a malformed prompt.
std::vector<int> solve_task(TaskFamily family, std::span<const int> prompt,
                            std::optional<int> label);

struct PairedExample {
  std::int64_t id = -1;
  TaskFamily family = TaskFamily::kReasoning;
  int difficulty = 1;
  std::vector<int> text_prompt;
  std::vector<int> speech_prompt;
  std::vector<int> reference_answer;
  std::optional<int> label;
  double round_trip_error_rate = 0.0;
  // Set by offline KD: the checkpoint whose outputs replaced the answers.
  std::string provenance;
};

void to_json(nlohmann::json& j, const PairedExample& e);
void from_json(const nlohmann::json& j, PairedExample& e);

// Identity used to keep splits disjoint.
std::string prompt_key(TaskFamily family, std::span<const int> prompt, std::optional<int> label);

struct SplitSpec {
  std::string name;
  std::map<TaskFamily, int> sizes;
};

struct DatasetSpec {
  std::vector<SplitSpec> splits;
  // Difficulty drawn uniformly from [lo, hi] per family.
  std::map<TaskFamily, std::pair<int, int>> difficulty;
  double filter_threshold = 0.05;
  double max_rejection_rate = 0.5;
  std::uint64_t seed = 0;

  static DatasetSpec defaults(std::uint64_t seed);
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct FilterStats {
  long attempts = 0;      // non-duplicate candidates examined
  long rejected = 0;      // failed the round-trip filter
  long duplicates = 0;    // prompt already used elsewhere
  double predicted_rejections = 0.0;  // sum of exact per-candidate probabilities

  double rejection_rate() const { return attempts ? double(rejected) / attempts : 0.0; }
  double predicted_rate() const { return attempts ? predicted_rejections / attempts : 0.0; }
};

struct Dataset {
  CodecConfig codec;
  DatasetSpec spec;
  std::map<std::string, std::vector<PairedExample>> splits;
  std::map<std::string, std::map<TaskFamily, FilterStats>> stats;

  const std::vector<PairedExample>& split(const std::string& name) const;
  FilterStats total_stats() const;
  std::set<std::string> prompt_keys(const std::vector<std::string>& split_names) const;
  nlohmann::json manifest() const;
};

// True when the example survives the round-trip filter.
bool admits(double error_rate, double threshold);

// Builds every split. Candidates are drawn from per-example derived seeds,
// encoded, decoded and filtered; duplicates across the whole dataset are
// skipped. Throws GenerationQualityError when the rejection rate exceeds
// spec.max_rejection_rate.
Dataset build_dataset(const DatasetSpec& spec, const SpeechCodec& codec);

// Writes <split>.jsonl files and manifest.json. Returns the manifest.
nlohmann::json write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void write_examples_jsonl(const std::filesystem::path& path, const std::vector<PairedExample>& xs);
std::vector<PairedExample> read_examples_jsonl(const std::filesystem::path& path);

// Checks the semantic-invariance contract for an admitted example: the answer
// recomputed from decode(S) (and the label read from S) equals the answer
// recomputed from T. Throws DataError on violation.
void assert_semantic_invariance(const PairedExample& e, const SpeechCodec& codec);

}  // namespace xopd
