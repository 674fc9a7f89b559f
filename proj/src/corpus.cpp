// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "xopd/errors.hpp"
#include "xopd/params.hpp"
#include "xopd/vocab.hpp"

namespace xopd {

std::string to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::kReasoning: return "reasoning";
    case TaskFamily::kInstruction: return "instruction";
    case TaskFamily::kAcoustic: return "acoustic";
  }
  return "?";
}

TaskFamily task_family_from_string(const std::string& s) {
  for (TaskFamily f : kAllFamilies) {
    if (to_string(f) == s) return f;
  }
  throw ConfigError("unknown task family '" + s + "' (expected reasoning, instruction or acoustic)");
}

// ---- codec -----------------------------------------------------------------

void CodecConfig::validate() const {
  if (frames_per_token < 1) throw ConfigError("codec: frames_per_token must be >= 1");
  if (text_vocab_size < 1 || base_symbols < text_vocab_size) {
    throw ConfigError("codec: base_symbols (" + std::to_string(base_symbols) +
                      ") must cover the text vocabulary (" + std::to_string(text_vocab_size) + ")");
  }
  if (num_labels < 0) throw ConfigError("codec: num_labels must be >= 0");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
    throw ConfigError("codec: noise_rate must lie in [0, 1], got " + std::to_string(noise_rate));
  }
}

void to_json(nlohmann::json& j, const CodecConfig& c) {
  j = {{"text_vocab_size", c.text_vocab_size}, {"base_symbols", c.base_symbols},
       {"num_labels", c.num_labels},           {"frames_per_token", c.frames_per_token},
       {"noise_rate", c.noise_rate},           {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CodecConfig& c) {
  CodecConfig d;
  c.text_vocab_size = j.value("text_vocab_size", d.text_vocab_size);
  c.base_symbols = j.value("base_symbols", d.base_symbols);
  c.num_labels = j.value("num_labels", d.num_labels);
  c.frames_per_token = j.value("frames_per_token", d.frames_per_token);
  c.noise_rate = j.value("noise_rate", d.noise_rate);
  c.seed = j.value("seed", d.seed);
}

SpeechCodec::SpeechCodec(CodecConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const int F = cfg_.frames_per_token;
  const int B = cfg_.base_symbols;
  forward_.assign(F, std::vector<int>(B));
  inverse_.assign(F, std::vector<int>(B));
  for (int i = 0; i < F; ++i) {
    Rng rng(derive_seed(cfg_.seed, SeedStream::kCodec, {static_cast<std::uint64_t>(i)}));
    auto& perm = forward_[i];
    std::iota(perm.begin(), perm.end(), 0);
    // Fisher-Yates with raw engine output so the table does not depend on
    // library distribution internals.
    for (int k = B - 1; k > 0; --k) {
      const int r = static_cast<int>(rng() % static_cast<std::uint64_t>(k + 1));
      std::swap(perm[k], perm[r]);
    }
    for (int t = 0; t < B; ++t) inverse_[i][perm[t]] = t;
  }
}

std::vector<int> SpeechCodec::frame_map(int token) const {
  if (token < 0 || token >= cfg_.text_vocab_size) {
    throw VocabError("token " + std::to_string(token) + " outside the text vocabulary");
  }
  std::vector<int> out(cfg_.frames_per_token);
  for (int i = 0; i < cfg_.frames_per_token; ++i) out[i] = forward_[i][token];
  return out;
}

std::vector<int> SpeechCodec::encode(std::span<const int> text, std::optional<int> label,
                                     Rng& rng) const {
  if (label && (*label < 0 || *label >= cfg_.num_labels)) {
    throw VocabError("prosody label " + std::to_string(*label) + " outside [0, " +
                     std::to_string(cfg_.num_labels) + ")");
  }
  const int F = cfg_.frames_per_token;
  std::vector<int> frames;
  frames.reserve(text.size() * F);
  for (std::size_t p = 0; p < text.size(); ++p) {
    const int t = text[p];
    if (t < 0 || t >= cfg_.text_vocab_size) {
      throw VocabError("token " + std::to_string(t) + " at position " + std::to_string(p) +
                       " outside the text vocabulary");
    }
    for (int i = 0; i < F; ++i) frames.push_back(forward_[i][t]);
    if (label) frames.back() = label_symbol(*label);
  }
  if (cfg_.noise_rate > 0.0) {
    const auto V = static_cast<std::uint64_t>(speech_vocab_size());
    for (auto& f : frames) {
      if (uniform01(rng) < cfg_.noise_rate) f = static_cast<int>(uniform_int(rng, V));
    }
  }
  return frames;
}

int SpeechCodec::vote(int position, int symbol) const {
  if (symbol >= cfg_.base_symbols) return -1;
  const int t = inverse_[position][symbol];
  return t < cfg_.text_vocab_size ? t : -1;
}

namespace {

// Winner of a vote list: most votes, lowest id on ties; -1 votes ignored.
// An empty ballot decodes to token 0 with zero votes.
int tally(std::span<const int> votes, int* winner_votes) {
  int best = 0, best_count = 0;
  for (std::size_t a = 0; a < votes.size(); ++a) {
    if (votes[a] < 0) continue;
    int c = 0;
    for (int v : votes) c += (v == votes[a]);
    if (c > best_count || (c == best_count && votes[a] < best)) {
      best = votes[a];
      best_count = c;
    }
  }
  if (winner_votes) *winner_votes = best_count;
  return best;
}

}  // namespace

int SpeechCodec::decode_chunk(std::span<const int> chunk, int* winner_votes) const {
  int votes[16];
  std::vector<int> big;
  int* v = votes;
  if (chunk.size() > 16) {
    big.resize(chunk.size());
    v = big.data();
  }
  for (std::size_t i = 0; i < chunk.size(); ++i) v[i] = vote(static_cast<int>(i), chunk[i]);
  return tally(std::span<const int>(v, chunk.size()), winner_votes);
}

DecodeResult SpeechCodec::decode(std::span<const int> frames) const {
  const auto F = static_cast<std::size_t>(cfg_.frames_per_token);
  if (frames.size() % F != 0) {
    throw FramingError("frame count " + std::to_string(frames.size()) +
                       " is not a multiple of frames_per_token " + std::to_string(F));
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i] < 0 || frames[i] >= speech_vocab_size()) {
      throw VocabError("frame " + std::to_string(frames[i]) + " at position " + std::to_string(i) +
                       " outside the speech vocabulary");
    }
  }
  DecodeResult r;
  for (std::size_t p = 0; p * F < frames.size(); ++p) {
    int votes = 0;
    r.tokens.push_back(decode_chunk(frames.subspan(p * F, F), &votes));
    if (2 * votes <= static_cast<int>(F)) r.error_positions.push_back(p);
  }
  return r;
}

std::optional<int> SpeechCodec::read_label(std::span<const int> frames) const {
  std::vector<int> counts(static_cast<std::size_t>(cfg_.num_labels), 0);
  for (int f : frames) {
    if (f >= cfg_.base_symbols && f < speech_vocab_size()) counts[f - cfg_.base_symbols]++;
  }
  auto it = std::max_element(counts.begin(), counts.end());
  if (it == counts.end() || *it == 0) return std::nullopt;
  return static_cast<int>(it - counts.begin());
}

double SpeechCodec::token_error_probability(int token, bool labelled) const {
  if (token < 0 || token >= cfg_.text_vocab_size) throw VocabError("token outside vocabulary");
  auto key = std::make_pair(token, labelled);
  if (auto it = error_cache_.find(key); it != error_cache_.end()) return it->second;

  const int F = cfg_.frames_per_token;
  const int V = cfg_.text_vocab_size;
  const double eps = cfg_.noise_rate;
  const double per_symbol = eps / speech_vocab_size();
  if (std::pow(V + 1.0, F) > 5e7) {
    throw ConfigError("exact error enumeration too large for this codec; reduce frames_per_token");
  }
  // Per position: probability of a vote for each token u (index u) and of
  // casting no vote (index V).
  std::vector<std::vector<double>> dist(F, std::vector<double>(V + 1, 0.0));
  for (int i = 0; i < F; ++i) {
    const int clean = (labelled && i == F - 1) ? label_symbol(0) : forward_[i][token];
    for (int s = 0; s < speech_vocab_size(); ++s) {
      const double p = per_symbol + (s == clean ? 1.0 - eps : 0.0);
      const int v = vote(i, s);
      dist[i][v < 0 ? V : v] += p;
    }
  }
  double err = 0.0;
  std::vector<int> votes(F);
  // Depth-first walk over all (V+1)^F vote combinations.
  auto rec = [&](auto&& self, int i, double prob) -> void {
    if (prob == 0.0) return;
    if (i == F) {
      if (tally(votes, nullptr) != token) err += prob;
      return;
    }
    for (int u = 0; u <= V; ++u) {
      votes[i] = u == V ? -1 : u;
      self(self, i + 1, prob * dist[i][u]);
    }
  };
  rec(rec, 0, 1.0);
  error_cache_[key] = err;
  return err;
}

double poisson_binomial_tail(std::span<const double> p, int max_errors) {
  std::vector<double> dp(p.size() + 1, 0.0);
  dp[0] = 1.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t k = i + 1; k > 0; --k) dp[k] = dp[k] * (1.0 - p[i]) + dp[k - 1] * p[i];
    dp[0] *= 1.0 - p[i];
  }
  double tail = 0.0;
  for (std::size_t k = static_cast<std::size_t>(std::max(max_errors, -1) + 1); k < dp.size(); ++k) {
    tail += dp[k];
  }
  return tail;
}

// ---- tasks -----------------------------------------------------------------

int min_difficulty(TaskFamily) { return 1; }
int max_difficulty(TaskFamily) { return 3; }

namespace {

enum InstructionKind { kRepeatKind, kSortKind, kReverseKind };

int draw(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(uniform_int(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

[[noreturn]] void malformed(TaskFamily f, std::span<const int> prompt) {
  throw DataError("malformed " + to_string(f) + " prompt: '" +
                  vocab::render(std::vector<int>(prompt.begin(), prompt.end())) + "'");
}

bool is_word(int t) { return t >= vocab::kWord0 && t < vocab::kWord0 + vocab::kNumWords; }

}  // namespace

TaskInstance generate_task(TaskFamily family, int difficulty, Rng& rng) {
  if (difficulty < min_difficulty(family) || difficulty > max_difficulty(family)) {
    throw ConfigError(to_string(family) + " difficulty " + std::to_string(difficulty) +
                      " outside [" + std::to_string(min_difficulty(family)) + ", " +
                      std::to_string(max_difficulty(family)) + "]");
  }
  TaskInstance ti;
  ti.family = family;
  ti.difficulty = difficulty;
  auto& p = ti.prompt;
  switch (family) {
    case TaskFamily::kReasoning: {
      // Operands are residues of the modulus, which is drawn first.
      const int m = draw(rng, 2, 9);
      p.push_back(vocab::kLParen);
      p.push_back(vocab::digit(draw(rng, 0, m - 1)));
      for (int k = 0; k < difficulty; ++k) {
        p.push_back(uniform_int(rng, 2) ? vocab::kMinus : vocab::kPlus);
        p.push_back(vocab::digit(draw(rng, 0, m - 1)));
      }
      p.push_back(vocab::kRParen);
      p.push_back(vocab::kMod);
      p.push_back(vocab::digit(m));
      break;
    }
    case TaskFamily::kInstruction: {
      const int kind = draw(rng, 0, 2);
      if (kind == kRepeatKind) {
        p.push_back(vocab::kRepeat);
        for (int k = 0; k < difficulty; ++k) p.push_back(vocab::word(draw(rng, 0, vocab::kNumWords - 1)));
        p.push_back(vocab::digit(draw(rng, 2, 3)));
        p.push_back(vocab::kTimes);
      } else if (kind == kSortKind) {
        p.push_back(vocab::kSort);
        for (int k = 0; k < difficulty + 2; ++k) p.push_back(vocab::digit(draw(rng, 0, 9)));
      } else {
        p.push_back(vocab::kReverse);
        for (int k = 0; k < difficulty + 2; ++k) p.push_back(vocab::word(draw(rng, 0, vocab::kNumWords - 1)));
      }
      break;
    }
    case TaskFamily::kAcoustic: {
      p.push_back(vocab::kToneQuery);
      for (int k = 0; k < difficulty + 1; ++k) p.push_back(vocab::word(draw(rng, 0, vocab::kNumWords - 1)));
      ti.label = draw(rng, 0, vocab::kNumLabels - 1);
      break;
    }
  }
  ti.answer = solve_task(family, ti.prompt, ti.label);
  return ti;
}

std::vector<int> solve_task(TaskFamily family, std::span<const int> prompt,
                            std::optional<int> label) {
  using namespace vocab;
  const std::size_t n = prompt.size();
  switch (family) {
    case TaskFamily::kReasoning: {
      // ( d (op d)+ ) mod m
      if (n < 7 || n % 2 == 0 || prompt[0] != kLParen || prompt[n - 3] != kRParen ||
          prompt[n - 2] != kMod || !is_digit(prompt[n - 1]) || !is_digit(prompt[1])) {
        malformed(family, prompt);
      }
      const int m = prompt[n - 1] - kDigit0;
      if (m < 2) malformed(family, prompt);
      int v = prompt[1] - kDigit0;
      for (std::size_t i = 2; i + 3 < n; i += 2) {
        const int op = prompt[i];
        if ((op != kPlus && op != kMinus) || !is_digit(prompt[i + 1])) malformed(family, prompt);
        v += (op == kPlus ? 1 : -1) * (prompt[i + 1] - kDigit0);
      }
      return {digit(((v % m) + m) % m)};
    }
    case TaskFamily::kInstruction: {
      if (n < 2) malformed(family, prompt);
      std::vector<int> body(prompt.begin() + 1, prompt.end());
      if (prompt[0] == kRepeat) {
        if (n < 4 || prompt[n - 1] != kTimes || !is_digit(prompt[n - 2])) malformed(family, prompt);
        std::vector<int> items(prompt.begin() + 1, prompt.end() - 2);
        if (items.empty() || !std::all_of(items.begin(), items.end(), is_word)) malformed(family, prompt);
        std::vector<int> out;
        for (int k = 0; k < prompt[n - 2] - kDigit0; ++k) out.insert(out.end(), items.begin(), items.end());
        return out;
      }
      if (prompt[0] == kSort) {
        if (!std::all_of(body.begin(), body.end(), [](int t) { return is_digit(t); })) malformed(family, prompt);
        std::sort(body.begin(), body.end());
        return body;
      }
      if (prompt[0] == kReverse) {
        if (!std::all_of(body.begin(), body.end(), is_word)) malformed(family, prompt);
        std::reverse(body.begin(), body.end());
        return body;
      }
      malformed(family, prompt);
    }
    case TaskFamily::kAcoustic: {
      if (n < 2 || prompt[0] != kToneQuery || !std::all_of(prompt.begin() + 1, prompt.end(), is_word)) {
        malformed(family, prompt);
      }
      if (!label) throw DataError("acoustic task needs a prosody label");
      return {vocab::label(*label)};
    }
  }
  malformed(family, prompt);
}

// ---- examples and datasets --------------------------------------------------

void to_json(nlohmann::json& j, const PairedExample& e) {
  j = {{"id", e.id},
       {"family", to_string(e.family)},
       {"difficulty", e.difficulty},
       {"text_prompt", e.text_prompt},
       {"speech_prompt", e.speech_prompt},
       {"reference_answer", e.reference_answer},
       {"label", e.label ? nlohmann::json(*e.label) : nlohmann::json(nullptr)},
       {"round_trip_error_rate", e.round_trip_error_rate}};
  if (!e.provenance.empty()) j["provenance"] = e.provenance;
}

void from_json(const nlohmann::json& j, PairedExample& e) {
  try {
    e.id = j.at("id").get<std::int64_t>();
    e.family = task_family_from_string(j.at("family").get<std::string>());
    e.difficulty = j.value("difficulty", 1);
    e.text_prompt = j.at("text_prompt").get<std::vector<int>>();
    e.speech_prompt = j.at("speech_prompt").get<std::vector<int>>();
    e.reference_answer = j.at("reference_answer").get<std::vector<int>>();
    e.label = j.contains("label") && !j["label"].is_null() ? std::optional<int>(j["label"].get<int>())
                                                           : std::nullopt;
    e.round_trip_error_rate = j.value("round_trip_error_rate", 0.0);
    e.provenance = j.value("provenance", std::string());
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("bad example record: ") + ex.what());
  }
}

std::string prompt_key(TaskFamily family, std::span<const int> prompt, std::optional<int> label) {
  std::string k = to_string(family) + ":";
  for (int t : prompt) k += std::to_string(t) + ",";
  if (label) k += "#" + std::to_string(*label);
  return k;
}

DatasetSpec DatasetSpec::defaults(std::uint64_t seed) {
  using F = TaskFamily;
  DatasetSpec s;
  s.seed = seed;
  s.splits = {
      {"train", {{F::kReasoning, 1000}, {F::kInstruction, 1000}}},
      {"gap", {{F::kReasoning, 150}, {F::kInstruction, 150}, {F::kAcoustic, 1000}}},
      {"val", {{F::kReasoning, 200}, {F::kInstruction, 200}, {F::kAcoustic, 200}}},
      {"test", {{F::kReasoning, 500}, {F::kInstruction, 500}, {F::kAcoustic, 500}}},
  };
  s.difficulty = {{F::kReasoning, {1, 2}}, {F::kInstruction, {1, 2}}, {F::kAcoustic, {1, 2}}};
  return s;
}

void DatasetSpec::validate() const {
  if (splits.empty()) throw ConfigError("dataset: no splits");
  std::set<std::string> names;
  for (const auto& sp : splits) {
    if (!names.insert(sp.name).second) throw ConfigError("dataset: duplicate split '" + sp.name + "'");
    for (const auto& [f, n] : sp.sizes) {
      if (n < 1) throw ConfigError("dataset: split '" + sp.name + "' " + to_string(f) + " size must be >= 1");
    }
  }
  for (const auto& [f, r] : difficulty) {
    if (r.first > r.second || r.first < min_difficulty(f) || r.second > max_difficulty(f)) {
      throw ConfigError("dataset: bad difficulty range for " + to_string(f));
    }
  }
  if (!(filter_threshold >= 0.0 && filter_threshold <= 1.0)) {
    throw ConfigError("dataset: filter_threshold must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& sp : s.splits) {
    nlohmann::json sizes = nlohmann::json::object();
    for (const auto& [f, n] : sp.sizes) sizes[to_string(f)] = n;
    splits.push_back({{"name", sp.name}, {"sizes", sizes}});
  }
  nlohmann::json diff = nlohmann::json::object();
  for (const auto& [f, r] : s.difficulty) diff[to_string(f)] = {r.first, r.second};
  j = {{"splits", splits},
       {"difficulty", diff},
       {"filter_threshold", s.filter_threshold},
       {"max_rejection_rate", s.max_rejection_rate},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d = DatasetSpec::defaults(j.value("seed", std::uint64_t{0}));
  s = d;
  if (j.contains("splits")) {
    s.splits.clear();
    for (const auto& sp : j.at("splits")) {
      SplitSpec ss;
      ss.name = sp.at("name").get<std::string>();
      for (const auto& [k, v] : sp.at("sizes").items()) ss.sizes[task_family_from_string(k)] = v.get<int>();
      s.splits.push_back(ss);
    }
  }
  if (j.contains("difficulty")) {
    for (const auto& [k, v] : j.at("difficulty").items()) {
      s.difficulty[task_family_from_string(k)] = {v.at(0).get<int>(), v.at(1).get<int>()};
    }
  }
  s.filter_threshold = j.value("filter_threshold", d.filter_threshold);
  s.max_rejection_rate = j.value("max_rejection_rate", d.max_rejection_rate);
}

const std::vector<PairedExample>& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw DataError("dataset has no split '" + name + "'");
  return it->second;
}

FilterStats Dataset::total_stats() const {
  FilterStats t;
  for (const auto& [_, per] : stats) {
    for (const auto& [__, s] : per) {
      t.attempts += s.attempts;
      t.rejected += s.rejected;
      t.duplicates += s.duplicates;
      t.predicted_rejections += s.predicted_rejections;
    }
  }
  return t;
}

std::set<std::string> Dataset::prompt_keys(const std::vector<std::string>& split_names) const {
  std::set<std::string> keys;
  for (const auto& n : split_names) {
    auto it = splits.find(n);
    if (it == splits.end()) continue;
    for (const auto& e : it->second) keys.insert(prompt_key(e.family, e.text_prompt, e.label));
  }
  return keys;
}

namespace {

nlohmann::json stats_json(const FilterStats& s) {
  return {{"attempts", s.attempts},
          {"rejected", s.rejected},
          {"duplicates", s.duplicates},
          {"rejection_rate", s.rejection_rate()},
          {"predicted_rejection_rate", s.predicted_rate()}};
}

int max_round_trip_errors(std::size_t n, double threshold) {
  return static_cast<int>(std::floor(threshold * static_cast<double>(n) + 1e-9));
}

}  // namespace

bool admits(double error_rate, double threshold) { return error_rate <= threshold + 1e-12; }

nlohmann::json Dataset::manifest() const {
  nlohmann::json m;
  m["format_version"] = 1;
  m["seed"] = spec.seed;
  m["codec"] = codec;
  m["spec"] = spec;
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [name, fams] : stats) {
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [f, st] : fams) {
      s[to_string(f)] = stats_json(st);
      s[to_string(f)]["count"] = std::count_if(splits.at(name).begin(), splits.at(name).end(),
                                               [&](const PairedExample& e) { return e.family == f; });
    }
    per[name] = s;
  }
  m["splits"] = per;
  m["totals"] = stats_json(total_stats());
  return m;
}

Dataset build_dataset(const DatasetSpec& spec, const SpeechCodec& codec) {
  spec.validate();
  Dataset ds;
  ds.codec = codec.config();
  ds.spec = spec;
  std::set<std::string> used;
  std::int64_t next_id = 0;
  for (std::size_t si = 0; si < spec.splits.size(); ++si) {
    const auto& sp = spec.splits[si];
    auto& out = ds.splits[sp.name];
    for (TaskFamily f : kAllFamilies) {
      auto sz = sp.sizes.find(f);
      if (sz == sp.sizes.end()) continue;
      auto dr = spec.difficulty.count(f) ? spec.difficulty.at(f) : std::pair{1, 2};
      FilterStats& st = ds.stats[sp.name][f];
      int admitted = 0;
      std::uint64_t candidate = 0;
      const long attempt_cap = 100L * sz->second + 1000;
      while (admitted < sz->second) {
        if (static_cast<long>(candidate) > attempt_cap) {
          throw DataError("could not fill split '" + sp.name + "' " + to_string(f) +
                          ": prompt space exhausted after " + std::to_string(candidate) + " candidates");
        }
        Rng rng(derive_seed(spec.seed, SeedStream::kDataset,
                            {si, static_cast<std::uint64_t>(f), candidate++}));
        const int diff = draw(rng, dr.first, dr.second);
        TaskInstance ti = generate_task(f, diff, rng);
        const std::string key = prompt_key(f, ti.prompt, ti.label);
        if (used.count(key)) {
          st.duplicates++;
          continue;
        }
        st.attempts++;
        PairedExample e;
        e.family = f;
        e.difficulty = diff;
        e.text_prompt = ti.prompt;
        e.reference_answer = ti.answer;
        e.label = ti.label;
        e.speech_prompt = codec.encode(e.text_prompt, e.label, rng);

        std::vector<double> p;
        for (int t : e.text_prompt) p.push_back(codec.token_error_probability(t, e.label.has_value()));
        const int max_err = max_round_trip_errors(e.text_prompt.size(), spec.filter_threshold);
        st.predicted_rejections += poisson_binomial_tail(p, max_err);

        DecodeResult dec = codec.decode(e.speech_prompt);
        std::size_t wrong = 0;
        for (std::size_t i = 0; i < dec.tokens.size(); ++i) wrong += dec.tokens[i] != e.text_prompt[i];
        e.round_trip_error_rate = static_cast<double>(wrong) / static_cast<double>(e.text_prompt.size());
        const bool label_ok = !e.label || codec.read_label(e.speech_prompt) == e.label;
        if (static_cast<int>(wrong) > max_err || !label_ok) {
          st.rejected++;
          if (st.attempts >= 200 && st.rejection_rate() > spec.max_rejection_rate) {
            throw GenerationQualityError(
                "round-trip rejection rate " + std::to_string(st.rejection_rate()) + " for " +
                to_string(f) + " exceeds " + std::to_string(spec.max_rejection_rate) +
                "; noise_rate is too high for frames_per_token " +
                std::to_string(codec.frames_per_token()));
          }
          continue;
        }
        e.id = next_id++;
        assert_semantic_invariance(e, codec);
        used.insert(key);
        out.push_back(std::move(e));
        ++admitted;
      }
    }
  }
  const FilterStats tot = ds.total_stats();
  if (tot.rejection_rate() > spec.max_rejection_rate) {
    throw GenerationQualityError("overall round-trip rejection rate " +
                                 std::to_string(tot.rejection_rate()) + " exceeds " +
                                 std::to_string(spec.max_rejection_rate));
  }
  return ds;
}

void assert_semantic_invariance(const PairedExample& e, const SpeechCodec& codec) {
  if (e.speech_prompt.size() != e.text_prompt.size() * static_cast<std::size_t>(codec.frames_per_token())) {
    throw DataError("example " + std::to_string(e.id) + ": speech length is not F x text length");
  }
  const auto from_text = solve_task(e.family, e.text_prompt, e.label);
  const DecodeResult dec = codec.decode(e.speech_prompt);
  std::vector<int> from_speech;
  try {
    from_speech = solve_task(e.family, dec.tokens,
                             e.family == TaskFamily::kAcoustic ? codec.read_label(e.speech_prompt)
                                                               : std::nullopt);
  } catch (const DataError&) {
    throw DataError("example " + std::to_string(e.id) + ": decoded speech prompt is not a valid task");
  }
  if (from_speech != from_text || from_text != e.reference_answer) {
    throw DataError("example " + std::to_string(e.id) + ": semantic invariance violated");
  }
}

void write_examples_jsonl(const std::filesystem::path& path, const std::vector<PairedExample>& xs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& e : xs) out << nlohmann::json(e).dump() << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<PairedExample> read_examples_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<PairedExample> xs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      xs.push_back(nlohmann::json::parse(line).get<PairedExample>());
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return xs;
}

nlohmann::json write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m = ds.manifest();
  nlohmann::json files = nlohmann::json::object();
  for (const auto& sp : ds.spec.splits) {
    const auto path = dir / (sp.name + ".jsonl");
    write_examples_jsonl(path, ds.split(sp.name));
    files[sp.name + ".jsonl"] = sha256_file(path);
  }
  m["files"] = files;
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw DataError("missing dataset manifest " + mpath.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("bad manifest " + mpath.string() + ": " + ex.what());
  }
  Dataset ds;
  ds.codec = m.at("codec").get<CodecConfig>();
  ds.spec = m.at("spec").get<DatasetSpec>();
  for (const auto& sp : ds.spec.splits) {
    const auto path = dir / (sp.name + ".jsonl");
    ds.splits[sp.name] = read_examples_jsonl(path);
    if (m.contains("files") && m["files"].contains(sp.name + ".jsonl") &&
        m["files"][sp.name + ".jsonl"] != sha256_file(path)) {
      throw DataError("dataset file " + path.string() + " does not match its manifest hash");
    }
  }
  for (const auto& [name, fams] : m.value("splits", nlohmann::json::object()).items()) {
    for (const auto& [f, s] : fams.items()) {
      FilterStats st;
      st.attempts = s.value("attempts", 0L);
      st.rejected = s.value("rejected", 0L);
      st.duplicates = s.value("duplicates", 0L);
      st.predicted_rejections = s.value("predicted_rejection_rate", 0.0) * static_cast<double>(st.attempts);
      ds.stats[name][task_family_from_string(f)] = st;
    }
  }
  return ds;
}

}  // namespace xopd
