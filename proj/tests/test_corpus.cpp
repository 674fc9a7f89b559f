// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "xopd/corpus.hpp"
#include "xopd/errors.hpp"
#include "xopd/params.hpp"
#include "xopd/vocab.hpp"

using namespace xopd;
using Catch::Approx;

namespace {

SpeechCodec make_codec(double eps, std::uint64_t seed = 3) {
  CodecConfig c;
  c.noise_rate = eps;
  c.seed = seed;
  return SpeechCodec(c);
}

std::vector<int> random_text(Rng& rng, std::size_t n) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(uniform_int(rng, 64));
  return t;
}

DatasetSpec small_spec(std::uint64_t seed) {
  DatasetSpec s = DatasetSpec::defaults(seed);
  using F = TaskFamily;
  s.splits = {{"train", {{F::kReasoning, 60}, {F::kInstruction, 60}}},
              {"test", {{F::kReasoning, 40}, {F::kInstruction, 40}, {F::kAcoustic, 40}}}};
  return s;
}

}  // namespace

TEST_CASE("codewords of distinct tokens differ in every frame") {
  SpeechCodec c = make_codec(0.0);
  for (int a = 0; a < 64; ++a)
    for (int b = a + 1; b < 64; ++b) {
      auto fa = c.frame_map(a), fb = c.frame_map(b);
      for (int i = 0; i < 3; ++i) CHECK(fa[i] != fb[i]);
    }
}

TEST_CASE("noiseless round trip is the identity") {
  SpeechCodec c = make_codec(0.0);
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    auto t = random_text(rng, 1 + uniform_int(rng, 30));
    auto s = c.encode(t, std::nullopt, rng);
    REQUIRE(s.size() == 3 * t.size());
    auto d = c.decode(s);
    CHECK(d.tokens == t);
    CHECK(d.error_positions.empty());
  }
}

TEST_CASE("labelled noiseless speech still decodes and carries its label") {
  SpeechCodec c = make_codec(0.0);
  Rng rng(2);
  for (int l = 0; l < 4; ++l) {
    auto t = random_text(rng, 6);
    auto s = c.encode(t, l, rng);
    CHECK(c.decode(s).tokens == t);
    CHECK(c.read_label(s) == l);
  }
  auto plain = c.encode(std::vector<int>{5, 6}, std::nullopt, rng);
  CHECK_FALSE(c.read_label(plain).has_value());
}

TEST_CASE("full noise drives the token error rate to one minus chance") {
  SpeechCodec c = make_codec(1.0);
  Rng rng(3);
  const std::size_t n = 100000;
  auto t = random_text(rng, n);
  auto d = c.decode(c.encode(t, std::nullopt, rng));
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < n; ++i) wrong += d.tokens[i] != t[i];
  const double p = 1.0 - 1.0 / 64.0;
  const double sd = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(double(wrong) / n - p) < 3 * sd);
}

TEST_CASE("encoding is deterministic for a fixed seed") {
  SpeechCodec c = make_codec(0.3);
  std::vector<int> t{4, 5, 6, 7, 8};
  Rng a(11), b(11);
  CHECK(c.encode(t, 2, a) == c.encode(t, 2, b));
  CHECK(make_codec(0.0, 9).frame_map(17) == make_codec(0.0, 9).frame_map(17));
  CHECK(make_codec(0.0, 9).frame_map(17) != make_codec(0.0, 10).frame_map(17));
}

TEST_CASE("majority vote survives one corrupted frame") {
  SpeechCodec c = make_codec(0.0);
  for (int tok = 0; tok < 64; ++tok) {
    for (int pos = 0; pos < 3; ++pos) {
      auto f = c.frame_map(tok);
      f[pos] = c.frame_map((tok + 1) % 64)[pos];
      auto d = c.decode(f);
      CHECK(d.tokens[0] == tok);
      CHECK(d.error_positions.empty());
    }
  }
}

TEST_CASE("two corrupted frames produce a flagged or wrong decode") {
  SpeechCodec c = make_codec(0.0);
  const int tok = 20;
  std::vector<int> frames = c.frame_map(4);  // a clean neighbour token first
  auto bad = c.frame_map(tok);
  // split corruption: three different tokens get one vote each
  bad[0] = c.frame_map(30)[0];
  bad[1] = c.frame_map(31)[1];
  frames.insert(frames.end(), bad.begin(), bad.end());
  auto d = c.decode(frames);
  CHECK(d.tokens[0] == 4);
  REQUIRE(d.error_positions == std::vector<std::size_t>{1});
  CHECK(d.tokens[1] == 20);  // lowest id among the tied votes

  // coordinated corruption: a different token wins outright
  auto coord = c.frame_map(tok);
  coord[0] = c.frame_map(9)[0];
  coord[2] = c.frame_map(9)[2];
  CHECK(c.decode(coord).tokens[0] == 9);
}

TEST_CASE("codec input validation") {
  SpeechCodec c = make_codec(0.0);
  Rng rng(0);
  CHECK_THROWS_AS(c.decode(std::vector<int>{1, 2}), FramingError);
  CHECK_THROWS_AS(c.encode(std::vector<int>{64}, std::nullopt, rng), VocabError);
  CHECK_THROWS_AS(c.encode(std::vector<int>{4}, 4, rng), VocabError);
  CodecConfig bad;
  bad.noise_rate = 1.5;
  CHECK_THROWS_AS(SpeechCodec(bad), ConfigError);
}

TEST_CASE("exact per-token error probability agrees with simulation") {
  SpeechCodec c = make_codec(0.3);
  Rng rng(5);
  for (bool labelled : {false, true}) {
    for (int tok : {0, 5, 40, 63}) {
      const double p = c.token_error_probability(tok, labelled);
      const int n = 40000;
      int wrong = 0;
      std::vector<int> t{tok};
      for (int i = 0; i < n; ++i) {
        auto s = c.encode(t, labelled ? std::optional<int>(1) : std::nullopt, rng);
        wrong += c.decode(s).tokens[0] != tok;
      }
      const double sd = std::sqrt(p * (1 - p) / n);
      INFO("token " << tok << " labelled " << labelled << " p " << p);
      CHECK(std::abs(double(wrong) / n - p) < 4 * sd);
    }
  }
  CHECK(make_codec(0.0).token_error_probability(7, false) == 0.0);
}

TEST_CASE("poisson-binomial tail matches the binomial closed form") {
  const double p = 0.13;
  std::vector<double> ps(9, p);
  for (int k = -1; k <= 9; ++k) {
    double tail = 0.0;
    for (int j = k + 1; j <= 9; ++j) {
      double comb = std::tgamma(10.0) / (std::tgamma(j + 1.0) * std::tgamma(10.0 - j));
      tail += comb * std::pow(p, j) * std::pow(1 - p, 9 - j);
    }
    CHECK(poisson_binomial_tail(ps, k) == Approx(tail).margin(1e-12));
  }
}

TEST_CASE("task generators produce canonical answers") {
  using namespace vocab;
  CHECK(solve_task(TaskFamily::kReasoning,
                   std::vector<int>{kLParen, digit(3), kPlus, digit(4), kRParen, kMod, digit(5)},
                   std::nullopt) == std::vector<int>{digit(2)});
  CHECK(solve_task(TaskFamily::kReasoning,
                   std::vector<int>{kLParen, digit(1), kMinus, digit(9), kMinus, digit(0), kRParen, kMod,
                                    digit(3)},
                   std::nullopt) == std::vector<int>{digit(1)});
  CHECK(solve_task(TaskFamily::kInstruction, std::vector<int>{kSort, digit(3), digit(1), digit(2)},
                   std::nullopt) == std::vector<int>{digit(1), digit(2), digit(3)});
  CHECK(solve_task(TaskFamily::kInstruction, std::vector<int>{kRepeat, word(2), word(5), digit(2), kTimes},
                   std::nullopt) == std::vector<int>{word(2), word(5), word(2), word(5)});
  CHECK(solve_task(TaskFamily::kInstruction, std::vector<int>{kReverse, word(1), word(2), word(3)},
                   std::nullopt) == std::vector<int>{word(3), word(2), word(1)});
  CHECK(solve_task(TaskFamily::kAcoustic, std::vector<int>{kToneQuery, word(0), word(1)}, 3) ==
        std::vector<int>{label(3)});
  CHECK_THROWS_AS(solve_task(TaskFamily::kReasoning, std::vector<int>{kSort}, std::nullopt), DataError);

  Rng rng(4);
  for (TaskFamily f : kAllFamilies) {
    for (int d = 1; d <= 3; ++d) {
      for (int k = 0; k < 50; ++k) {
        TaskInstance ti = generate_task(f, d, rng);
        CHECK(solve_task(f, ti.prompt, ti.label) == ti.answer);
        CHECK(ti.label.has_value() == (f == TaskFamily::kAcoustic));
      }
    }
  }
  CHECK_THROWS_AS(generate_task(TaskFamily::kReasoning, 4, rng), ConfigError);
}

TEST_CASE("acoustic text prompts carry no label information") {
  // The text prompt is drawn before the label and never depends on it.
  Rng rng(6);
  std::map<std::string, std::set<int>> labels_by_prompt;
  for (int k = 0; k < 5000; ++k) {
    TaskInstance ti = generate_task(TaskFamily::kAcoustic, 1, rng);
    labels_by_prompt[vocab::render(ti.prompt)].insert(*ti.label);
  }
  std::size_t multi = 0;
  for (const auto& [_, ls] : labels_by_prompt) multi += ls.size() > 1;
  CHECK(multi > labels_by_prompt.size() / 2);
}

TEST_CASE("noiseless dataset admits everything and respects invariants") {
  SpeechCodec c = make_codec(0.0);
  Dataset ds = build_dataset(small_spec(1), c);
  CHECK(ds.total_stats().rejected == 0);
  CHECK(ds.split("train").size() == 120);
  CHECK(ds.split("test").size() == 120);
  auto train = ds.prompt_keys({"train"});
  for (const auto& e : ds.split("test")) CHECK_FALSE(train.count(prompt_key(e.family, e.text_prompt, e.label)));
  for (const auto& [_, xs] : ds.splits)
    for (const auto& e : xs) CHECK_NOTHROW(assert_semantic_invariance(e, c));
}

TEST_CASE("noisy dataset keeps only examples within the error threshold") {
  SpeechCodec c = make_codec(0.1);
  Dataset ds = build_dataset(small_spec(2), c);
  CHECK(ds.total_stats().rejected > 0);
  for (const auto& [_, xs] : ds.splits)
    for (const auto& e : xs) {
      CHECK(admits(e.round_trip_error_rate, 0.05));
      CHECK(e.speech_prompt.size() == 3 * e.text_prompt.size());
      CHECK_NOTHROW(assert_semantic_invariance(e, c));
    }
}

TEST_CASE("excessive noise is reported as a generation-quality failure") {
  SpeechCodec c = make_codec(0.9);
  CHECK_THROWS_AS(build_dataset(small_spec(3), c), GenerationQualityError);
}

TEST_CASE("rejection rate at roughly eight percent token error matches the binomial tail") {
  // Find the noise rate whose mean per-token error (over the text vocabulary)
  // is 8%, then compare the measured and predicted rejection rates.
  double lo = 0.0, hi = 0.6;
  for (int it = 0; it < 30; ++it) {
    const double mid = 0.5 * (lo + hi);
    SpeechCodec c = make_codec(mid);
    double mean = 0.0;
    for (int t = 0; t < 64; ++t) mean += c.token_error_probability(t, false) / 64.0;
    (mean < 0.08 ? lo : hi) = mid;
  }
  SpeechCodec c = make_codec(0.5 * (lo + hi));
  DatasetSpec s = DatasetSpec::defaults(4);
  s.splits = {{"all", {{TaskFamily::kReasoning, 1500}, {TaskFamily::kInstruction, 1500}}}};
  s.max_rejection_rate = 0.95;
  Dataset ds = build_dataset(s, c);
  const auto st = ds.total_stats();
  INFO("measured " << st.rejection_rate() << " predicted " << st.predicted_rate());
  CHECK(std::abs(st.rejection_rate() - st.predicted_rate()) < 0.02);
}

TEST_CASE("dataset generation is reproducible byte for byte") {
  SpeechCodec c = make_codec(0.05);
  auto base = std::filesystem::temp_directory_path() / "xopd_test_corpus";
  std::filesystem::remove_all(base);
  auto m1 = write_dataset(build_dataset(small_spec(7), c), base / "a");
  auto m2 = write_dataset(build_dataset(small_spec(7), c), base / "b");
  CHECK(sha256_file(base / "a" / "manifest.json") == sha256_file(base / "b" / "manifest.json"));
  CHECK(m1["files"] == m2["files"]);
  auto m3 = write_dataset(build_dataset(small_spec(8), c), base / "c");
  CHECK(m1["files"] != m3["files"]);

  Dataset back = load_dataset(base / "a");
  CHECK(back.split("train").size() == 120);
  CHECK(nlohmann::json(back.split("test")) == nlohmann::json(build_dataset(small_spec(7), c).split("test")));
  std::filesystem::remove_all(base);
}
