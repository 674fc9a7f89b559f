// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace xopd {

using Rng = std::mt19937_64;

// splitmix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Child seed from a parent seed and a path of integer keys. Every component
// seed in the lab is derived this way from the single master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(master);
  for (auto k : path) s = mix64(s ^ mix64(k + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags keep derived seeds of different components apart.
enum class SeedStream : std::uint64_t {
  kDataset = 1,
  kTeacherInit = 2,
  kTeacherData = 3,
  kStudentInit = 4,
  kGapTraining = 5,
  kRollout = 6,
  kMethod = 7,
  kCodec = 8,
  kEval = 9,
};

inline std::uint64_t derive_seed(std::uint64_t master, SeedStream stream,
                                 std::initializer_list<std::uint64_t> path = {}) {
  std::uint64_t s = derive_seed(master, {static_cast<std::uint64_t>(stream)});
  for (auto k : path) s = mix64(s ^ mix64(k + 0x632be59bd9b4e019ULL));
  return s;
}

inline double uniform01(Rng& rng) {
  // 53 random bits, independent of the standard library's distribution code
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::uint64_t uniform_int(Rng& rng, std::uint64_t n) {
  std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
  return d(rng);
}

}  // namespace xopd
