// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Text token layout shared by the models and the corpus generators.

#pragma once

#include <string>
#include <vector>

namespace xopd::vocab {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;

inline constexpr int kDigit0 = 4;  // digits 0..9 -> 4..13
inline constexpr int kPlus = 14;
inline constexpr int kMinus = 15;
inline constexpr int kMod = 16;
inline constexpr int kLParen = 17;
inline constexpr int kRParen = 18;

inline constexpr int kRepeat = 19;
inline constexpr int kTimes = 20;
inline constexpr int kSort = 21;
inline constexpr int kReverse = 22;

inline constexpr int kToneQuery = 23;
inline constexpr int kLabel0 = 24;  // prosody labels -> 24..27
inline constexpr int kNumLabels = 4;

inline constexpr int kWord0 = 28;  // carrier / item words -> 28..43
inline constexpr int kNumWords = 16;

// Tokens 44..63 are reserved and never generated.
inline constexpr int kDefaultSize = 64;

inline constexpr int digit(int d) { return kDigit0 + d; }
inline constexpr int word(int w) { return kWord0 + w; }
inline constexpr int label(int l) { return kLabel0 + l; }
inline constexpr bool is_digit(int t) { return t >= kDigit0 && t < kDigit0 + 10; }

std::string token_name(int id);
std::string render(const std::vector<int>& tokens);

}  // namespace xopd::vocab
