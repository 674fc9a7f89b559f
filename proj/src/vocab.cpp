// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/vocab.hpp"

namespace xopd::vocab {

std::string token_name(int id) {
  switch (id) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kSep: return "<sep>";
    case kPlus: return "+";
    case kMinus: return "-";
    case kMod: return "mod";
    case kLParen: return "(";
    case kRParen: return ")";
    case kRepeat: return "repeat";
    case kTimes: return "times";
    case kSort: return "sort";
    case kReverse: return "reverse";
    case kToneQuery: return "tone?";
    default: break;
  }
  if (is_digit(id)) return std::to_string(id - kDigit0);
  if (id >= kLabel0 && id < kLabel0 + kNumLabels) {
    static const char* names[] = {"calm", "happy", "sad", "angry"};
    return names[id - kLabel0];
  }
  if (id >= kWord0 && id < kWord0 + kNumWords) return "w" + std::to_string(id - kWord0);
  return "<r" + std::to_string(id) + ">";
}

std::string render(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_name(tokens[i]);
  }
  return out;
}

}  // namespace xopd::vocab
