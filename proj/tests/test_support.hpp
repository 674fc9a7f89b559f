// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites: finite-difference gradient checks and
// small model fixtures.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "xopd/corpus.hpp"
#include "xopd/model.hpp"
#include "xopd/tensor.hpp"

namespace xopd::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Builds a scalar from the op output: sum(w * out) with fixed random w.
using OpFn = std::function<Var(Graph&, std::vector<Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
};

inline double weighted_output(const OpFn& op, std::vector<Tensor>& inputs,
                              const std::vector<double>& weights) {
  Graph g(GradMode::kNoGrad);
  std::vector<Var> vars;
  for (auto& t : inputs) vars.push_back(g.param(t));
  Var out = op(g, vars);
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += weights[i] * out.value().data[i];
  return s;
}

// Central-difference check of every input's gradient; returns the largest
// relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8).
inline GradCheck check_gradients(const OpFn& op, std::vector<Tensor> inputs, std::mt19937_64& rng,
                                 double h = 1e-5) {
  std::vector<double> weights;
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(g.param(t));
    Var out = op(g, vars);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    weights.resize(out.numel());
    for (auto& w : weights) w = u(rng);
    Var loss = sum(mul(out, g.constant(Tensor(out.shape(), weights))));
    g.backward(loss);
    for (auto& t : inputs) {
      auto gr = g.param_grad(t);
      analytic.emplace_back(gr.begin(), gr.end());
      if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
    }
  }
  GradCheck res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad) continue;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = inputs[k].data[i];
      inputs[k].data[i] = orig + h;
      const double fp = weighted_output(op, inputs, weights);
      inputs[k].data[i] = orig - h;
      const double fm = weighted_output(op, inputs, weights);
      inputs[k].data[i] = orig;
      const double num = (fp - fm) / (2.0 * h);
      const double an = analytic[k][i];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    res.max_rel_error = std::max(res.max_rel_error, rel);
  }
  return res;
}

inline ModelConfig tiny_config(int vocab = 6) {
  ModelConfig c;
  c.text_vocab_size = vocab;
  c.speech_vocab_size = 7;
  c.embed_dim = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_hidden = 8;
  c.max_seq_len = 32;
  c.frames_per_token = 1;
  c.speech_embed_dim = 4;
  return c;
}

// Gives every parameter (including the zero-initialised head) O(scale)
// random values so toy models have non-trivial distributions.
inline void randomize(ParamSet& params, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& [name, t] : params) {
    if (name.find("gain") != std::string::npos) {
      for (auto& v : t.data) v = 1.0 + 0.1 * nd(rng);
    } else {
      for (auto& v : t.data) v = nd(rng);
    }
  }
}

// Paired examples over the tiny config: text ids in [4, V), speech ids in
// [0, 7), single-token answers.
inline std::vector<PairedExample> toy_examples(int n, int V = 6, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(4, V - 1), sp(0, 6), len(1, 3);
  std::vector<PairedExample> xs;
  for (int i = 0; i < n; ++i) {
    PairedExample e;
    e.id = i;
    e.family = i % 2 ? TaskFamily::kInstruction : TaskFamily::kReasoning;
    e.difficulty = 1;
    const int L = len(rng);
    for (int k = 0; k < L; ++k) {
      e.text_prompt.push_back(tok(rng));
      e.speech_prompt.push_back(sp(rng));
    }
    e.reference_answer = {tok(rng)};
    xs.push_back(std::move(e));
  }
  return xs;
}

// Forces greedy decoding of `m` to emit `token` at every step.
template <class Model>
void force_constant_output(Model& m, int token) {
  auto& w = m.params.at("head.weight");
  std::fill(w.data.begin(), w.data.end(), 0.0);
  auto& b = m.params.at("head.bias");
  std::fill(b.data.begin(), b.data.end(), -60.0);
  b.data[static_cast<std::size_t>(token)] = 60.0;
}

}  // namespace xopd::testing
