// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "xopd/errors.hpp"
#include "xopd/vocab.hpp"

namespace xopd {

std::string to_string(Modality m) { return m == Modality::kText ? "text" : "speech"; }

Modality modality_from_string(const std::string& s) {
  if (s == "text") return Modality::kText;
  if (s == "speech") return Modality::kSpeech;
  throw ConfigError("unknown modality '" + s + "' (expected text or speech)");
}

void ModelConfig::validate() const {
  const std::pair<const char*, int> counts[] = {
      {"text_vocab_size", text_vocab_size}, {"speech_vocab_size", speech_vocab_size},
      {"embed_dim", embed_dim},             {"n_layers", n_layers},
      {"n_heads", n_heads},                 {"mlp_hidden", mlp_hidden},
      {"max_seq_len", max_seq_len},         {"frames_per_token", frames_per_token},
      {"speech_embed_dim", speech_embed_dim}};
  for (const auto& [name, v] : counts) {
    if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
  }
  if (embed_dim % n_heads != 0) {
    throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (!answer_vocab_is_text) throw ConfigError("model config: answers are always text tokens");
  if (text_vocab_size <= vocab::kSep) {
    throw ConfigError("model config: text vocabulary must hold the BOS/EOS/SEP specials");
  }
}

bool ModelConfig::backbone_compatible(const ModelConfig& o) const {
  return text_vocab_size == o.text_vocab_size && embed_dim == o.embed_dim &&
         n_layers == o.n_layers && n_heads == o.n_heads && mlp_hidden == o.mlp_hidden &&
         max_seq_len == o.max_seq_len;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"text_vocab_size", c.text_vocab_size},
       {"speech_vocab_size", c.speech_vocab_size},
       {"answer_vocab_is_text", c.answer_vocab_is_text},
       {"embed_dim", c.embed_dim},
       {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},
       {"mlp_hidden", c.mlp_hidden},
       {"max_seq_len", c.max_seq_len},
       {"frames_per_token", c.frames_per_token},
       {"speech_embed_dim", c.speech_embed_dim}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.text_vocab_size = j.value("text_vocab_size", d.text_vocab_size);
  c.speech_vocab_size = j.value("speech_vocab_size", d.speech_vocab_size);
  c.answer_vocab_is_text = j.value("answer_vocab_is_text", d.answer_vocab_is_text);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.frames_per_token = j.value("frames_per_token", d.frames_per_token);
  c.speech_embed_dim = j.value("speech_embed_dim", d.speech_embed_dim);
}

bool is_speech_pathway_param(const std::string& name) {
  return name.starts_with("speech_tower.") || name.starts_with("adapter.");
}

namespace {

Tensor normal_tensor(Shape shape, double stdev, Rng& rng) {
  std::normal_distribution<double> nd(0.0, stdev);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

Tensor filled(Shape shape, double v) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

std::string block_name(int l, const char* leaf) {
  return "blocks." + std::to_string(l) + "." + leaf;
}

struct ModelView {
  const ModelConfig& cfg;
  const ParamSet& params;
  bool speech_capable;
};

// Frame j of every token goes through its own block of adapter rows, so the
// adapter sees the F stacked frame embeddings of one token at a time.
Var speech_projection(Graph& g, const ModelConfig& cfg, const ParamSet& params, std::span<const int> frames) {
  const std::size_t F = static_cast<std::size_t>(cfg.frames_per_token);
  const std::size_t E = static_cast<std::size_t>(cfg.speech_embed_dim);
  const std::size_t positions = frames.size() / F;
  Var tower = g.param(params.at("speech_tower.embedding"));
  Var w = g.param(params.at("adapter.weight"));
  Var projected;
  for (std::size_t j = 0; j < F; ++j) {
    std::vector<int> ids;
    ids.reserve(positions);
    for (std::size_t k = 0; k < positions; ++k) ids.push_back(frames[k * F + j]);
    Var part = matmul(embedding(tower, ids), slice_rows(w, j * E, E));
    projected = j == 0 ? part : add(projected, part);
  }
  return add_bias(projected, g.param(params.at("adapter.bias")));
}

// Embeds [BOS] prompt [SEP] after_sep into an [n x D] sequence (positions
// included).
Var embed_inputs(Graph& g, const ModelView& mv, const Prompt& prompt,
                 std::span<const int> after_sep) {
  const std::size_t F = static_cast<std::size_t>(mv.cfg.frames_per_token);
  const std::size_t prompt_positions =
      prompt.modality == Modality::kSpeech ? prompt.tokens.size() / F : prompt.tokens.size();
  const std::size_t n = prompt_positions + 2 + after_sep.size();
  if (n > static_cast<std::size_t>(mv.cfg.max_seq_len)) {
    throw LengthError("sequence of " + std::to_string(n) + " positions exceeds max_seq_len " +
                      std::to_string(mv.cfg.max_seq_len));
  }
  Var tok = g.param(mv.params.at("tok_emb"));
  Var x;
  if (prompt.modality == Modality::kText) {
    std::vector<int> ids;
    ids.reserve(n);
    ids.push_back(vocab::kBos);
    ids.insert(ids.end(), prompt.tokens.begin(), prompt.tokens.end());
    ids.push_back(vocab::kSep);
    ids.insert(ids.end(), after_sep.begin(), after_sep.end());
    x = embedding(tok, ids);
  } else {
    if (!mv.speech_capable) throw ModalityError("text-only model cannot consume a speech prompt");
    if (prompt.tokens.empty()) throw ShapeError("empty speech prompt");
    if (prompt.tokens.size() % F != 0) {
      throw ShapeError("speech prompt of " + std::to_string(prompt.tokens.size()) +
                       " frames is not a multiple of frames_per_token " + std::to_string(F));
    }
    const int bos[] = {vocab::kBos};
    std::vector<int> tail;
    tail.reserve(1 + after_sep.size());
    tail.push_back(vocab::kSep);
    tail.insert(tail.end(), after_sep.begin(), after_sep.end());
    Var projected = speech_projection(g, mv.cfg, mv.params, prompt.tokens);
    const Var parts[] = {embedding(tok, bos), projected, embedding(tok, tail)};
    x = concat_rows(parts);
  }
  return add(x, slice_rows(g.param(mv.params.at("pos_emb")), 0, n));
}

Var backbone_logits(Graph& g, const ModelView& mv, Var x, std::size_t first_row,
                    std::size_t count) {
  const auto& P = mv.params;
  for (int l = 0; l < mv.cfg.n_layers; ++l) {
    Var h = layer_norm(x, g.param(P.at(block_name(l, "ln1.gain"))),
                       g.param(P.at(block_name(l, "ln1.bias"))));
    Var q = matmul(h, g.param(P.at(block_name(l, "attn.wq"))));
    Var k = matmul(h, g.param(P.at(block_name(l, "attn.wk"))));
    Var v = matmul(h, g.param(P.at(block_name(l, "attn.wv"))));
    Var a = causal_attention(q, k, v, static_cast<std::size_t>(mv.cfg.n_heads));
    x = add(x, matmul(a, g.param(P.at(block_name(l, "attn.wo")))));
    h = layer_norm(x, g.param(P.at(block_name(l, "ln2.gain"))),
                   g.param(P.at(block_name(l, "ln2.bias"))));
    Var m = gelu(add_bias(matmul(h, g.param(P.at(block_name(l, "mlp.w1")))),
                          g.param(P.at(block_name(l, "mlp.b1")))));
    m = add_bias(matmul(m, g.param(P.at(block_name(l, "mlp.w2")))),
                 g.param(P.at(block_name(l, "mlp.b2"))));
    x = add(x, m);
  }
  // everything below is row-local, so slicing first changes no values
  x = slice_rows(x, first_row, count);
  x = layer_norm(x, g.param(P.at("ln_f.gain")), g.param(P.at("ln_f.bias")));
  return add_bias(matmul(x, g.param(P.at("head.weight"))), g.param(P.at("head.bias")));
}

Var forward_impl(Graph& g, const ModelView& mv, const Prompt& prompt,
                 std::span<const int> completion) {
  if (completion.empty()) throw ShapeError("forward_logits: empty completion");
  Var x = embed_inputs(g, mv, prompt, completion.first(completion.size() - 1));
  const std::size_t first = x.value().rows() - completion.size();
  return backbone_logits(g, mv, x, first, completion.size());
}

Var next_impl(Graph& g, const ModelView& mv, const Prompt& prompt, std::span<const int> prefix) {
  Var x = embed_inputs(g, mv, prompt, prefix);
  return backbone_logits(g, mv, x, x.value().rows() - 1, 1);
}

ModelView view(const TeacherModel& m) { return {m.cfg, m.params, false}; }
ModelView view(const StudentModel& m) { return {m.cfg, m.params, true}; }

std::vector<double> logprobs_impl(const ModelView& mv, const Prompt& prompt,
                                  std::span<const int> completion) {
  Graph g(GradMode::kNoGrad);
  Var lp = gather_log_prob(log_softmax(forward_impl(g, mv, prompt, completion)), completion);
  return lp.value().data;
}

Trajectory sample_impl(const ModelView& mv, const Prompt& prompt, const SamplingConfig& sc,
                       Rng& rng) {
  if (!sc.greedy && !(sc.temperature > 0.0)) {
    throw ConfigError("sampling temperature must be positive");
  }
  if (sc.max_new < 1) throw ConfigError("max_new must be >= 1");
  Trajectory tr;
  tr.modality = prompt.modality;
  std::vector<double> probs;
  for (int step = 0; step < sc.max_new; ++step) {
    Graph g(GradMode::kNoGrad);
    Var logits = next_impl(g, mv, prompt, tr.tokens);
    const auto& row = logits.value().data;
    const auto& lp = log_softmax(logits).value().data;
    int y = 0;
    double lps = 0.0;
    if (sc.greedy) {
      y = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    } else {
      const auto& adj = log_softmax(scale(logits, 1.0 / sc.temperature)).value().data;
      const double u = uniform01(rng);
      double cum = 0.0;
      y = -1;
      for (std::size_t v = 0; v < adj.size(); ++v) {
        cum += std::exp(adj[v]);
        if (u < cum) {
          y = static_cast<int>(v);
          break;
        }
      }
      if (y < 0) {
        // rounding left u above the final cumulative sum; take the last
        // token with nonzero probability
        for (std::size_t v = adj.size(); v-- > 0;) {
          if (std::exp(adj[v]) > 0.0) {
            y = static_cast<int>(v);
            break;
          }
        }
      }
      lps = adj[static_cast<std::size_t>(y)];
    }
    tr.tokens.push_back(y);
    tr.logp_old.push_back(lp[static_cast<std::size_t>(y)]);
    tr.logp_sample.push_back(lps);
    if (y == vocab::kEos) {
      tr.finished = true;
      break;
    }
  }
  return tr;
}

}  // namespace

ParamSet init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto V = static_cast<std::size_t>(cfg.text_vocab_size);
  const auto D = static_cast<std::size_t>(cfg.embed_dim);
  const auto H = static_cast<std::size_t>(cfg.mlp_hidden);
  const auto T = static_cast<std::size_t>(cfg.max_seq_len);
  const double in_std = 1.0 / std::sqrt(static_cast<double>(D));
  const double hid_std = 1.0 / std::sqrt(static_cast<double>(H));
  const double depth = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  ParamSet p;
  p.add("tok_emb", normal_tensor({V, D}, 0.02, rng));
  p.add("pos_emb", normal_tensor({T, D}, 0.02, rng));
  for (int l = 0; l < cfg.n_layers; ++l) {
    p.add(block_name(l, "ln1.gain"), filled({D}, 1.0));
    p.add(block_name(l, "ln1.bias"), filled({D}, 0.0));
    p.add(block_name(l, "attn.wq"), normal_tensor({D, D}, in_std, rng));
    p.add(block_name(l, "attn.wk"), normal_tensor({D, D}, in_std, rng));
    p.add(block_name(l, "attn.wv"), normal_tensor({D, D}, in_std, rng));
    p.add(block_name(l, "attn.wo"), normal_tensor({D, D}, in_std * depth, rng));
    p.add(block_name(l, "ln2.gain"), filled({D}, 1.0));
    p.add(block_name(l, "ln2.bias"), filled({D}, 0.0));
    p.add(block_name(l, "mlp.w1"), normal_tensor({D, H}, in_std, rng));
    p.add(block_name(l, "mlp.b1"), filled({H}, 0.0));
    p.add(block_name(l, "mlp.w2"), normal_tensor({H, D}, hid_std * depth, rng));
    p.add(block_name(l, "mlp.b2"), filled({D}, 0.0));
  }
  p.add("ln_f.gain", filled({D}, 1.0));
  p.add("ln_f.bias", filled({D}, 0.0));
  p.add("head.weight", filled({D, V}, 0.0));
  p.add("head.bias", filled({V}, 0.0));
  return p;
}

TeacherModel init_teacher(const ModelConfig& cfg, std::uint64_t seed) {
  return TeacherModel{cfg, init_backbone(cfg, seed)};
}

StudentModel init_student_from_teacher(const TeacherModel& teacher, const ModelConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  if (!cfg.backbone_compatible(teacher.cfg)) {
    throw ConfigError("student backbone config does not match the teacher's");
  }
  StudentModel s;
  s.cfg = cfg;
  for (const auto& [name, t] : teacher.params) {
    Tensor copy(t.shape, t.data, true);
    s.params.add(name, std::move(copy));
  }
  Rng rng(seed);
  const auto S = static_cast<std::size_t>(cfg.speech_vocab_size);
  const auto E = static_cast<std::size_t>(cfg.speech_embed_dim);
  const auto D = static_cast<std::size_t>(cfg.embed_dim);
  s.params.add("speech_tower.embedding", normal_tensor({S, E}, 0.02, rng));
  const auto F = static_cast<std::size_t>(cfg.frames_per_token);
  s.params.add("adapter.weight", normal_tensor({F * E, D}, 0.02, rng));
  s.params.add("adapter.bias", filled({D}, 0.0));
  s.tower_frozen = true;
  return s;
}

Var forward_logits(Graph& g, const TeacherModel& m, const Prompt& prompt,
                   std::span<const int> completion) {
  return forward_impl(g, view(m), prompt, completion);
}

Var speech_token_embeddings(Graph& g, const StudentModel& m, std::span<const int> frames) {
  const auto F = static_cast<std::size_t>(m.cfg.frames_per_token);
  if (frames.empty() || frames.size() % F != 0) {
    throw ShapeError("speech_token_embeddings: " + std::to_string(frames.size()) +
                     " frames is not a positive multiple of frames_per_token " + std::to_string(F));
  }
  return speech_projection(g, m.cfg, m.params, frames);
}

Var forward_logits(Graph& g, const StudentModel& m, const Prompt& prompt,
                   std::span<const int> completion) {
  return forward_impl(g, view(m), prompt, completion);
}

Var next_token_logits(Graph& g, const TeacherModel& m, const Prompt& prompt,
                      std::span<const int> prefix) {
  return next_impl(g, view(m), prompt, prefix);
}

Var next_token_logits(Graph& g, const StudentModel& m, const Prompt& prompt,
                      std::span<const int> prefix) {
  return next_impl(g, view(m), prompt, prefix);
}

std::vector<double> completion_log_probs(const TeacherModel& m, const Prompt& prompt,
                                         std::span<const int> completion) {
  return logprobs_impl(view(m), prompt, completion);
}

std::vector<double> completion_log_probs(const StudentModel& m, const Prompt& prompt,
                                         std::span<const int> completion) {
  return logprobs_impl(view(m), prompt, completion);
}

Trajectory sample_completion(const TeacherModel& m, const Prompt& prompt,
                             const SamplingConfig& sc, Rng& rng) {
  return sample_impl(view(m), prompt, sc, rng);
}

Trajectory sample_completion(const StudentModel& m, const Prompt& prompt,
                             const SamplingConfig& sc, Rng& rng) {
  return sample_impl(view(m), prompt, sc, rng);
}

namespace {

std::vector<int> strip_eos(Trajectory tr) {
  if (tr.finished && !tr.tokens.empty()) tr.tokens.pop_back();
  return std::move(tr.tokens);
}

}  // namespace

std::vector<int> greedy_answer(const TeacherModel& m, const Prompt& prompt, int max_new) {
  Rng unused(0);
  return strip_eos(sample_completion(m, prompt, {1.0, max_new, true}, unused));
}

std::vector<int> greedy_answer(const StudentModel& m, const Prompt& prompt, int max_new) {
  Rng unused(0);
  return strip_eos(sample_completion(m, prompt, {1.0, max_new, true}, unused));
}

nlohmann::json checkpoint_metadata(const ModelConfig& cfg, const std::string& role) {
  return {{"role", role}, {"config", cfg}};
}

void save_teacher(const std::filesystem::path& path, const TeacherModel& m) {
  save_checkpoint(path, m.params, checkpoint_metadata(m.cfg, "teacher"));
}

void save_student(const std::filesystem::path& path, const StudentModel& m) {
  auto meta = checkpoint_metadata(m.cfg, "student");
  meta["tower_frozen"] = m.tower_frozen;
  save_checkpoint(path, m.params, meta);
}

TeacherModel load_teacher(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.metadata.value("role", "") != "teacher") {
    throw CheckpointError(path.string() + " is not a teacher checkpoint");
  }
  TeacherModel m{ck.metadata.at("config").get<ModelConfig>(), std::move(ck.params)};
  m.cfg.validate();
  return m;
}

StudentModel load_student(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.metadata.value("role", "") != "student") {
    throw CheckpointError(path.string() + " is not a student checkpoint");
  }
  StudentModel m{ck.metadata.at("config").get<ModelConfig>(), std::move(ck.params),
                 ck.metadata.value("tower_frozen", true)};
  m.cfg.validate();
  return m;
}

}  // namespace xopd
