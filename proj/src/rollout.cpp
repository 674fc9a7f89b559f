// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/rollout.hpp"

#include <atomic>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "xopd/errors.hpp"
#include "xopd/params.hpp"

namespace xopd {

void RolloutConfig::validate() const {
  if (n < 1) throw ConfigError("rollouts: n must be >= 1");
  if (!greedy && !(temperature > 0.0)) throw ConfigError("rollouts: temperature must be positive");
  if (max_new < 1) throw ConfigError("rollouts: max_new must be >= 1");
  if (workers < 1) throw ConfigError("rollouts: workers must be >= 1");
}

Prompt text_prompt_of(const PairedExample& e) { return {Modality::kText, e.text_prompt}; }
Prompt speech_prompt_of(const PairedExample& e) { return {Modality::kSpeech, e.speech_prompt}; }

RolloutBatch collect_rollouts(const StudentModel& student, std::span<const PairedExample> batch,
                              const RolloutConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (batch.empty()) throw UsageError("collect_rollouts: empty batch");
  RolloutBatch out;
  out.cfg = cfg;
  const std::size_t n = static_cast<std::size_t>(cfg.n);
  out.text.assign(batch.size(), {});
  out.speech.assign(batch.size(), {});
  for (const auto& e : batch) out.example_ids.push_back(e.id);

  struct Unit {
    std::size_t example;
    Modality modality;
    std::size_t sample;
  };
  std::vector<Unit> units;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (cfg.text) {
      out.text[i].resize(n);
      for (std::size_t j = 0; j < n; ++j) units.push_back({i, Modality::kText, j});
    }
    if (cfg.speech) {
      out.speech[i].resize(n);
      for (std::size_t j = 0; j < n; ++j) units.push_back({i, Modality::kSpeech, j});
    }
  }

  const SamplingConfig sc = cfg.sampling();
  auto run_unit = [&](const Unit& u) {
    const PairedExample& e = batch[u.example];
    Rng rng(derive_seed(seed, SeedStream::kRollout,
                        {static_cast<std::uint64_t>(e.id), static_cast<std::uint64_t>(u.modality),
                         static_cast<std::uint64_t>(u.sample)}));
    const bool text = u.modality == Modality::kText;
    Trajectory tr = sample_completion(student, text ? text_prompt_of(e) : speech_prompt_of(e), sc, rng);
    tr.example_id = e.id;
    (text ? out.text : out.speech)[u.example][u.sample] = std::move(tr);
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), units.size());
  if (workers <= 1) {
    for (const auto& u : units) run_unit(u);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < units.size(); k = next++) {
          try {
            run_unit(units[k]);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  if (cfg.text) out.text_trajectories = static_cast<long>(batch.size() * n);
  if (cfg.speech) out.speech_trajectories = static_cast<long>(batch.size() * n);
  return out;
}

std::string rollout_hash(const RolloutBatch& b) {
  std::vector<unsigned char> bytes;
  auto put = [&](const void* p, std::size_t len) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + len);
  };
  for (const auto* group : {&b.text, &b.speech}) {
    for (const auto& per : *group) {
      for (const auto& tr : per) {
        put(&tr.example_id, sizeof tr.example_id);
        put(tr.tokens.data(), tr.tokens.size() * sizeof(int));
        put(tr.logp_old.data(), tr.logp_old.size() * sizeof(double));
        const unsigned char fin = tr.finished;
        put(&fin, 1);
      }
    }
  }
  return sha256_hex(bytes);
}

void write_trajectories_jsonl(const std::filesystem::path& path, const RolloutBatch& b) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto* group : {&b.text, &b.speech}) {
    for (const auto& per : *group) {
      for (const auto& tr : per) {
        nlohmann::json j = {{"example_id", tr.example_id},
                            {"modality", to_string(tr.modality)},
                            {"tokens", tr.tokens},
                            {"logp_old", tr.logp_old},
                            {"finished", tr.finished}};
        out << j.dump() << '\n';
      }
    }
  }
}

}  // namespace xopd
