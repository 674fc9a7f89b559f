// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xopd/tensor.hpp"

namespace xopd {

// Insertion-ordered collection of named parameter tensors. Order is part of
// the contract: checkpoints, hashes and optimizer state all follow it.
class ParamSet {
 public:
  Tensor& add(std::string name, Tensor t);
  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t total_numel() const;
  std::vector<std::string> names() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  // Pulls this set's gradients out of a graph after backward().
  void accumulate_grads(const Graph& g);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

// Hash of names, shapes and raw values of the selected parameters (all when
// the predicate is empty).
std::string param_hash(const ParamSet& params,
                       const std::function<bool(const std::string&)>& select = {});

// Checkpoint layout: u64 little-endian header length, a JSON header
// {"tensors": [{"name", "shape", "offset", "nbytes"}...], "metadata": {...}},
// then the float64 little-endian payloads in header order. Offsets are
// relative to the start of the payload section.
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params,
                     const nlohmann::json& metadata);

struct LoadedCheckpoint {
  ParamSet params;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xopd
