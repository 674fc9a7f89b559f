// Copyright 2026 The xopd-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "xopd/params.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "xopd/errors.hpp"

namespace xopd {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

Tensor& ParamSet::add(std::string name, Tensor t) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  entries_.emplace_back(std::move(name), std::move(t));
  return entries_.back().second;
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

Tensor& ParamSet::at(const std::string& name) {
  for (auto& e : entries_)
    if (e.first == name) return e.second;
  throw ConfigError("unknown parameter " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw ConfigError("unknown parameter " + name);
}

std::size_t ParamSet::total_numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

void ParamSet::accumulate_grads(const Graph& g) {
  for (auto& e : entries_) g.accumulate_into(e.second);
}

namespace {

struct DigestCtx {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), &EVP_MD_CTX_free};
  DigestCtx() { EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr); }
  void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx.get(), p, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }
};

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
  DigestCtx d;
  d.update(bytes.data(), bytes.size());
  return d.hex();
}

std::string sha256_hex(const std::string& text) {
  DigestCtx d;
  d.update(text.data(), text.size());
  return d.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  DigestCtx d;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    d.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return d.hex();
}

std::string param_hash(const ParamSet& params,
                       const std::function<bool(const std::string&)>& select) {
  DigestCtx d;
  for (const auto& [name, t] : params) {
    if (select && !select(name)) continue;
    d.update(name.data(), name.size());
    for (auto dim : t.shape) {
      const std::uint64_t v = dim;
      d.update(&v, sizeof v);
    }
    d.update(t.data.data(), t.data.size() * sizeof(double));
  }
  return d.hex();
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params,
                     const nlohmann::json& metadata) {
  nlohmann::json header;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    const std::uint64_t nbytes = t.numel() * sizeof(double);
    header["tensors"].push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["metadata"] = metadata;
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  const std::uint64_t hlen = text.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("short write to " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || hlen == 0 || hlen > (1u << 26)) throw CheckpointError("bad checkpoint header in " + path.string());
  std::string text(hlen, '\0');
  in.read(text.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw CheckpointError("truncated checkpoint header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("invalid checkpoint header JSON: " + std::string(e.what()));
  }
  const auto payload_start = in.tellg();
  LoadedCheckpoint out;
  out.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_numel(shape) * sizeof(double)) {
      throw CheckpointError("size mismatch for tensor " + entry.at("name").get<std::string>());
    }
    std::vector<double> data(shape_numel(shape));
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw CheckpointError("truncated payload in " + path.string());
    out.params.add(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data), true));
  }
  return out;
}

}  // namespace xopd
