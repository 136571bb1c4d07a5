/*
 * Copyright 2026 The kcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "kcaps/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kcaps {

namespace {

constexpr char kMagic[8] = {'K', 'C', 'A', 'P', 'S', 'C', 'K', '1'};

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

}  // namespace

void Checkpoint::put(const std::string& name, Tensor value, Dtype dtype) {
  if (dtype == Dtype::kI8) {
    for (double v : value.values()) {
      if (v != std::round(v) || v < -128.0 || v > 127.0) {
        throw std::invalid_argument("checkpoint: entry '" + name + "' is not representable as i8");
      }
    }
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == name) {
      entries_[i].second = std::move(value);
      dtypes_[i] = dtype;
      return;
    }
  }
  entries_.emplace_back(name, std::move(value));
  dtypes_.push_back(dtype);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw std::out_of_range("checkpoint: no entry '" + name + "'");
}

void Checkpoint::put_parameters(const ParameterStore& store, const std::string& prefix) {
  for (const Parameter* p : store.all()) put(prefix + p->name, p->value);
}

void Checkpoint::load_parameters(ParameterStore& store, const std::string& prefix) const {
  for (Parameter* p : store.all()) {
    const std::string key = prefix + p->name;
    if (!has(key)) throw std::runtime_error("checkpoint: missing parameter '" + key + "'");
    const Tensor& t = get(key);
    if (t.shape() != p->value.shape()) {
      throw ShapeError("checkpoint: parameter '" + key + "' has shape " +
                       shape_str(t.shape()) + ", model expects " +
                       shape_str(p->value.shape()));
    }
    p->value = t;
  }
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json manifest;
  manifest["format"] = "kcaps-checkpoint";
  manifest["version"] = 1;
  manifest["meta"] = meta;
  manifest["entries"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [name, t] = entries_[i];
    const bool i8 = dtypes_[i] == Dtype::kI8;
    const std::uint64_t nbytes = t.numel() * (i8 ? 1 : sizeof(double));
    manifest["entries"].push_back({{"name", name},
                                   {"shape", t.shape()},
                                   {"dtype", i8 ? "i8" : "f64"},
                                   {"offset", offset},
                                   {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = manifest.dump();

  // Write beside the target and rename, so an interrupted save never
  // clobbers the previous checkpoint.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = byteswap_if_big<std::uint64_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (dtypes_[i] == Dtype::kI8) {
        for (double v : entries_[i].second.values()) out.put(static_cast<char>(static_cast<std::int8_t>(v)));
        continue;
      }
      for (double v : entries_[i].second.values()) {
        const double le = byteswap_if_big(v);
        out.write(reinterpret_cast<const char*>(&le), sizeof(le));
      }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  len = byteswap_if_big(len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated manifest in " + path.string());
  const nlohmann::json manifest = nlohmann::json::parse(text);
  if (manifest.value("format", "") != "kcaps-checkpoint") {
    throw std::runtime_error("checkpoint: unknown format in " + path.string());
  }
  const std::streamoff payload = in.tellg();

  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("entries")) {
    const Shape shape = e.at("shape").get<Shape>();
    const std::string dtype = e.at("dtype");
    const std::uint64_t offset = e.at("offset");
    Tensor t(shape);
    in.seekg(payload + static_cast<std::streamoff>(offset));
    if (dtype == "f64") {
      for (double& v : t.values()) {
        double raw;
        in.read(reinterpret_cast<char*>(&raw), sizeof(raw));
        v = byteswap_if_big(raw);
      }
    } else if (dtype == "f32") {
      for (double& v : t.values()) {
        float raw;
        in.read(reinterpret_cast<char*>(&raw), sizeof(raw));
        v = byteswap_if_big(raw);
      }
    } else if (dtype == "i8") {
      for (double& v : t.values()) {
        char raw;
        in.get(raw);
        v = static_cast<std::int8_t>(raw);
      }
    } else {
      throw std::runtime_error("checkpoint: unsupported dtype '" + dtype + "'");
    }
    if (!in) {
      throw std::runtime_error("checkpoint: truncated payload for '" +
                               e.at("name").get<std::string>() + "'");
    }
    ck.entries_.emplace_back(e.at("name").get<std::string>(), std::move(t));
    ck.dtypes_.push_back(dtype == "i8" ? Dtype::kI8 : Dtype::kF64);
  }
  return ck;
}

}  // namespace kcaps
