// SPDX-License-Identifier: Apache-2.0

#include "absvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace absvit::ckpt {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <typename T>
void append_le(std::string& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T read_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(std::string("cannot open ") + what + " " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string blob_path_for(const std::string& manifest_path) {
  fs::path p(manifest_path);
  if (p.extension() == ".json") p.replace_extension();
  return p.string() + ".bin";
}

template <typename T>
void save(const std::string& manifest_path, const cfg::RunConfig& config, const model::ParamMap<T>& params) {
  const auto dtype = num::dtype_of<T>();
  std::string blob;
  json tensors = json::array();
  for (const auto& [name, t] : params) {
    tensors.push_back({{"name", name}, {"dtype", num::dtype_name(dtype)}, {"shape", t.shape()}, {"offset", blob.size()},
                       {"bytes", t.size() * sizeof(T)}});
    for (T v : t.data()) append_le(blob, v);
  }
  const std::string blob_path = blob_path_for(manifest_path);
  json manifest;
  manifest["format"] = kFormatName;
  manifest["version"] = kFormatVersion;
  manifest["dtype"] = num::dtype_name(dtype);
  manifest["byte_order"] = "little";
  manifest["blob"] = fs::path(blob_path).filename().string();
  manifest["blob_bytes"] = blob.size();
  manifest["config"] = json::parse(config.to_json());
  manifest["tensors"] = std::move(tensors);

  const fs::path parent = fs::path(manifest_path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream b(blob_path, std::ios::binary | std::ios::trunc);
  b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream m(manifest_path, std::ios::trunc);
  m << manifest.dump(2) << "\n";
  if (!b || !m) throw CheckpointError("failed writing checkpoint " + manifest_path);
}

template <typename T>
Checkpoint<T> load(const std::string& manifest_path) {
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path, "checkpoint manifest"));
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest " + manifest_path + ": " + e.what());
  }
  try {
    if (manifest.value("format", "") != kFormatName) throw CheckpointError("not an absvit checkpoint: " + manifest_path);
    const int version = manifest.at("version").get<int>();
    if (version != kFormatVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kFormatVersion) + ")");
    }
    const std::string want = num::dtype_name(num::dtype_of<T>());
    const std::string have = manifest.at("dtype").get<std::string>();
    if (have != want) throw CheckpointError("checkpoint holds " + have + " tensors, cannot load as " + want);

    Checkpoint<T> out;
    try {
      out.config = cfg::RunConfig::from_json(manifest.at("config").dump());
    } catch (const cfg::ConfigError& e) {
      throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
    }

    const fs::path blob_path = fs::path(manifest_path).parent_path() / manifest.at("blob").get<std::string>();
    const std::string blob = read_file(blob_path.string(), "checkpoint blob");
    const auto expected = model::param_shapes(out.config.model);
    for (const auto& entry : manifest.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != want) throw CheckpointError("tensor " + name + " has a different dtype");
      const num::Shape shape = entry.at("shape").get<num::Shape>();
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t bytes = num::numel(shape) * sizeof(T);
      if (offset + bytes > blob.size()) {
        throw CheckpointError("checkpoint blob is truncated: tensor " + name + " needs bytes [" +
                              std::to_string(offset) + ", " + std::to_string(offset + bytes) + ") but the blob has " +
                              std::to_string(blob.size()));
      }
      auto it = expected.find(name);
      if (it == expected.end()) throw CheckpointError("unexpected tensor " + name + " in checkpoint");
      if (it->second != shape) {
        throw CheckpointError("tensor " + name + " has shape " + num::shape_str(shape) + ", config expects " +
                              num::shape_str(it->second));
      }
      num::Tensor<T> t(shape);
      auto d = t.data();
      for (std::size_t i = 0; i < t.size(); ++i) d[i] = read_le<T>(blob.data() + offset + i * sizeof(T));
      if (!out.params.emplace(name, std::move(t)).second) throw CheckpointError("duplicate tensor " + name);
    }
    for (const auto& [name, _] : expected) {
      if (!out.params.count(name)) throw CheckpointError("checkpoint is missing tensor " + name);
    }
    return out;
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest " + manifest_path + ": " + e.what());
  }
}

template void save<float>(const std::string&, const cfg::RunConfig&, const model::ParamMap<float>&);
template void save<double>(const std::string&, const cfg::RunConfig&, const model::ParamMap<double>&);
template Checkpoint<float> load<float>(const std::string&);
template Checkpoint<double> load<double>(const std::string&);

}  // namespace absvit::ckpt
