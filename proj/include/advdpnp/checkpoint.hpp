// Binary checkpoint format:
//   magic "ADVP" | version u16 LE | descriptor length u32 LE |
//   descriptor (UTF-8 JSON: architecture, classes, alpha, tensor list) |
//   tensor payloads, little-endian float64, in descriptor order
// Round-trips are bit-exact.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "advdpnp/io.hpp"
#include "advdpnp/model.hpp"
#include "advdpnp/tensor.hpp"

namespace advdpnp {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'A', 'D', 'V', 'P'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const ModelParams& params) {
  nlohmann::json desc;
  desc["family"] = params.arch.family;
  desc["input_shape"] = params.arch.input_shape;
  desc["hidden"] = params.arch.hidden;
  desc["feature_dim"] = params.arch.feature_dim;
  desc["classes"] = params.bank.classes();
  desc["alpha"] = params.bank.radius;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, tensor] : params.extractor) {
    tensors.push_back({{"name", name}, {"shape", tensor.shape()}});
  }
  tensors.push_back({{"name", kPrototypesName},
                     {"shape", params.bank.prototypes.shape()}});
  desc["tensors"] = std::move(tensors);

  const std::string header = desc.dump();
  std::string out;
  out.append(kCheckpointMagic, 4);
  const std::uint16_t version = kCheckpointVersion;
  out.append(reinterpret_cast<const char*>(&version), 2);
  const std::uint32_t len = static_cast<std::uint32_t>(header.size());
  out.append(reinterpret_cast<const char*>(&len), 4);
  out.append(header);
  auto append_tensor = [&out](const Tensor& t) {
    out.append(reinterpret_cast<const char*>(t.data()),
               static_cast<std::size_t>(t.numel()) * sizeof(double));
  };
  for (const auto& [name, tensor] : params.extractor) append_tensor(tensor);
  append_tensor(params.bank.prototypes);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const ModelParams& params) {
  atomic_write_file(path, serialize_checkpoint(params));
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  if (data.size() < 10 || std::memcmp(data.data(), kCheckpointMagic, 4) != 0) {
    throw ConfigError("not a checkpoint file: " + path.string());
  }
  std::uint16_t version;
  std::memcpy(&version, data.data() + 4, 2);
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  std::uint32_t header_len;
  std::memcpy(&header_len, data.data() + 6, 4);
  if (data.size() < 10 + static_cast<std::size_t>(header_len)) {
    throw ConfigError("truncated checkpoint header: " + path.string());
  }
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(data.substr(10, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad checkpoint descriptor: " + std::string(e.what()));
  }

  ModelParams params;
  params.arch.family = desc.at("family").get<std::string>();
  params.arch.input_shape = desc.at("input_shape").get<std::vector<int>>();
  params.arch.hidden = desc.at("hidden").get<std::vector<int>>();
  params.arch.feature_dim = desc.at("feature_dim").get<int>();
  const int classes = desc.at("classes").get<int>();
  const double alpha = desc.at("alpha").get<double>();

  // The stored tensor list must match what this architecture produces.
  auto layout = detail::extractor_layout(params.arch);
  layout.emplace_back(kPrototypesName,
                      Shape{classes, params.arch.feature_dim});
  const auto& tensors = desc.at("tensors");
  if (tensors.size() != layout.size()) {
    throw ConfigError("checkpoint/architecture mismatch: expected " +
                      std::to_string(layout.size()) + " tensors, found " +
                      std::to_string(tensors.size()));
  }
  std::size_t offset = 10 + header_len;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, shape] = layout[i];
    if (tensors[i].at("name").get<std::string>() != name ||
        tensors[i].at("shape").get<Shape>() != shape) {
      throw ConfigError("checkpoint/architecture mismatch at tensor '" + name +
                        "'");
    }
    const std::size_t bytes =
        static_cast<std::size_t>(shape_numel(shape)) * sizeof(double);
    if (data.size() < offset + bytes) {
      throw ConfigError("truncated checkpoint payload: " + path.string());
    }
    Tensor t(shape);
    std::memcpy(t.data(), data.data() + offset, bytes);
    offset += bytes;
    if (name == kPrototypesName) {
      params.bank = PrototypeBank{std::move(t), alpha};
    } else {
      params.extractor.emplace_back(name, std::move(t));
    }
  }
  if (offset != data.size()) {
    throw ConfigError("trailing bytes in checkpoint: " + path.string());
  }
  return params;
}

}  // namespace advdpnp
