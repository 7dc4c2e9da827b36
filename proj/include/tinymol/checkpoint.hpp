#pragma once

// Checkpoint container: magic + version + JSON header (config, step, tensor
// manifest) followed by a raw little-endian float32 payload. Writes go to a
// temporary file that is renamed into place, so readers never observe a
// partially written checkpoint.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinymol/errors.hpp"
#include "tinymol/model.hpp"

namespace tinymol::ckpt {

inline constexpr char kMagic[8] = {'T', 'M', 'O', 'L', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kVersion = 1;

struct TensorEntry {
  std::string name;
  diff::Shape shape;
  std::vector<float> data;
};

struct CheckpointData {
  model::ModelConfig config;
  int64_t step = 0;
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline nlohmann::ordered_json config_to_json(const model::ModelConfig& cfg) {
  return nlohmann::ordered_json{{"layers", cfg.layers},
                                {"embed_dim", cfg.embed_dim},
                                {"heads", cfg.heads},
                                {"pair_dim", cfg.pair_dim},
                                {"pair_hidden", cfg.pair_hidden},
                                {"ffn_dim", cfg.ffn_dim},
                                {"gaussian_kernels", cfg.gaussian_kernels},
                                {"spd_vocab", cfg.spd_vocab},
                                {"token_vocab", cfg.token_vocab},
                                {"peak_lr", cfg.peak_lr},
                                {"batch_size", cfg.batch_size}};
}

inline model::ModelConfig config_from_json(const nlohmann::json& j) {
  model::ModelConfig cfg;
  cfg.layers = j.at("layers").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.pair_dim = j.at("pair_dim").get<int>();
  cfg.pair_hidden = j.at("pair_hidden").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.gaussian_kernels = j.at("gaussian_kernels").get<int>();
  cfg.spd_vocab = j.at("spd_vocab").get<int>();
  cfg.token_vocab = j.at("token_vocab").get<int>();
  cfg.peak_lr = j.at("peak_lr").get<double>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.check();
  return cfg;
}

namespace detail {

inline void require_little_endian() {
  static_assert(std::endian::native == std::endian::little ||
                    std::endian::native == std::endian::big,
                "mixed-endian hosts are unsupported");
  if constexpr (std::endian::native != std::endian::little)
    throw Error(ErrorCode::checkpoint_io, "checkpoints require a little-endian host");
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointData& data) {
  detail::require_little_endian();

  nlohmann::ordered_json header;
  header["config"] = config_to_json(data.config);
  header["step"] = data.step;
  header["manifest"] = nlohmann::ordered_json::array();
  int64_t offset = 0;  // in floats from payload start
  for (const auto& t : data.tensors) {
    const int64_t count = diff::numel(t.shape);
    if (count != static_cast<int64_t>(t.data.size()))
      throw Error(ErrorCode::checkpoint_io,
                  "tensor " + t.name + " has " + std::to_string(t.data.size()) +
                      " values for shape " + diff::format_shape(t.shape));
    header["manifest"].push_back(
        {{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += count;
  }
  const std::string header_bytes = header.dump();

  const std::filesystem::path target(path);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::checkpoint_io, "cannot open " + tmp.string() + " for write");
    out.write(kMagic, sizeof(kMagic));
    const uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t header_len = header_bytes.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& t : data.tensors)
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out) throw Error(ErrorCode::checkpoint_io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec)
    throw Error(ErrorCode::checkpoint_io,
                "cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
}

inline CheckpointData read_checkpoint(const std::string& path) {
  detail::require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::checkpoint_io, "cannot open " + path);

  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::checkpoint_io, path + " is not a checkpoint (bad magic)");
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kVersion)
    throw Error(ErrorCode::checkpoint_io,
                path + " has unsupported version " + std::to_string(version));
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw Error(ErrorCode::checkpoint_io, path + " is truncated in the header length");
  std::string header_bytes(header_len, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw Error(ErrorCode::checkpoint_io, path + " is truncated in the header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::checkpoint_io, path + " has a malformed header: " + e.what());
  }

  CheckpointData data;
  try {
    data.config = config_from_json(header.at("config"));
    data.step = header.at("step").get<int64_t>();
    for (const auto& item : header.at("manifest")) {
      TensorEntry t;
      t.name = item.at("name").get<std::string>();
      t.shape = item.at("shape").get<diff::Shape>();
      t.data.resize(static_cast<size_t>(diff::numel(t.shape)));
      data.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::checkpoint_io, path + " has an incomplete header: " + e.what());
  }

  for (auto& t : data.tensors) {
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in)
      throw Error(ErrorCode::checkpoint_io, path + " is truncated in tensor " + t.name);
  }
  return data;
}

// Model parameters -> checkpoint entries (optimizer state is appended by the
// training loop under "opt.m." / "opt.v." prefixes).
template <typename T>
CheckpointData snapshot(const model::ModelState<T>& state, int64_t step) {
  CheckpointData data;
  data.config = state.cfg;
  data.step = step;
  for (const auto& p : state.params) {
    TensorEntry t;
    t.name = p.name;
    t.shape = p.tensor.shape();
    t.data.resize(p.tensor.values().size());
    for (size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = static_cast<float>(p.tensor.values()[i]);
    data.tensors.push_back(std::move(t));
  }
  return data;
}

template <typename T>
void restore(model::ModelState<T>& state, const CheckpointData& data) {
  for (auto& p : state.params) {
    const TensorEntry* t = data.find(p.name);
    if (!t) throw Error(ErrorCode::checkpoint_io, "checkpoint is missing tensor " + p.name);
    if (t->shape != p.tensor.shape())
      throw Error(ErrorCode::checkpoint_io,
                  "checkpoint tensor " + p.name + " has shape " + diff::format_shape(t->shape) +
                      ", model expects " + diff::format_shape(p.tensor.shape()));
    for (size_t i = 0; i < t->data.size(); ++i)
      p.tensor.values()[i] = static_cast<T>(t->data[i]);
  }
}

}  // namespace tinymol::ckpt
