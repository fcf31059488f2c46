#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "permgen/common.hpp"
#include "permgen/model.hpp"

namespace permgen {

// ---- checkpoint file format ----
// magic "PGEN" | version u32 LE | checksum u64 LE | header_len u32 LE |
// header JSON | payload (float32 LE blobs, header-declared offsets).
// The checksum is FNV-1a over header_len, header, and payload, so any byte
// flip after the checksum field is caught at load.

inline constexpr char kCheckpointMagic[4] = {'P', 'G', 'E', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlob {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct CheckpointData {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  std::int64_t step = 0;
  std::string optimizer = "adam";
  std::int64_t adam_t = 0;
  std::string rng_state;  // decimal mt19937_64 serialization
  std::vector<CheckpointBlob> params;
  std::vector<CheckpointBlob> adam_m;
  std::vector<CheckpointBlob> adam_v;
  /// Free-form provenance (run configuration, config hash). Carried verbatim;
  /// never interpreted on load.
  std::map<std::string, std::string> extra;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},
                        {"n_heads", c.n_heads},
                        {"n_enc_layers", c.n_enc_layers},
                        {"n_dec_layers", c.n_dec_layers},
                        {"d_ff", c.d_ff},
                        {"vocab_size", c.vocab_size},
                        {"Tmax", c.Tmax},
                        {"Lmax", c.Lmax},
                        {"max_source_len", c.max_source_len},
                        {"dropout_rate", c.dropout_rate}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.Tmax = j.at("Tmax").get<int>();
  c.Lmax = j.at("Lmax").get<int>();
  c.max_source_len = j.at("max_source_len").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  return c;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void append_f32_le(std::string& out, const std::vector<float>& vals) {
  for (float f : vals) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

inline nlohmann::json blob_index(const std::vector<CheckpointBlob>& blobs, std::size_t& offset) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : blobs) {
    arr.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}});
    offset += b.data.size() * 4;
  }
  return arr;
}

inline std::vector<CheckpointBlob> read_blobs(const nlohmann::json& index, const std::string& payload,
                                              const std::string& path) {
  std::vector<CheckpointBlob> out;
  for (const auto& entry : index) {
    CheckpointBlob b;
    b.name = entry.at("name").get<std::string>();
    b.shape = entry.at("shape").get<std::vector<int>>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    std::int64_t n = 1;
    for (int d : b.shape) n *= d;
    if (offset + static_cast<std::size_t>(n) * 4 > payload.size()) {
      throw data_error("checkpoint " + path + ": blob " + b.name + " runs past the payload");
    }
    b.data.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      const std::uint32_t bits = get_u32(
          reinterpret_cast<const unsigned char*>(payload.data()) + offset + static_cast<std::size_t>(i) * 4);
      float f;
      std::memcpy(&f, &bits, 4);
      b.data[static_cast<std::size_t>(i)] = f;
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
  std::string payload;
  std::size_t offset = 0;
  nlohmann::json header;
  header["config"] = model_config_to_json(ckpt.config);
  header["vocab_hash"] = hex_u64(ckpt.vocab_hash);
  header["step"] = ckpt.step;
  header["optimizer"] = ckpt.optimizer;
  header["adam_t"] = ckpt.adam_t;
  header["rng_state"] = ckpt.rng_state;
  header["params"] = detail::blob_index(ckpt.params, offset);
  header["adam_m"] = detail::blob_index(ckpt.adam_m, offset);
  header["adam_v"] = detail::blob_index(ckpt.adam_v, offset);
  header["extra"] = ckpt.extra;
  for (const auto& b : ckpt.params) detail::append_f32_le(payload, b.data);
  for (const auto& b : ckpt.adam_m) detail::append_f32_le(payload, b.data);
  for (const auto& b : ckpt.adam_v) detail::append_f32_le(payload, b.data);

  const std::string header_str = header.dump();
  std::string checksummed;
  detail::put_u32(checksummed, static_cast<std::uint32_t>(header_str.size()));
  checksummed += header_str;
  checksummed += payload;
  const std::uint64_t checksum = fnv1a64(checksummed.data(), checksummed.size());

  std::string file;
  file.append(kCheckpointMagic, 4);
  detail::put_u32(file, kCheckpointVersion);
  detail::put_u64(file, checksum);
  file += checksummed;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot open checkpoint for writing: " + path);
  out.write(file.data(), static_cast<std::streamsize>(file.size()));
  if (!out) throw data_error("short write to checkpoint: " + path);
}

/// Load and verify. When `expected_vocab_hash` is given, a mismatch is an
/// error naming both hashes.
inline CheckpointData load_checkpoint(const std::string& path,
                                      std::optional<std::uint64_t> expected_vocab_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint: " + path);
  std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (file.size() < 20) throw data_error("checkpoint " + path + " truncated (" +
                                         std::to_string(file.size()) + " bytes)");
  if (std::memcmp(file.data(), kCheckpointMagic, 4) != 0) {
    throw data_error("checkpoint " + path + ": bad magic bytes");
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(file.data());
  const std::uint32_t version = detail::get_u32(bytes + 4);
  if (version != kCheckpointVersion) {
    throw data_error("checkpoint " + path + ": format version " + std::to_string(version) +
                     ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::uint64_t stored_checksum = detail::get_u64(bytes + 8);
  const std::uint64_t actual = fnv1a64(file.data() + 16, file.size() - 16);
  if (stored_checksum != actual) {
    throw data_error("checkpoint " + path + ": checksum mismatch (stored " + hex_u64(stored_checksum) +
                     ", computed " + hex_u64(actual) + "); file is corrupt");
  }
  const std::uint32_t header_len = detail::get_u32(bytes + 16);
  if (20 + static_cast<std::size_t>(header_len) > file.size()) {
    throw data_error("checkpoint " + path + ": header length runs past the file");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.substr(20, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("checkpoint " + path + ": header is not valid JSON: " + e.what());
  }
  const std::string payload = file.substr(20 + header_len);

  CheckpointData ckpt;
  try {
    ckpt.config = model_config_from_json(header.at("config"));
    ckpt.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.optimizer = header.at("optimizer").get<std::string>();
    ckpt.adam_t = header.at("adam_t").get<std::int64_t>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.params = detail::read_blobs(header.at("params"), payload, path);
    ckpt.adam_m = detail::read_blobs(header.at("adam_m"), payload, path);
    ckpt.adam_v = detail::read_blobs(header.at("adam_v"), payload, path);
    if (header.contains("extra")) {
      ckpt.extra = header.at("extra").get<std::map<std::string, std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("checkpoint " + path + ": header field missing or mistyped: " + e.what());
  }
  if (expected_vocab_hash && *expected_vocab_hash != ckpt.vocab_hash) {
    throw data_error("checkpoint " + path + ": vocabulary hash " + hex_u64(ckpt.vocab_hash) +
                     " does not match the loaded vocabulary " + hex_u64(*expected_vocab_hash));
  }
  return ckpt;
}

// ---- model <-> checkpoint glue ----

template <typename Real>
std::vector<CheckpointBlob> params_to_blobs(const ModelParameters<Real>& p) {
  std::vector<CheckpointBlob> out;
  for (const auto& name : p.names()) {
    const auto& t = p.at(name);
    CheckpointBlob b;
    b.name = name;
    b.shape = t.shape();
    b.data.resize(static_cast<std::size_t>(t.size()));
    for (std::int64_t i = 0; i < t.size(); ++i)
      b.data[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
    out.push_back(std::move(b));
  }
  return out;
}

/// Rebuild a parameter registry from blobs; the names and shapes must match
/// a fresh registry for `config` exactly.
template <typename Real>
ModelParameters<Real> params_from_blobs(const ModelConfig& config,
                                        const std::vector<CheckpointBlob>& blobs) {
  ModelParameters<Real> expect = init_parameters<Real>(config, 0);
  if (blobs.size() != expect.count()) {
    throw data_error("checkpoint holds " + std::to_string(blobs.size()) + " parameters, model needs " +
                     std::to_string(expect.count()));
  }
  ModelParameters<Real> out;
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const auto& b = blobs[i];
    if (b.name != expect.names()[i]) {
      throw data_error("checkpoint parameter " + std::to_string(i) + " is \"" + b.name +
                       "\", model expects \"" + expect.names()[i] + "\"");
    }
    if (b.shape != expect.at(b.name).shape()) {
      throw data_error("checkpoint parameter " + b.name + " has shape [" + join_ints(b.shape) +
                       "], model expects [" + join_ints(expect.at(b.name).shape()) + "]");
    }
    Tensor<Real> t(b.shape);
    for (std::size_t j = 0; j < b.data.size(); ++j) t.data()[j] = static_cast<Real>(b.data[j]);
    out.add(b.name, std::move(t));
  }
  return out;
}

}  // namespace permgen
