#pragma once

// Versioned binary weight container shared by the ddpm and detector
// checkpoints:
//
//   magic "DFCKPT01" | u32 header length | header JSON (utf-8)
//   | payload: all parameter arrays, float32 little-endian, concatenated
//   | u64 FNV-1a of every preceding byte
//
// The header carries a config echo, an optional mode/provenance block and
// the parameter directory (name, shape, offset in floats). Loading
// verifies the whole-file checksum before anything else is trusted.

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffdet/hash.hpp"
#include "diffdet/tensor.hpp"

namespace diffdet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian only");

inline constexpr char kCheckpointMagic[9] = "DFCKPT01";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedParam {
  std::string name;
  std::vector<int> shape;
  const float* data;
  std::int64_t numel;
};

struct Checkpoint {
  nlohmann::json header;
  std::vector<float> payload;
  std::string file_hash;  // FNV-1a hex of the entire file as stored

  // Looks up a parameter by name and copies it out.
  TensorF param(const std::string& name) const {
    for (const auto& p : header.at("params")) {
      if (p.at("name").get<std::string>() != name) continue;
      std::vector<int> shape = p.at("shape").get<std::vector<int>>();
      const auto offset = p.at("offset").get<std::int64_t>();
      const auto numel = TensorF::numel_of(shape);
      if (offset < 0 || offset + numel > static_cast<std::int64_t>(payload.size()))
        throw CheckpointError("param out of payload bounds: " + name);
      std::vector<float> data(payload.begin() + offset, payload.begin() + offset + numel);
      return TensorF(std::move(shape), std::move(data));
    }
    throw CheckpointError("missing parameter: " + name);
  }

  bool has_param(const std::string& name) const {
    for (const auto& p : header.at("params"))
      if (p.at("name").get<std::string>() == name) return true;
    return false;
  }
};

inline void save_checkpoint(const std::string& path, nlohmann::json header,
                            const std::vector<NamedParam>& params) {
  nlohmann::json dir = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& p : params) {
    dir.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}, {"size", p.numel}});
    offset += p.numel;
  }
  header["params"] = std::move(dir);
  header["format_version"] = 1;
  const std::string hjson = header.dump();

  std::string buf;
  buf.reserve(16 + hjson.size() + static_cast<std::size_t>(offset) * 4);
  buf.append(kCheckpointMagic, 8);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hjson.size());
  buf.append(reinterpret_cast<const char*>(&hlen), 4);
  buf.append(hjson);
  for (const auto& p : params)
    buf.append(reinterpret_cast<const char*>(p.data), static_cast<std::size_t>(p.numel) * 4);

  Fnv1a64 h;
  h.update(buf.data(), buf.size());
  const std::uint64_t checksum = h.value();
  buf.append(reinterpret_cast<const char*>(&checksum), 8);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open for write: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw CheckpointError("write failed: " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

inline std::string file_fnv_hex(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  return fnv1a64_hex(bytes.data(), bytes.size());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  if (bytes.size() < 20 || bytes.compare(0, 8, kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file: " + path);

  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  Fnv1a64 h;
  h.update(bytes.data(), bytes.size() - 8);
  if (h.value() != stored)
    throw CheckpointError("checkpoint checksum mismatch: " + path);

  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 4);
  if (12 + static_cast<std::size_t>(hlen) + 8 > bytes.size())
    throw CheckpointError("checkpoint header truncated: " + path);

  Checkpoint ckpt;
  ckpt.header = nlohmann::json::parse(bytes.substr(12, hlen));
  const std::size_t payload_bytes = bytes.size() - 8 - 12 - hlen;
  if (payload_bytes % 4 != 0)
    throw CheckpointError("checkpoint payload not float-aligned: " + path);
  ckpt.payload.resize(payload_bytes / 4);
  std::memcpy(ckpt.payload.data(), bytes.data() + 12 + hlen, payload_bytes);
  ckpt.file_hash = fnv1a64_hex(bytes.data(), bytes.size());
  return ckpt;
}

}  // namespace diffdet
