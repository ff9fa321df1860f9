#pragma once

// Binary checkpoint, little-endian:
//   "FHRFCKPT"                  8-byte magic
//   u32 version                 (1)
//   u64 x 8                     length, patch_size, input_dim, d_model, ffn_dim,
//                               n_heads, n_enc_layers, n_dec_layers
//   f64 x 2                     dropout, mask_ratio
//   u32 block count
//   per block: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values
//
// Loading validates every block's shape against the configuration before
// accepting anything.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

#include "fhrformer/model.hpp"

namespace fhrformer::model {

inline constexpr char kCheckpointMagic[8] = {'F', 'H', 'R', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, shape_mismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  template <typename T>
  T get() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint is truncated");
    }
  }

 private:
  std::istream& in_;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ModelWeights& w) {
  detail::Writer wr(out);
  const auto& c = w.config;
  wr.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  wr.put<std::uint32_t>(kCheckpointVersion);
  for (std::uint64_t v : {c.length, c.patch_size, c.input_dim, c.d_model, c.ffn_dim, c.n_heads, c.n_enc_layers,
                          c.n_dec_layers})
    wr.put<std::uint64_t>(v);
  wr.put<double>(c.dropout);
  wr.put<double>(c.mask_ratio);
  const auto params = w.parameters();
  wr.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    wr.bytes(p.name.data(), p.name.size());
    wr.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) wr.put<std::uint64_t>(d);
    wr.bytes(p.tensor.values().data(), p.tensor.size() * sizeof(double));
  }
}

/// Writes to a temporary sibling file and renames it into place.
inline void save_checkpoint(const std::filesystem::path& path, const ModelWeights& w) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + tmp.string());
    write_checkpoint(out, w);
    out.flush();
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Reads a checkpoint. With `expected`, block shapes are checked against that
/// configuration instead of the stored one, and a mismatch names the block.
inline ModelWeights read_checkpoint(std::istream& in, const std::optional<ModelConfig>& expected = std::nullopt) {
  detail::Reader rd(in);
  char magic[8];
  rd.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint (bad magic)");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::version_mismatch,
                          "checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  ModelConfig stored;
  stored.length = rd.get<std::uint64_t>();
  stored.patch_size = rd.get<std::uint64_t>();
  stored.input_dim = rd.get<std::uint64_t>();
  stored.d_model = rd.get<std::uint64_t>();
  stored.ffn_dim = rd.get<std::uint64_t>();
  stored.n_heads = rd.get<std::uint64_t>();
  stored.n_enc_layers = rd.get<std::uint64_t>();
  stored.n_dec_layers = rd.get<std::uint64_t>();
  stored.dropout = rd.get<double>();
  stored.mask_ratio = rd.get<double>();
  const ModelConfig& target = expected ? *expected : stored;
  try {
    target.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointError::Kind::shape_mismatch, std::string("invalid configuration: ") + e.what());
  }
  ModelWeights w = ModelWeights::initialize(target, 0);
  auto params = w.parameters();
  const auto count = rd.get<std::uint32_t>();
  if (count != params.size()) {
    throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                          "checkpoint has " + std::to_string(count) + " blocks, configuration needs " +
                              std::to_string(params.size()));
  }
  // Read everything first so nothing is accepted unless every block matches.
  std::vector<std::vector<double>> values(count);
  for (std::uint32_t b = 0; b < count; ++b) {
    const auto name_len = rd.get<std::uint32_t>();
    if (name_len > 4096) throw CheckpointError(CheckpointError::Kind::truncated, "corrupt block name length");
    std::string name(name_len, '\0');
    rd.bytes(name.data(), name_len);
    const auto rank = rd.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError(CheckpointError::Kind::truncated, "corrupt block rank");
    diff::Shape shape(rank);
    for (auto& d : shape) d = rd.get<std::uint64_t>();
    if (name != params[b].name) {
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "block " + std::to_string(b) + " is '" + name + "', expected '" + params[b].name + "'");
    }
    if (shape != params[b].tensor.shape()) {
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "shape mismatch in block '" + name + "': stored " + diff::shape_string(shape) +
                                ", configuration needs " + diff::shape_string(params[b].tensor.shape()));
    }
    values[b].resize(diff::shape_size(shape));
    rd.bytes(values[b].data(), values[b].size() * sizeof(double));
  }
  for (std::uint32_t b = 0; b < count; ++b) {
    auto dst = params[b].tensor.mutable_values();
    std::copy(values[b].begin(), values[b].end(), dst.begin());
  }
  return w;
}

inline ModelWeights load_checkpoint(const std::filesystem::path& path,
                                    const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path.string());
  return read_checkpoint(in, expected);
}

}  // namespace fhrformer::model
