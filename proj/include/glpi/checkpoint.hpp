#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   offset  size  field
//   0       4     magic "GLPI"
//   4       4     u32 format version (= 1)
//   8       8     u64 training step
//   16      56    config block: 14 x u32 in this order
//                   arch (0 dense, 1 moe), n_layers, d_model, n_heads, d_head,
//                   ffn_dim, n_experts, expert_dim, top_k, vocab, max_seq,
//                   nonlinearity (0 silu, 1 relu), gate_renorm, final_layernorm
//   72      4     u32 tensor count N
//   76      ...   tensor directory, N entries:
//                   u16 name length, name bytes (ASCII),
//                   u32 rank, rank x u64 dims, u64 absolute byte offset of data
//   ...           payload: each tensor as row-major IEEE-754 binary32 values
//
// Tensor names and order follow for_each_tensor(). Values are widened to
// 64-bit on load.

#include <cmath>
#include <map>
#include <string>

#include "glpi/io.hpp"
#include "glpi/model.hpp"

namespace glpi {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_config_block(ByteWriter& w, const ModelConfig& c) {
  for (std::size_t v : {c.arch == Arch::Moe ? std::size_t{1} : std::size_t{0}, c.n_layers, c.d_model, c.n_heads,
                        c.d_head, c.ffn_dim, c.n_experts, c.expert_dim, c.top_k, c.vocab, c.max_seq,
                        c.nonlinearity == Nonlinearity::ReLU ? std::size_t{1} : std::size_t{0},
                        std::size_t{c.gate_renorm}, std::size_t{c.final_layernorm}}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
}

inline ModelConfig read_config_block(ByteReader& r) {
  ModelConfig c;
  const auto arch = r.u32();
  if (arch > 1) throw DataError("checkpoint: unknown arch code " + std::to_string(arch));
  c.arch = arch == 1 ? Arch::Moe : Arch::Dense;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.d_head = r.u32();
  c.ffn_dim = r.u32();
  c.n_experts = r.u32();
  c.expert_dim = r.u32();
  c.top_k = r.u32();
  c.vocab = r.u32();
  c.max_seq = r.u32();
  const auto nl = r.u32();
  if (nl > 1) throw DataError("checkpoint: unknown nonlinearity code " + std::to_string(nl));
  c.nonlinearity = nl == 1 ? Nonlinearity::ReLU : Nonlinearity::SiLU;
  c.gate_renorm = r.u32() != 0;
  c.final_layernorm = r.u32() != 0;
  c.validate();
  return c;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  ck.config.validate();
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<const double> values;
  };
  std::vector<Entry> entries;
  for_each_tensor(ck.config, ck.weights, [&](ConstTensorView t) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.values.size()) throw ShapeError("checkpoint: tensor " + t.name + " has inconsistent shape");
    entries.push_back({t.name, t.shape, t.values});
  });

  ByteWriter w;
  w.bytes("GLPI");
  w.u32(kCheckpointVersion);
  w.u64(ck.step);
  write_config_block(w, ck.config);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  std::vector<std::size_t> offset_slots;
  for (const auto& e : entries) {
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(d);
    offset_slots.push_back(w.size());
    w.u64(0);
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    w.patch_u64(offset_slots[i], w.size());
    for (double v : entries[i].values) w.f32(static_cast<float>(v));
  }
  return w.str();
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  ByteReader r(bytes, what);
  if (r.bytes(4) != "GLPI") throw DataError(what + ": bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError(what + ": unsupported format version " + std::to_string(version));
  Checkpoint ck;
  ck.step = r.u64();
  ck.config = read_config_block(r);
  ck.weights = zero_weights(ck.config);

  struct DirEntry {
    std::vector<std::size_t> shape;
    std::uint64_t offset;
  };
  std::map<std::string, DirEntry> dir;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u16();
    std::string name(r.bytes(len));
    const auto rank = r.u32();
    if (rank > 4) throw DataError(what + ": tensor " + name + " has unsupported rank");
    DirEntry e;
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u64());
    e.offset = r.u64();
    if (!dir.emplace(name, e).second) throw DataError(what + ": duplicate tensor " + name);
  }
  std::size_t expected = 0;
  for_each_tensor(ck.config, ck.weights, [&](TensorView t) {
    ++expected;
    auto it = dir.find(t.name);
    if (it == dir.end()) throw DataError(what + ": missing tensor " + t.name);
    if (it->second.shape != t.shape) throw DataError(what + ": tensor " + t.name + " has wrong shape");
    r.seek(it->second.offset);
    for (double& v : t.values) v = static_cast<double>(r.f32());
  });
  if (expected != dir.size()) throw DataError(what + ": unexpected extra tensors");
  return ck;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) { atomic_write(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path), path.string()); }

// Weights rounded through binary32, exactly as a save/load round trip would.
inline ModelWeights round_to_f32(const ModelConfig& cfg, ModelWeights w) {
  for_each_tensor(cfg, w, [](TensorView t) {
    for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
  });
  return w;
}

}  // namespace glpi
