#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "p2mam/model.hpp"

namespace p2mam {

// Binary layout, little-endian throughout:
//   "P2M1"
//   u32 variant, u32 m, u32 d, u32 n, u32 b, u32 flags
//   per tensor in canonical order (V, P, q, Q_1..b, K_1..b, W_1..b, W):
//     u32 rows, u32 cols, rows*cols IEEE-754 binary32 values
// flags: bit 0 position embeddings, bit 1 pad mask, bit 2 per-head scaling.
struct CheckpointHeader {
  Variant variant = Variant::OP;
  std::uint32_t m = 0;
  std::uint32_t d = 0;
  std::uint32_t n = 0;
  std::uint32_t b = 0;
  bool use_position_embeddings = true;
  bool use_pad_mask = true;
  ScaleMode attention_scale_mode = ScaleMode::FullD;

  static CheckpointHeader from(const HyperParams& hp, std::size_t m);
  // Copies the architecture fields into hp, leaving optimizer fields alone.
  void apply_to(HyperParams& hp) const;
  std::uint32_t flags() const;
  friend bool operator==(const CheckpointHeader&, const CheckpointHeader&) = default;
};

struct Checkpoint {
  CheckpointHeader header;
  ModelParams params;
};

std::string encode_checkpoint(const CheckpointHeader& header, const ModelParams& params);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const HyperParams& hp, const ModelParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

// FNV-1a 64 of the encoded bytes, as 16 hex digits.
std::string checkpoint_id(const std::string& bytes);

}  // namespace p2mam
