#pragma once

// Checkpoint container.
//
//   offset  size  field
//   0       8     magic "VDPOCKPT"
//   8       4     format version (u32, currently 1)
//   12      32    SHA-256 of the payload
//   44      8     payload length in bytes (u64)
//   52      ...   payload
//
// Payload (all integers u64 and reals IEEE-754 binary64, little-endian):
//   model config: vocab_size, image_dim, embed_dim, hidden_dim,
//                 max_query_len, max_response_len, seed
//   tensor count, then per tensor: name (u64 length + bytes), rank, extents,
//                 values
//   trailing sections (optimizer state) are owned by the trainer.
//
// A load verifies magic, version and digest before decoding anything.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "vdpo/digest.hpp"
#include "vdpo/model/policy.hpp"

namespace vdpo::model {

inline constexpr char kCheckpointMagic[8] = {'V', 'D', 'P', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void encode_config(ByteWriter& w, const ModelConfig& config);
ModelConfig decode_config(ByteReader& r);

void encode_tensors(ByteWriter& w, std::span<const grad::Tensor> tensors,
                    std::span<const char* const> names);
std::vector<grad::Tensor> decode_tensors(ByteReader& r, std::span<const char* const> names);

// Config followed by the parameter tensors.
void encode_params(ByteWriter& w, const PolicyParams& params);
PolicyParams decode_params(ByteReader& r);

void write_container(const std::filesystem::path& path, std::span<const std::uint8_t> payload);
// Returns the verified payload. Throws ErrorKind::kIo when the file cannot
// be read and ErrorKind::kDigest on a bad header or digest mismatch.
std::vector<std::uint8_t> read_container(const std::filesystem::path& path);

// Parameters only. load_params accepts files that also carry trainer state.
void save_params(const std::filesystem::path& path, const PolicyParams& params);
PolicyParams load_params(const std::filesystem::path& path);

}  // namespace vdpo::model
