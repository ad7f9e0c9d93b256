#ifndef BRANCHCONNECT_CHECKPOINT_H_
#define BRANCHCONNECT_CHECKPOINT_H_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "branchconnect/network.h"
#include "branchconnect/random.h"

namespace branchconnect {

// Binary layout, little-endian:
//   magic "BCCKPT\0\0", u32 version, u32 scalar bytes
//   string  branch network spec (sectioned text)
//   u64 seed, u64 iteration
//   u64 tensor count, then per tensor: string name, u64 rank, u64 dims[rank],
//       scalar data[prod(dims)]   (parameters, "momentum/<name>", extras)
//   gate block: u64 classes, u64 branches, u64 active, u8 frozen,
//       scalar real[C*M], u8 binary[C*M]
//   string  rng state
// Strings are u64 length + bytes.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkState state;
  std::string rng_state;
  /// Non-parameter tensors stored alongside, e.g. "data/mean_image".
  std::map<std::string, Tensor> extras;
};

std::vector<std::uint8_t> EncodeCheckpoint(const Checkpoint& ckpt);
Checkpoint DecodeCheckpoint(const std::vector<std::uint8_t>& bytes);
void SaveCheckpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint LoadCheckpoint(const std::string& path);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_CHECKPOINT_H_
