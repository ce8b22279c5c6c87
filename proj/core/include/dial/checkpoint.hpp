#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dial/optim.hpp"

namespace dial {

// Binary container: magic "DIALCKPT", version, header (schedule position and
// action normalization stats), per-group parameter payload, then AdamState
// buffers in the same per-group layout. Little-endian throughout.
struct CheckpointMeta {
  std::uint64_t global_step = 0;
  std::uint8_t stage = 0;  // 0 = warmup, 1 = end_to_end
  std::vector<float> norm_mean;
  std::vector<float> norm_std;
};

void save_checkpoint(const std::string& path, const std::vector<ParamGroup>& groups,
                     const AdamState* adam, const CheckpointMeta& meta);

// Loads into an existing model: group names, parameter counts and shapes must
// match or a ContractError naming the group is thrown.
CheckpointMeta load_checkpoint(const std::string& path, std::vector<ParamGroup>& groups,
                               AdamState* adam);

// Reads only the header (cheap existence/shape probe).
CheckpointMeta peek_checkpoint(const std::string& path);

}  // namespace dial
