#pragma once

// Checkpoint serialization. One binary file:
//
//   bytes 0..3   magic "BGLT"
//   bytes 4..7   uint32, little endian: JSON header length in bytes
//   8 .. 8+len   UTF-8 JSON header
//   afterwards   payload: raw IEEE-754 doubles, little endian, host order
//
// The header records {"version": 1, "variant": ..., "seed": ..., "model":
// {config fields}, "tensors": [{"name", "shape", "offset"}]} where offset is
// the byte offset of the tensor's data inside the payload. Aliased
// generation-expert tensors are stored once under their understanding-expert
// name; loading rebuilds the parameter set for the recorded variant, which
// restores the aliasing, then fills in the stored values. The seed is the
// training run's seed, kept so the frozen vision tower can be rebuilt
// identically at load time. Written and read on little-endian hosts only.

#include <string>

#include "bagel/model.hpp"

namespace bagel {

void save_checkpoint(const std::string& path, ModelParams& params, unsigned long long seed);

struct LoadedCheckpoint {
  ModelParams params;
  unsigned long long seed = 0;
};

// rejects bad magic, unknown versions, malformed headers, and shape or name
// mismatches against the recorded model config
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace bagel
