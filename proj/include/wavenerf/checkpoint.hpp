#pragma once

#include <string>

#include "wavenerf/optim.hpp"

namespace wavenerf {

// Flat binary parameter container. Layout, all little-endian:
//   magic "WVNF", u32 format version, then per parameter:
//   u32 name length, name bytes, u32 ndim, ndim x u64 extents,
//   numel x f64 payload. Records run to end of file.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParamStore& params);

// Loads values into an existing store; every stored record must match a
// parameter of the same name and shape. Throws IoError on a malformed file
// and ContractError on version or shape mismatch.
void load_checkpoint(const std::string& path, ParamStore& params);

}  // namespace wavenerf
