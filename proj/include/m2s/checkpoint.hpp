#pragma once

#include <cstdint>
#include <string>

#include "m2s/nn.hpp"

namespace m2s {

// On-disk model snapshot: a text manifest (magic, config hash, dtype, ordered
// parameter names and shapes) followed by the raw little-endian float32
// payload in manifest order. Save/load round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ParamRefs<float>& params,
                     std::uint64_t config_hash);

// Loads into params (names and shapes must match exactly). A hash mismatch is
// rejected unless force is set.
void load_checkpoint(const std::string& path, ParamRefs<float>& params,
                     std::uint64_t expected_hash, bool force = false);

std::uint64_t checkpoint_config_hash(const std::string& path);

}  // namespace m2s
