#pragma once

#include <cstdint>
#include <string>

#include "modalpatch/graph.hpp"

namespace modalpatch {

// Checkpoint = <prefix>.json header + <prefix>.bin payload. The payload is
// every parameter's doubles back to back, little-endian, ordered by name;
// the header lists {name, shape, offset} per parameter.
void save_checkpoint(const ad::Bindings& params, const std::string& prefix);
ad::Bindings load_checkpoint(const std::string& prefix);
bool checkpoint_exists(const std::string& prefix);

// FNV-1a over a file's bytes; used for run-manifest input hashes.
uint64_t file_hash(const std::string& path);
std::string hash_hex(uint64_t h);

}  // namespace modalpatch
