#pragma once

#include <iosfwd>
#include <string>

#include "dpu/nn.hpp"

namespace dpu {

// "DPUM" container: magic, u16 format version, length-prefixed NetworkSpec
// (JSON), u64 step + epoch, then every state tensor as little-endian 32-bit
// floats behind a u32 rows/cols header. save(load(f)) is byte-identical to f.

inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'U', 'M'};
inline constexpr uint16_t kCheckpointVersion = 1;

void save_network(std::ostream& out, const NetworkSpec& spec, const NetworkState& state);
void save_network(const std::string& path, const NetworkSpec& spec, const NetworkState& state);

struct LoadedNetwork {
  NetworkSpec spec;
  NetworkState state;
};

LoadedNetwork load_network(std::istream& in, bool allow_trailing = false);
LoadedNetwork load_network(const std::string& path, bool allow_trailing = false);

// Spec (de)serialization used by the container and by reports.
std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const std::string& text);

}  // namespace dpu
