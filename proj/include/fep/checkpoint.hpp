#pragma once

#include <iosfwd>
#include <string>

#include "fep/network.hpp"

namespace fep {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Portable binary container: ASCII magic "FEPNET1\n", little-endian
/// 32-bit header ints (loss kind, input shape, node list with kinds,
/// shapes and wiring), then every stored 64-bit float (parameters,
/// batch-norm running statistics, mask gates) in declaration order.
/// Round-trips bit-exactly.
void save_checkpoint(const Network& net, std::ostream& out);
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(std::istream& in);
Network load_checkpoint(const std::string& path);

}  // namespace fep
