#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "rashnet/resnet.hpp"

namespace rashnet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout, all integers little-endian:
///
///   "RNET" | u32 version | config echo | u8 policy | u32 tensor count |
///   per tensor: u16 name length, name, u8 dtype code, u8 rank,
///               i64 extents[rank], u8 trainable, raw values
///
/// Parameters come first in Network::parameters() order, then running
/// statistics in Network::buffers() order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Network& net, std::ostream& out);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(std::istream& in);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace rashnet
