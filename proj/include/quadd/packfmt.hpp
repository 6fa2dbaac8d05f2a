#pragma once

// The .qadd container: a small header, labels at the minimal fixed width and
// the payload of codebook indices packed LSB-first.
//
//   "QADD" u8 version
//   u32 M, u32 D, u32 classes
//   u8 kind, u8 b, u8 k
//   f64 alpha, f64 gamma
//   u16 level_count
//   u32 stats_bytes, then stats_bytes / 16 pairs of f64 (mean, std)
//   labels:  M x ceil(log2(classes)) bits, padded to a byte
//   payload: M x D x w bits, w = ceil(log2(level_count)), padded to a byte
//
// All scalars little-endian. The pass-through kind has level_count 0 and
// stores raw f64 values (w = 64).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "quadd/bytes.hpp"
#include "quadd/distilled.hpp"

namespace quadd {

inline constexpr std::uint8_t kPackVersion = 1;

class PackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class HeaderError : public PackError {
 public:
  using PackError::PackError;
};
class TruncatedError : public PackError {
 public:
  using PackError::PackError;
};
class IndexRangeError : public PackError {
 public:
  using PackError::PackError;
};
class OffCodebookError : public PackError {
 public:
  using PackError::PackError;
};

// ceil(log2(n)) with the convention that n <= 1 needs 0 bits.
unsigned bits_for(std::size_t n);

struct BitCounts {
  std::uint64_t payload = 0;   // M * D * w
  std::uint64_t labels = 0;    // M * ceil(log2(classes))
  std::uint64_t header = 0;
  std::uint64_t total = 0;     // payload + labels (+ header when included)
  std::uint64_t nominal = 0;   // M * D * b
  std::size_t level_count = 0;
  unsigned width = 0;
};

BitCounts measure_bits(const DistilledDataset& ds, bool include_header = true);

std::vector<std::uint8_t> pack(const DistilledDataset& ds);
DistilledDataset unpack(std::span<const std::uint8_t> bytes);

void save_qadd(const DistilledDataset& ds, const std::filesystem::path& path);
DistilledDataset load_qadd(const std::filesystem::path& path);

}  // namespace quadd
