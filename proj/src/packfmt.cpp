#include "quadd/packfmt.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace quadd {

namespace {

constexpr std::uint8_t kMagic[4] = {'Q', 'A', 'D', 'D'};
constexpr std::uint64_t kFixedHeaderBytes = 4 + 1 + 3 * 4 + 3 + 2 * 8 + 2 + 4;
constexpr double kCodebookTolerance = 1e-9;

std::size_t level_count_of(const QuantizerSpec& spec) {
  return spec.kind == QuantizerKind::none ? 0 : spec.codebook().size();
}

unsigned width_of(const QuantizerSpec& spec) {
  return spec.kind == QuantizerKind::none ? 64U : bits_for(spec.codebook().size());
}

}  // namespace

unsigned bits_for(std::size_t n) {
  unsigned w = 0;
  while (w < 64 && (std::uint64_t{1} << w) < n) ++w;
  return w;
}

BitCounts measure_bits(const DistilledDataset& ds, bool include_header) {
  BitCounts c;
  c.level_count = level_count_of(ds.spec);
  c.width = width_of(ds.spec);
  const std::uint64_t m = ds.size();
  c.payload = m * ds.dim * c.width;
  c.labels = m * bits_for(ds.classes);
  c.header = 8 * (kFixedHeaderBytes + 16 * ds.norm.mean.size());
  c.nominal = m * ds.dim * static_cast<std::uint64_t>(ds.spec.kind == QuantizerKind::none ? 64 : ds.spec.bits);
  c.total = c.payload + c.labels + (include_header ? c.header : 0);
  return c;
}

std::vector<std::uint8_t> pack(const DistilledDataset& ds) {
  ds.spec.validate();
  if (ds.samples.size() != ds.size() * ds.dim) throw PackError("pack: sample matrix size mismatch");
  const bool normed = !ds.norm.empty();
  if (normed && (ds.norm.mean.size() != ds.dim || ds.norm.std.size() != ds.dim)) {
    throw PackError("pack: normalization statistics do not match D=" + std::to_string(ds.dim));
  }
  const std::vector<double> values = ds.discrete ? ds.samples : materialize(ds);

  ByteWriter w;
  w.raw(kMagic);
  w.u8(kPackVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.dim));
  w.u32(static_cast<std::uint32_t>(ds.classes));
  w.u8(static_cast<std::uint8_t>(ds.spec.kind));
  w.u8(static_cast<std::uint8_t>(ds.spec.bits));
  w.u8(static_cast<std::uint8_t>(ds.spec.k));
  w.f64(ds.spec.alpha);
  w.f64(ds.spec.gamma());
  const std::size_t levels = level_count_of(ds.spec);
  if (levels > 0xFFFF) throw PackError("pack: codebook too large for the header");
  w.u16(static_cast<std::uint16_t>(levels));
  w.u32(static_cast<std::uint32_t>(16 * ds.norm.mean.size()));
  for (std::size_t d = 0; d < ds.norm.mean.size(); ++d) {
    w.f64(ds.norm.mean[d]);
    w.f64(ds.norm.std[d]);
  }

  BitWriter lw;
  const unsigned label_width = bits_for(ds.classes);
  for (int y : ds.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= ds.classes) throw PackError("pack: label out of range");
    lw.put(static_cast<std::uint64_t>(y), label_width);
  }
  w.raw(lw.bytes());

  BitWriter pw;
  if (ds.spec.kind == QuantizerKind::none) {
    for (double v : values) pw.put(std::bit_cast<std::uint64_t>(v), 64);
  } else {
    const Codebook cb = ds.spec.codebook();
    const unsigned width = bits_for(cb.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::size_t c = i % ds.dim;
      const double z = normed ? (values[i] - ds.norm.mean[c]) / ds.norm.std[c] : values[i];
      const std::size_t idx = cb.nearest_index(z);
      if (std::abs(cb.levels()[idx] - z) > kCodebookTolerance * std::max(1.0, std::abs(z))) {
        throw OffCodebookError("pack: element " + std::to_string(i) + " = " + std::to_string(z) +
                               " is not a codebook level (nearest " + std::to_string(cb.levels()[idx]) + ")");
      }
      pw.put(idx, width);
    }
  }
  w.raw(pw.bytes());
  return std::move(w.bytes());
}

DistilledDataset unpack(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  DistilledDataset ds;
  try {
    const auto magic = r.raw(4);
    if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw HeaderError("unpack: bad magic");
    const auto version = r.u8();
    if (version != kPackVersion) throw HeaderError("unpack: unsupported version " + std::to_string(version));
    const std::size_t m = r.u32();
    ds.dim = r.u32();
    ds.classes = r.u32();
    const auto kind = r.u8();
    if (kind > static_cast<std::uint8_t>(QuantizerKind::apot)) {
      throw HeaderError("unpack: unknown quantizer kind " + std::to_string(kind));
    }
    ds.spec.kind = static_cast<QuantizerKind>(kind);
    ds.spec.bits = r.u8();
    ds.spec.k = r.u8();
    ds.spec.alpha = r.f64();
    const double gamma = r.f64();
    const std::size_t levels = r.u16();
    const std::size_t stats_bytes = r.u32();
    try {
      ds.spec.validate();
    } catch (const QuantizerError& e) {
      throw HeaderError(std::string("unpack: invalid quantizer parameters: ") + e.what());
    }
    if (std::abs(gamma - ds.spec.gamma()) > 1e-12 * std::max(1.0, std::abs(gamma))) {
      throw HeaderError("unpack: stored gamma disagrees with alpha");
    }
    if (levels != level_count_of(ds.spec)) {
      throw HeaderError("unpack: level count " + std::to_string(levels) + " does not match the codebook");
    }
    if (stats_bytes % 16 != 0 || (stats_bytes != 0 && stats_bytes / 16 != ds.dim)) {
      throw HeaderError("unpack: malformed statistics block");
    }
    if (ds.classes == 0 && m > 0) throw HeaderError("unpack: zero classes");
    for (std::size_t d = 0; d < stats_bytes / 16; ++d) {
      ds.norm.mean.push_back(r.f64());
      ds.norm.std.push_back(r.f64());
      if (!(ds.norm.std.back() > 0.0)) throw HeaderError("unpack: non-positive std in statistics block");
    }
    ds.spec.normalize = !ds.norm.empty();

    const unsigned label_width = bits_for(ds.classes);
    const std::size_t label_bytes = (m * label_width + 7) / 8;
    BitReader lr(r.raw(label_bytes));
    ds.labels.resize(m);
    for (auto& y : ds.labels) {
      const auto v = lr.get(label_width);
      if (v >= ds.classes) throw IndexRangeError("unpack: label " + std::to_string(v) + " out of range");
      y = static_cast<int>(v);
    }

    const unsigned width = width_of(ds.spec);
    const std::uint64_t payload_bits = static_cast<std::uint64_t>(m) * ds.dim * width;
    const std::size_t payload_bytes = static_cast<std::size_t>((payload_bits + 7) / 8);
    BitReader pr(r.raw(payload_bytes));
    if (r.remaining() != 0) throw HeaderError("unpack: trailing bytes after payload");
    ds.samples.resize(m * ds.dim);
    if (ds.spec.kind == QuantizerKind::none) {
      for (auto& v : ds.samples) v = std::bit_cast<double>(pr.get(64));
    } else {
      const Codebook cb = ds.spec.codebook();
      for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto idx = pr.get(width);
        if (idx >= cb.size()) {
          throw IndexRangeError("unpack: index " + std::to_string(idx) + " >= level count " +
                                std::to_string(cb.size()) + " at element " + std::to_string(i));
        }
        const std::size_t c = i % ds.dim;
        const double z = cb.levels()[idx];
        ds.samples[i] = ds.spec.normalize ? z * ds.norm.std[c] + ds.norm.mean[c] : z;
      }
    }
  } catch (const TruncatedInput& e) {
    throw TruncatedError(std::string("unpack: ") + e.what());
  }
  ds.discrete = true;
  return ds;
}

void save_qadd(const DistilledDataset& ds, const std::filesystem::path& path) { write_file(path, pack(ds)); }

DistilledDataset load_qadd(const std::filesystem::path& path) { return unpack(read_file(path)); }

}  // namespace quadd
