#pragma once

#include <cstdint>
#include <string>

#include "tsa/backbone.hpp"

namespace tsa {

/// IEEE 802.3 CRC-32 (reflected, polynomial 0xEDB88320).
uint32_t crc32(const void* data, size_t n);

/// Binary weights file: "TSAW" magic, format version, the backbone layout,
/// then one named record per tensor and a trailing CRC-32 of everything
/// before it. Payloads are little-endian floats at the build's precision
/// (dtype-tagged per record; loads convert from either width). Heads are
/// meta-train leftovers and are skipped unless asked for.
void save_weights(const BackboneWeights& w, const std::string& path,
                  bool include_heads = false);

/// Throws std::runtime_error naming the problem: unreadable file, wrong
/// magic, unsupported version, truncation, checksum mismatch, or a record
/// whose extents disagree with its payload.
BackboneWeights load_weights(const std::string& path);

}  // namespace tsa
