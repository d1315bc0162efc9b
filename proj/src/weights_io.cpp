#include "tsa/weights_io.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace tsa {

uint32_t crc32(const void* data, size_t n) {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) crc = (crc >> 8) ^ table[(crc ^ p[i]) & 0xFFu];
  return crc ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[4] = {'T', 'S', 'A', 'W'};
constexpr uint8_t kDtypeF64 = 0;
constexpr uint8_t kDtypeF32 = 1;
constexpr uint8_t kNativeDtype = sizeof(real) == 8 ? kDtypeF64 : kDtypeF32;

void put_u8(std::vector<unsigned char>& b, uint8_t v) { b.push_back(v); }

void put_u32(std::vector<unsigned char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f64(std::vector<unsigned char>& b, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

void put_f32(std::vector<unsigned char>& b, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

void put_str(std::vector<unsigned char>& b, const std::string& s) {
  put_u32(b, static_cast<uint32_t>(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

[[noreturn]] void fail(const std::string& why) {
  throw std::runtime_error("weights file: " + why);
}

struct Cursor {
  const unsigned char* p;
  size_t n;
  size_t off = 0;

  void need(size_t k) const {
    if (off + k > n) fail("truncated");
  }
  uint8_t u8() {
    need(1);
    return p[off++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  double f64() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[off + i]) << (8 * i);
    off += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32() {
    need(4);
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(p[off + i]) << (8 * i);
    off += 4;
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    const uint32_t len = u32();
    if (len > 4096) fail("implausible name length");
    need(len);
    std::string s(reinterpret_cast<const char*>(p + off), len);
    off += len;
    return s;
  }
};

}  // namespace

void save_weights(const BackboneWeights& w, const std::string& path,
                  bool include_heads) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put_u32(buf, kWeightsFormatVersion);

  const BackboneSpec& spec = w.spec;
  put_str(buf, spec.name);
  put_u32(buf, static_cast<uint32_t>(spec.in_channels));
  put_u32(buf, static_cast<uint32_t>(spec.stem.out_channels));
  put_u32(buf, static_cast<uint32_t>(spec.stem.kernel));
  put_u32(buf, static_cast<uint32_t>(spec.stem.stride));
  put_u32(buf, static_cast<uint32_t>(spec.stem.pad));
  put_u8(buf, spec.stem.pool ? 1 : 0);
  put_u32(buf, static_cast<uint32_t>(spec.stage_channels.size()));
  for (int c : spec.stage_channels) put_u32(buf, static_cast<uint32_t>(c));
  put_u32(buf, static_cast<uint32_t>(spec.blocks_per_stage));

  uint32_t count = 0;
  for (const auto& [name, t] : w.tensors)
    if (include_heads || !is_head_name(name)) ++count;
  put_u32(buf, count);
  for (const auto& [name, t] : w.tensors) {
    if (!include_heads && is_head_name(name)) continue;
    put_str(buf, name);
    put_u8(buf, kNativeDtype);
    put_u32(buf, static_cast<uint32_t>(t.shape().size()));
    for (int e : t.shape()) put_u32(buf, static_cast<uint32_t>(e));
    if (kNativeDtype == kDtypeF64)
      for (real v : t.data()) put_f64(buf, static_cast<double>(v));
    else
      for (real v : t.data()) put_f32(buf, static_cast<float>(v));
  }
  put_u32(buf, crc32(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) fail("short write to " + path);
}

BackboneWeights load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail("cannot open " + path);
  const auto size = static_cast<size_t>(in.tellg());
  if (size < 12) fail("truncated");
  std::vector<unsigned char> buf(size);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) fail("short read from " + path);

  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<uint32_t>(buf[size - 4 + i]) << (8 * i);
  if (crc32(buf.data(), size - 4) != stored) fail("checksum mismatch");

  Cursor c{buf.data(), size - 4};
  char magic[4];
  c.need(4);
  std::memcpy(magic, c.p, 4);
  c.off = 4;
  if (std::memcmp(magic, kMagic, 4) != 0) fail("not a weights file");
  const uint32_t version = c.u32();
  if (version != kWeightsFormatVersion)
    fail("unsupported version " + std::to_string(version));

  BackboneWeights w;
  w.spec.name = c.str();
  w.spec.in_channels = static_cast<int>(c.u32());
  w.spec.stem.out_channels = static_cast<int>(c.u32());
  w.spec.stem.kernel = static_cast<int>(c.u32());
  w.spec.stem.stride = static_cast<int>(c.u32());
  w.spec.stem.pad = static_cast<int>(c.u32());
  w.spec.stem.pool = c.u8() != 0;
  const uint32_t num_stages = c.u32();
  if (num_stages == 0 || num_stages > 64) fail("implausible stage count");
  for (uint32_t i = 0; i < num_stages; ++i)
    w.spec.stage_channels.push_back(static_cast<int>(c.u32()));
  w.spec.blocks_per_stage = static_cast<int>(c.u32());

  const uint32_t count = c.u32();
  if (count > 100000) fail("implausible record count");
  for (uint32_t r = 0; r < count; ++r) {
    const std::string name = c.str();
    if (name.empty()) fail("record with empty name");
    const uint8_t dtype = c.u8();
    if (dtype != kDtypeF64 && dtype != kDtypeF32)
      fail("unknown dtype in record " + name);
    const uint32_t rank = c.u32();
    if (rank == 0 || rank > 8) fail("implausible rank in record " + name);
    Shape shape;
    int64_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      const uint32_t e = c.u32();
      if (e == 0 || e > (1u << 24)) fail("implausible extent in record " + name);
      shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    if (numel > (int64_t(1) << 28)) fail("implausible size of record " + name);
    const size_t width = dtype == kDtypeF64 ? 8 : 4;
    c.need(static_cast<size_t>(numel) * width);  // extents vs remaining payload
    std::vector<real> data(static_cast<size_t>(numel));
    for (auto& v : data)
      v = dtype == kDtypeF64 ? static_cast<real>(c.f64()) : static_cast<real>(c.f32());
    if (w.tensors.count(name)) fail("duplicate record " + name);
    w.tensors[name] = Tensor::from(shape, std::move(data));
  }
  if (c.off != c.n) fail("trailing bytes after last record");
  return w;
}

}  // namespace tsa
