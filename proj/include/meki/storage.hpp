#pragma once
// Binary persistence: a named-tensor checkpoint container and the expert
// bank file with O(1) row access by (layer, token). Both formats are fixed
// little-endian regardless of host, with explicit per-scalar encoding.
//
// Checkpoint layout ("MEKC"):
//   magic(4) version(u32) dtype(u8) config_len(u32) config_text
//   n_entries(u32) entries[ name_len(u16) name ndim(u8) dims(u32 each)
//   offset(u64) ] payload_len(u64) payload
// Entry offsets are relative to the payload start.
//
// Bank layout ("MEKB"):
//   magic(4) version(u32) n_layers(u32) vocab(u32) d_mem(u32) dtype(u8)
//   provenance(u64) -- exactly 29 bytes -- then n_layers*vocab*d_mem
//   scalars, layer-major then token-major then channel-major.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "meki/config.hpp"
#include "meki/model.hpp"
#include "meki/tensor.hpp"

namespace meki {

inline constexpr uint32_t kFormatVersion = 1;
inline constexpr size_t kBankHeaderBytes = 29;

// ---- byte-level helpers -----------------------------------------------------

namespace detail {

inline void put_u8(std::string& out, uint8_t v) { out.push_back((char)v); }
inline void put_u16(std::string& out, uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back((char)((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((char)((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((char)((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const uint8_t* p;
  size_t len;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > len) throw FormatError("unexpected end of data");
  }
  uint8_t u8() {
    need(1);
    return p[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = (uint16_t)(p[pos] | (p[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint32_t)p[pos + i] << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)p[pos + i] << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s((const char*)p + pos, n);
    pos += n;
    return s;
  }
};

template <class S>
void put_scalar(std::string& out, S v) {
  if constexpr (sizeof(S) == 4)
    put_u32(out, std::bit_cast<uint32_t>((float)v));
  else
    put_u64(out, std::bit_cast<uint64_t>((double)v));
}

inline float decode_f32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= (uint32_t)p[i] << (8 * i);
  return std::bit_cast<float>(v);
}

inline double decode_f64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (uint64_t)p[i] << (8 * i);
  return std::bit_cast<double>(v);
}

inline uint16_t decode_u16(const uint8_t* p) {
  return (uint16_t)(p[0] | (p[1] << 8));
}

}  // namespace detail

// 64-bit FNV-1a; cheap integrity fingerprint, not cryptographic.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 14695981039346656037ull) {
  const uint8_t* p = (const uint8_t*)data;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

// ---- checkpoint -------------------------------------------------------------

template <class S>
std::string serialize_checkpoint(ModelParams<S>& params) {
  using namespace detail;
  params.config.validate();

  struct Entry {
    Parameter<S>* p;
    uint64_t offset;
  };
  std::vector<Entry> entries;
  uint64_t offset = 0;
  params.for_each_param([&](Parameter<S>& p) {
    entries.push_back({&p, offset});
    offset += (uint64_t)p.value.numel() * sizeof(S);
  });

  std::string config_text = serialize_model_config(params.config);
  std::string out;
  out.reserve(64 + config_text.size() + offset);
  out += "MEKC";
  put_u32(out, kFormatVersion);
  put_u8(out, (uint8_t)dtype_of<S>::value);
  put_u32(out, (uint32_t)config_text.size());
  out += config_text;
  put_u32(out, (uint32_t)entries.size());
  for (const Entry& e : entries) {
    if (e.p->name.size() > UINT16_MAX) throw FormatError("parameter name too long");
    put_u16(out, (uint16_t)e.p->name.size());
    out += e.p->name;
    put_u8(out, (uint8_t)e.p->value.ndim());
    for (int64_t d : e.p->value.shape) put_u32(out, (uint32_t)d);
    put_u64(out, e.offset);
  }
  put_u64(out, offset);
  for (const Entry& e : entries)
    for (S v : e.p->value.data) put_scalar(out, v);
  return out;
}

template <class S>
void write_checkpoint(ModelParams<S>& params, const std::string& path) {
  std::string bytes = serialize_checkpoint(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f.write(bytes.data(), (std::streamsize)bytes.size());
  if (!f) throw FormatError("write failed: " + path);
}

// Content fingerprint used to tie banks to their source checkpoint.
template <class S>
uint64_t checkpoint_provenance(ModelParams<S>& params) {
  std::string bytes = serialize_checkpoint(params);
  return fnv1a64(bytes.data(), bytes.size());
}

namespace detail {

struct CheckpointEntryInfo {
  std::string name;
  Shape shape;
  uint64_t offset;
};

struct CheckpointHeader {
  ModelConfig config;
  Dtype dtype;
  std::vector<CheckpointEntryInfo> entries;
  uint64_t payload_len;
  size_t payload_start;  // byte position within the file
};

// Parses everything before the payload. `reader` must hold at least the
// header bytes; payload bytes are not touched.
inline CheckpointHeader parse_checkpoint_header(ByteReader& r) {
  CheckpointHeader h;
  if (r.bytes(4) != "MEKC") throw FormatError("bad checkpoint magic");
  uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  uint8_t dt = r.u8();
  if (dt != (uint8_t)Dtype::f32 && dt != (uint8_t)Dtype::f64)
    throw FormatError("unsupported checkpoint dtype code " + std::to_string(dt));
  h.dtype = (Dtype)dt;
  uint32_t config_len = r.u32();
  h.config = parse_model_config_text(r.bytes(config_len));
  uint32_t n_entries = r.u32();
  h.entries.reserve(n_entries);
  for (uint32_t i = 0; i < n_entries; ++i) {
    CheckpointEntryInfo e;
    uint16_t name_len = r.u16();
    e.name = r.bytes(name_len);
    uint8_t ndim = r.u8();
    e.shape.resize(ndim);
    for (uint8_t d = 0; d < ndim; ++d) e.shape[d] = r.u32();
    e.offset = r.u64();
    h.entries.push_back(std::move(e));
  }
  h.payload_len = r.u64();
  h.payload_start = r.pos;
  // offsets must be non-overlapping and land inside the payload
  uint64_t expect = 0;
  for (const auto& e : h.entries) {
    uint64_t bytes = (uint64_t)shape_numel(e.shape) * dtype_size(h.dtype);
    if (e.offset != expect)
      throw FormatError("checkpoint entry '" + e.name + "' offset " +
                        std::to_string(e.offset) + " overlaps or leaves a gap");
    expect += bytes;
  }
  if (expect != h.payload_len)
    throw FormatError("checkpoint payload length mismatch: header says " +
                      std::to_string(h.payload_len) + ", entries need " +
                      std::to_string(expect));
  return h;
}

inline std::string read_file_prefix(const std::string& path, size_t max_bytes) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path);
  std::string buf(max_bytes, '\0');
  f.read(buf.data(), (std::streamsize)max_bytes);
  buf.resize((size_t)f.gcount());
  return buf;
}

inline std::string read_whole_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("cannot open: " + path);
  std::streamsize n = f.tellg();
  f.seekg(0);
  std::string buf((size_t)n, '\0');
  f.read(buf.data(), n);
  if (f.gcount() != n) throw IntegrityError("short read: " + path);
  return buf;
}

}  // namespace detail

// Reads config and dtype without touching tensor payload bytes.
inline std::pair<ModelConfig, Dtype> read_checkpoint_header(const std::string& path) {
  // Headers are tiny; 1 MiB covers any plausible entry table.
  std::string buf = detail::read_file_prefix(path, 1 << 20);
  detail::ByteReader r{(const uint8_t*)buf.data(), buf.size()};
  detail::CheckpointHeader h = detail::parse_checkpoint_header(r);
  return {h.config, h.dtype};
}

template <class S>
ModelParams<S> read_checkpoint(const std::string& path) {
  std::string buf = detail::read_whole_file(path);
  detail::ByteReader r{(const uint8_t*)buf.data(), buf.size()};
  detail::CheckpointHeader h = detail::parse_checkpoint_header(r);
  if (h.dtype != dtype_of<S>::value)
    throw FormatError(std::string("checkpoint holds ") + dtype_name(h.dtype) +
                      " tensors, requested " + dtype_name(dtype_of<S>::value));
  if (buf.size() - h.payload_start != h.payload_len)
    throw IntegrityError("checkpoint payload truncated: have " +
                         std::to_string(buf.size() - h.payload_start) + " bytes, need " +
                         std::to_string(h.payload_len));

  ModelParams<S> params = ModelParams<S>::init(h.config, 0);
  std::map<std::string, Parameter<S>*> by_name;
  params.for_each_param([&](Parameter<S>& p) { by_name[p.name] = &p; });

  std::map<std::string, bool> filled;
  for (auto& [name, _] : by_name) filled[name] = false;

  const uint8_t* payload = (const uint8_t*)buf.data() + h.payload_start;
  for (const auto& e : h.entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) {
      std::cerr << "warning: checkpoint entry '" << e.name
                << "' not used by this model, skipping\n";
      continue;
    }
    Parameter<S>& p = *it->second;
    if (p.value.shape != e.shape)
      throw FormatError("checkpoint entry '" + e.name + "' has shape " +
                        shape_str(e.shape) + ", model expects " +
                        shape_str(p.value.shape));
    const uint8_t* src = payload + e.offset;
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      if constexpr (sizeof(S) == 4)
        p.value.data[i] = detail::decode_f32(src + i * 4);
      else
        p.value.data[i] = detail::decode_f64(src + i * 8);
    }
    p.zero_grad();
    filled[e.name] = true;
  }
  for (auto& [name, ok] : filled)
    if (!ok) throw FormatError("checkpoint is missing tensor '" + name + "'");
  return params;
}

// ---- bank file ----------------------------------------------------------------

struct BankHeader {
  uint32_t version = kFormatVersion;
  uint32_t n_layers = 0;
  uint32_t vocab_size = 0;
  uint32_t d_mem = 0;
  Dtype dtype = Dtype::f32;
  uint64_t provenance = 0;

  uint64_t row_bytes() const { return (uint64_t)d_mem * dtype_size(dtype); }
  uint64_t payload_bytes() const {
    return (uint64_t)n_layers * vocab_size * d_mem * dtype_size(dtype);
  }
  uint64_t file_bytes() const { return kBankHeaderBytes + payload_bytes(); }
  uint64_t row_offset(int64_t l, int64_t t) const {
    return kBankHeaderBytes + ((uint64_t)l * vocab_size + (uint64_t)t) * row_bytes();
  }
};

namespace detail {

inline std::string encode_bank_header(const BankHeader& h) {
  std::string out;
  out += "MEKB";
  put_u32(out, h.version);
  put_u32(out, h.n_layers);
  put_u32(out, h.vocab_size);
  put_u32(out, h.d_mem);
  put_u8(out, (uint8_t)h.dtype);
  put_u64(out, h.provenance);
  return out;
}

inline BankHeader decode_bank_header(ByteReader& r) {
  if (r.bytes(4) != "MEKB") throw FormatError("bad bank magic");
  BankHeader h;
  h.version = r.u32();
  if (h.version != kFormatVersion)
    throw FormatError("unsupported bank version " + std::to_string(h.version));
  h.n_layers = r.u32();
  h.vocab_size = r.u32();
  h.d_mem = r.u32();
  uint8_t dt = r.u8();
  if (dt != (uint8_t)Dtype::f32 && dt != (uint8_t)Dtype::f16)
    throw FormatError("bank dtype code " + std::to_string(dt) +
                      " not supported (0=f32, 1=f16)");
  h.dtype = (Dtype)dt;
  h.provenance = r.u64();
  return h;
}

}  // namespace detail

// Writes expert tables to a bank file. Tables hold values already rounded
// to the bank dtype, so encoding is a pure narrowing of each scalar.
template <class S>
void write_bank_file(const std::string& path, const BankHeader& header,
                     const std::vector<Tensor<S>>& tables) {
  if (header.dtype != Dtype::f32 && header.dtype != Dtype::f16)
    throw FormatError("bank files store f32 or f16 rows");
  if (tables.size() != header.n_layers)
    throw ConfigError("bank table count " + std::to_string(tables.size()) +
                      " does not match header layer count " +
                      std::to_string(header.n_layers));
  for (const auto& t : tables)
    if (t.shape != Shape{(int64_t)header.vocab_size, (int64_t)header.d_mem})
      throw ConfigError("bank table shape " + shape_str(t.shape) + " does not match " +
                        shape_str({(int64_t)header.vocab_size, (int64_t)header.d_mem}));

  std::string out = detail::encode_bank_header(header);
  out.reserve(header.file_bytes());
  for (const auto& t : tables) {
    if (header.dtype == Dtype::f32)
      for (S v : t.data) detail::put_u32(out, std::bit_cast<uint32_t>((float)v));
    else
      for (S v : t.data) detail::put_u16(out, f32_to_f16((float)v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f.write(out.data(), (std::streamsize)out.size());
  if (!f) throw FormatError("write failed: " + path);
}

// Seek-based row access. Every read touches exactly one row's bytes.
class BankReader {
 public:
  explicit BankReader(const std::string& path) : path_(path), file_(path, std::ios::binary) {
    if (!file_) throw FormatError("cannot open: " + path);
    std::string head((size_t)kBankHeaderBytes, '\0');
    file_.read(head.data(), (std::streamsize)head.size());
    if ((size_t)file_.gcount() != kBankHeaderBytes)
      throw FormatError("bank header truncated: " + path);
    detail::ByteReader r{(const uint8_t*)head.data(), head.size()};
    header_ = detail::decode_bank_header(r);

    file_.seekg(0, std::ios::end);
    uint64_t actual = (uint64_t)file_.tellg();
    if (actual != header_.file_bytes())
      throw IntegrityError("bank file size " + std::to_string(actual) +
                           " does not match header-implied size " +
                           std::to_string(header_.file_bytes()));
  }

  const BankHeader& header() const { return header_; }

  // One seek, one row read; repeated calls are bit-identical.
  std::vector<float> read_row(int64_t l, int64_t t) {
    if (l < 0 || l >= (int64_t)header_.n_layers)
      throw std::out_of_range("bank layer " + std::to_string(l) + " out of range [0," +
                              std::to_string(header_.n_layers) + ")");
    if (t < 0 || t >= (int64_t)header_.vocab_size)
      throw std::out_of_range("bank token " + std::to_string(t) + " out of range [0," +
                              std::to_string(header_.vocab_size) + ")");
    file_.clear();
    file_.seekg((std::streamoff)header_.row_offset(l, t));
    std::string buf((size_t)header_.row_bytes(), '\0');
    file_.read(buf.data(), (std::streamsize)buf.size());
    if ((size_t)file_.gcount() != buf.size())
      throw IntegrityError("bank row read truncated at (" + std::to_string(l) + "," +
                           std::to_string(t) + "): " + path_);
    std::vector<float> row(header_.d_mem);
    const uint8_t* p = (const uint8_t*)buf.data();
    for (uint32_t j = 0; j < header_.d_mem; ++j) {
      if (header_.dtype == Dtype::f32)
        row[j] = detail::decode_f32(p + j * 4);
      else
        row[j] = f16_to_f32(detail::decode_u16(p + j * 2));
    }
    return row;
  }

  // FNV-1a over each layer's on-disk payload bytes, for `bank inspect`.
  std::vector<uint64_t> layer_checksums() {
    std::vector<uint64_t> sums;
    uint64_t layer_bytes = (uint64_t)header_.vocab_size * header_.row_bytes();
    std::string buf((size_t)layer_bytes, '\0');
    for (uint32_t l = 0; l < header_.n_layers; ++l) {
      file_.clear();
      file_.seekg((std::streamoff)header_.row_offset(l, 0));
      file_.read(buf.data(), (std::streamsize)buf.size());
      if ((size_t)file_.gcount() != buf.size())
        throw IntegrityError("bank layer " + std::to_string(l) + " truncated: " + path_);
      sums.push_back(fnv1a64(buf.data(), buf.size()));
    }
    return sums;
  }

 private:
  std::string path_;
  std::ifstream file_;
  BankHeader header_;
};

}  // namespace meki
