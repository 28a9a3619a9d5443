// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary checkpoint layout, all integers little-endian:
//
//   "UMCK" | u32 version | u32 meta_len | meta (JSON text) | u32 crc32(meta)
//   u32 n_records, then per record:
//     u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 values[] | u32 crc32
//
// A record's checksum covers its name, dims and value bytes. Parameters are
// stored at 32-bit precision.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimatch/config.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/params.hpp"

#ifndef UNIMATCH_VERSION
#define UNIMATCH_VERSION "0.1.0"
#endif

namespace unimatch {

inline constexpr char kCheckpointMagic[4] = {'U', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::string build = "unimatch " UNIMATCH_VERSION;
  ModelParams params;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline std::uint32_t crc(const std::string& bytes, std::size_t from) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data() + from), static_cast<uInt>(bytes.size() - from)));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  std::size_t pos() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(static_cast<unsigned char>(b_[pos_]) |
                                              (static_cast<unsigned char>(b_[pos_ + 1]) << 8));
    pos_ += 2;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t crc_since(std::size_t from) const {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(b_.data() + from), static_cast<uInt>(pos_ - from)));
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

/// Zero-valued parameters with the shapes implied by a model config.
inline ModelParams shaped_like(const ModelConfig& cfg) {
  ModelParams p = init_params(cfg, 0);
  visit_model(p, [](const std::string&, ParamTensor& t) { std::fill(t.values.begin(), t.values.end(), 0.0); });
  return p;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  nlohmann::json meta;
  meta["build"] = ck.build;
  meta["config"] = serialize(ck.config);
  meta["epoch"] = ck.epoch;
  meta["seed"] = ck.seed;
  const std::string meta_text = meta.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  const std::size_t meta_at = out.size();
  out += meta_text;
  detail::put_u32(out, detail::crc(out, meta_at));

  std::uint32_t n = 0;
  visit_model(ck.params, [&](const std::string&, const ParamTensor&) { ++n; });
  detail::put_u32(out, n);
  visit_model(ck.params, [&](const std::string& name, const ParamTensor& t) {
    const std::size_t start = out.size();
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.shape.size()));
    for (std::size_t d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    detail::put_u32(out, detail::crc(out, start));
  });
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t meta_len = r.u32("metadata length");
  const std::size_t meta_at = r.pos();
  const std::string meta_text = r.bytes(meta_len, "metadata");
  const std::uint32_t meta_crc = r.crc_since(meta_at);
  if (r.u32("metadata checksum") != meta_crc) throw CheckpointError("metadata checksum mismatch");

  Checkpoint ck;
  try {
    const nlohmann::json meta = nlohmann::json::parse(meta_text);
    ck.build = meta.at("build").get<std::string>();
    ck.epoch = meta.at("epoch").get<std::size_t>();
    ck.seed = meta.at("seed").get<std::uint64_t>();
    ck.config = parse_config(meta.at("config").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }

  std::map<std::string, ParamTensor> records;
  const std::uint32_t n = r.u32("record count");
  for (std::uint32_t k = 0; k < n; ++k) {
    const std::size_t start = r.pos();
    const std::string name = r.bytes(r.u16("record name length"), "record name");
    ParamTensor t;
    const std::uint8_t ndim = r.u8("record rank");
    std::size_t count = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      t.shape.push_back(r.u32("record dims"));
      count *= t.shape.back();
    }
    r.need(count * 4, "record values");
    t.values.resize(count);
    for (double& v : t.values) v = static_cast<double>(std::bit_cast<float>(r.u32("record values")));
    const std::uint32_t expect = r.crc_since(start);
    if (r.u32("record checksum") != expect) throw CheckpointError("checksum mismatch in record '" + name + "'");
    if (!records.emplace(name, std::move(t)).second) throw CheckpointError("duplicate record '" + name + "'");
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last record");

  ck.params = detail::shaped_like(ck.config.model);
  std::size_t used = 0;
  visit_model(ck.params, [&](const std::string& name, ParamTensor& t) {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError("checkpoint lacks record '" + name + "'");
    if (it->second.shape != t.shape)
      throw CheckpointError("record '" + name + "' has shape " + ad::shape_str(it->second.shape) + ", config expects " +
                            ad::shape_str(t.shape));
    t = std::move(it->second);
    ++used;
  });
  if (used != records.size()) throw CheckpointError("checkpoint holds records the config does not describe");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace unimatch
