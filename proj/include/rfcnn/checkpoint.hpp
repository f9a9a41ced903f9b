#pragma once

// Checkpoint container (all integers little-endian):
//
//   "RFCNN1"                      6 bytes magic
//   u16 version                   currently 1
//   u32 length, bytes             architecture text block (see to_text)
//   u32 count, records            parameters, then batchnorm running stats
//   u32 count, records            Adam moments ("adam_m/<param>", "adam_v/<param>")
//   u64 step_count
//
// record := u32 name_length, name bytes, u32 rank, u32 extents[rank],
//           float32 payload[prod(extents)]

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rfcnn/optim.hpp"

namespace rfcnn {

inline constexpr char kCheckpointMagic[] = "RFCNN1";
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace io {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(std::string("truncated input while reading ") + what);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  read_exact(is, b, 2, "u16");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, b, 4, "u32");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, b, 8, "u64");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

inline std::string get_string(std::istream& is, std::uint32_t max_len = 1u << 24) {
  const auto n = get_u32(is);
  if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  read_exact(is, s.data(), n, "string");
  return s;
}

/// Named float32 array with extents, the unit of both binary containers.
struct Record {
  std::string name;
  std::vector<std::uint32_t> extents;
  std::vector<float> values;
};

inline void put_record(std::ostream& os, const Record& r) {
  put_string(os, r.name);
  put_u32(os, static_cast<std::uint32_t>(r.extents.size()));
  for (auto e : r.extents) put_u32(os, e);
  for (float f : r.values) put_f32(os, f);
}

inline Record get_record(std::istream& is) {
  Record r;
  r.name = get_string(is, 4096);
  const auto rank = get_u32(is);
  if (rank > 8) throw FormatError("record '" + r.name + "' has implausible rank " + std::to_string(rank));
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    r.extents.push_back(get_u32(is));
    n *= r.extents.back();
  }
  if (n > (1ull << 32)) throw FormatError("record '" + r.name + "' is too large");
  r.values.resize(n);
  for (auto& f : r.values) f = get_f32(is);
  return r;
}

template <class T>
Record make_record(const std::string& name, const Shape& shape, std::span<const T> values) {
  Record r{name, {}, {}};
  for (auto e : shape) r.extents.push_back(static_cast<std::uint32_t>(e));
  r.values.reserve(values.size());
  for (auto v : values) r.values.push_back(static_cast<float>(v));
  return r;
}

}  // namespace io

template <class T>
void save_checkpoint(std::ostream& os, ModelState<T>& state) {
  os.write(kCheckpointMagic, 6);
  io::put_u16(os, kCheckpointVersion);
  io::put_string(os, to_text(state.model.spec()));

  auto& params = state.model.parameters();
  auto buffers = state.model.buffers();
  io::put_u32(os, static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto& p : params) {
    io::put_record(os, io::make_record<T>(p.name, p.tensor.shape(), p.tensor.data()));
  }
  for (const auto& b : buffers) {
    io::put_record(os, io::make_record<T>(b.name, {b.values->size()}, *b.values));
  }

  io::put_u32(os, static_cast<std::uint32_t>(2 * params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    io::put_record(os, io::make_record<T>("adam_m/" + params[i].name, params[i].tensor.shape(), state.adam.m[i]));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    io::put_record(os, io::make_record<T>("adam_v/" + params[i].name, params[i].tensor.shape(), state.adam.v[i]));
  }
  io::put_u64(os, state.adam.step_count);
  if (!os) throw FormatError("checkpoint write failed");
}

template <class T>
void save_checkpoint(const std::string& path, ModelState<T>& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  save_checkpoint(os, state);
}

template <class T = float>
ModelState<T> load_checkpoint(std::istream& is) {
  char magic[6];
  io::read_exact(is, magic, 6, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 6) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = io::get_u16(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto spec = parse_arch_text(io::get_string(is));
  ModelState<T> state(spec, 0);

  std::map<std::string, io::Record> records;
  const auto n_state = io::get_u32(is);
  for (std::uint32_t i = 0; i < n_state; ++i) {
    auto r = io::get_record(is);
    auto name = r.name;
    records.emplace(std::move(name), std::move(r));
  }
  auto take = [&](const std::string& name, std::size_t numel) -> const io::Record& {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError("checkpoint lacks record '" + name + "'");
    if (it->second.values.size() != numel) throw FormatError("checkpoint record '" + name + "' has wrong size");
    return it->second;
  };
  for (auto& p : state.model.parameters()) {
    const auto& r = take(p.name, p.tensor.numel());
    std::copy(r.values.begin(), r.values.end(), p.tensor.data().begin());
  }
  for (auto& b : state.model.buffers()) {
    const auto& r = take(b.name, b.values->size());
    std::copy(r.values.begin(), r.values.end(), b.values->begin());
  }

  records.clear();
  const auto n_moments = io::get_u32(is);
  for (std::uint32_t i = 0; i < n_moments; ++i) {
    auto r = io::get_record(is);
    auto name = r.name;
    records.emplace(std::move(name), std::move(r));
  }
  auto& params = state.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = take("adam_m/" + params[i].name, params[i].tensor.numel());
    const auto& v = take("adam_v/" + params[i].name, params[i].tensor.numel());
    std::copy(m.values.begin(), m.values.end(), state.adam.m[i].begin());
    std::copy(v.values.begin(), v.values.end(), state.adam.v[i].begin());
  }
  state.adam.step_count = io::get_u64(is);
  return state;
}

template <class T = float>
ModelState<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  return load_checkpoint<T>(is);
}

}  // namespace rfcnn
