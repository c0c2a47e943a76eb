#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "joadaa/autograd.hpp"
#include "joadaa/config.hpp"
#include "joadaa/synth_data.hpp"

namespace joadaa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

/// Single-file checkpoint:
///   "JDCK" | u32 version | u32 config length | config text |
///   repeated { u16 name length | name | u8 rank | u32 dims[rank] | f32 data }
/// All integers and floats little-endian. Tensors run to end of file.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  KeyValueConfig config;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  template <typename S>
  void add(const std::string& name, const Matrix<S>& m) {
    NamedTensor t;
    t.name = name;
    t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    tensors.push_back(std::move(t));
  }

  template <typename S>
  Matrix<S> matrix(const std::string& name) const {
    const NamedTensor* t = find(name);
    if (t == nullptr) throw VersionError("checkpoint is missing tensor " + name);
    if (t->dims.size() != 2) throw VersionError("checkpoint tensor " + name + " is not rank 2");
    Matrix<S> m(t->dims[0], t->dims[1]);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(t->data[static_cast<std::size_t>(i)]);
    return m;
  }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::ostringstream out(std::ios::binary);
  out.write("JDCK", 4);
  io::put_u32(out, ck.version);
  const std::string cfg = ck.config.serialize();
  io::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  for (const auto& t : ck.tensors) {
    require(t.name.size() <= 0xFFFF, "checkpoint: tensor name too long");
    require(t.dims.size() <= 0xFF, "checkpoint: tensor rank too large");
    const auto len = static_cast<std::uint16_t>(t.name.size());
    const unsigned char l2[2] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8)};
    out.write(reinterpret_cast<const char*>(l2), 2);
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    out.put(static_cast<char>(t.dims.size()));
    std::size_t count = 1;
    for (auto d : t.dims) {
      io::put_u32(out, d);
      count *= d;
    }
    require(count == t.data.size(), "checkpoint: tensor " + t.name + " data size does not match dims");
    for (float f : t.data) io::put_f32(out, f);
  }
  return out.str();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "JDCK") throw IoError("not a checkpoint (bad magic)");
  Checkpoint ck;
  ck.version = io::get_u32(in);
  if (ck.version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(ck.version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  const auto cfg_len = io::get_u32(in);
  std::string cfg(cfg_len, '\0');
  if (!in.read(cfg.data(), cfg_len)) throw IoError("truncated checkpoint config block");
  ck.config = KeyValueConfig::parse(cfg);
  while (in.peek() != std::char_traits<char>::eof()) {
    unsigned char l2[2];
    if (!in.read(reinterpret_cast<char*>(l2), 2)) throw IoError("truncated checkpoint tensor header");
    NamedTensor t;
    t.name.resize(static_cast<std::size_t>(l2[0] | (l2[1] << 8)));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) throw IoError("truncated tensor name");
    const int rank = in.get();
    if (rank < 0) throw IoError("truncated tensor rank");
    std::size_t count = 1;
    for (int r = 0; r < rank; ++r) {
      t.dims.push_back(io::get_u32(in));
      count *= t.dims.back();
    }
    const auto remaining = bytes.size() - static_cast<std::size_t>(in.tellg());
    if (count > remaining / 4) throw IoError("truncated checkpoint tensor " + t.name);
    t.data.resize(count);
    for (auto& f : t.data) f = io::get_f32(in);
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = encode_checkpoint(ck);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

/// Appends every model parameter under its registry name.
template <typename Model>
void store_parameters(Checkpoint& ck, const Model& model, const std::string& prefix = "") {
  for (const auto* p : model.parameters()) ck.add(prefix + p->name, p->value);
}

/// Loads parameters by name; any missing or mis-shaped tensor is a version
/// mismatch between checkpoint and model config.
template <typename Model>
void load_parameters(const Checkpoint& ck, Model& model, const std::string& prefix = "") {
  for (auto* p : model.parameters()) {
    using S = typename std::remove_reference_t<decltype(p->value)>::Scalar;
    Matrix<S> m = ck.template matrix<S>(prefix + p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw VersionError("checkpoint tensor " + prefix + p->name + " has incompatible shape");
    p->value = std::move(m);
  }
}

}  // namespace joadaa
