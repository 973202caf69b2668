#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "metr/errors.hpp"
#include "metr/mat.hpp"

namespace metr {

// Binary checkpoint of named tensors. Layout: magic + version, tensor
// count, then a manifest of (name, shape) records, then the payloads as
// little-endian 64-bit floats in manifest order. Tensors are kept sorted
// by name so save -> load -> save is byte-identical.
class Checkpoint {
 public:
  struct Tensor {
    std::vector<uint64_t> shape;
    std::vector<double> data;
  };

  void put(const std::string& name, const Mat& m) {
    Tensor t;
    t.shape = {static_cast<uint64_t>(m.rows), static_cast<uint64_t>(m.cols)};
    t.data = m.a;
    tensors_[name] = std::move(t);
  }

  void put(const std::string& name, const Vec& v) {
    Tensor t;
    t.shape = {static_cast<uint64_t>(v.size())};
    t.data = v;
    tensors_[name] = std::move(t);
  }

  void put_scalar(const std::string& name, double v) {
    Tensor t;
    t.shape = {1};
    t.data = {v};
    tensors_[name] = std::move(t);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  Mat get_mat(const std::string& name) const {
    const Tensor& t = find(name);
    if (t.shape.size() != 2) throw ShapeError("checkpoint: tensor '" + name + "' is not 2-d");
    Mat m(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
    m.a = t.data;
    return m;
  }

  Vec get_vec(const std::string& name) const {
    const Tensor& t = find(name);
    if (t.shape.size() != 1) throw ShapeError("checkpoint: tensor '" + name + "' is not 1-d");
    return t.data;
  }

  double get_scalar(const std::string& name) const {
    const Tensor& t = find(name);
    if (t.data.size() != 1) throw ShapeError("checkpoint: tensor '" + name + "' is not scalar");
    return t.data[0];
  }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, 8);
    write_u32(out, kVersion);
    write_u32(out, static_cast<uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
      write_u32(out, static_cast<uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(out, static_cast<uint32_t>(t.shape.size()));
      for (uint64_t dim : t.shape) write_u64(out, dim);
    }
    for (const auto& [name, t] : tensors_) {
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!out) throw NumericError("checkpoint: write failed for " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw DomainError("checkpoint: bad magic in " + path);
    if (read_u32(in) != kVersion) throw DomainError("checkpoint: unsupported version in " + path);
    const uint32_t count = read_u32(in);
    std::vector<std::pair<std::string, std::vector<uint64_t>>> manifest;
    manifest.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
      const uint32_t name_len = read_u32(in);
      std::string name(name_len, '\0');
      in.read(name.data(), name_len);
      const uint32_t ndim = read_u32(in);
      std::vector<uint64_t> shape(ndim);
      for (uint32_t k = 0; k < ndim; ++k) shape[k] = read_u64(in);
      manifest.emplace_back(std::move(name), std::move(shape));
    }
    Checkpoint ckpt;
    for (auto& [name, shape] : manifest) {
      uint64_t n = 1;
      for (uint64_t dim : shape) n *= dim;
      Tensor t;
      t.shape = shape;
      t.data.resize(n);
      in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
      ckpt.tensors_[name] = std::move(t);
    }
    if (!in) throw DomainError("checkpoint: truncated file " + path);
    return ckpt;
  }

 private:
  static constexpr const char* kMagic = "METRCKP1";
  static constexpr uint32_t kVersion = 1;

  std::map<std::string, Tensor> tensors_;

  const Tensor& find(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw DomainError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }

  static void write_u32(std::ofstream& out, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
  }

  static void write_u64(std::ofstream& out, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
  }

  static uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
  }

  static uint64_t read_u64(std::ifstream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
  }
};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

}  // namespace metr
