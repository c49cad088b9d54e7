#pragma once
// IDX tensor files (the MNIST container format), read through zlib so plain
// and gzip-compressed files both work transparently. Nothing here downloads
// anything; a missing or malformed file raises with the byte offset (in the
// decompressed stream) where parsing went wrong.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "bpl/tensor.hpp"

namespace bpl {

struct IdxTensor {
  std::uint32_t magic = 0;            // big-endian header word, e.g. 0x00000803
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;     // row-major payload

  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t item_size() const {
    std::size_t n = 1;
    for (std::size_t i = 1; i < dims.size(); ++i) n *= dims[i];
    return n;
  }
};

[[noreturn]] inline void idx_fail(const std::string& path, std::size_t offset,
                                  const std::string& what) {
  throw std::runtime_error("idx: " + path + " at byte " + std::to_string(offset) +
                           " (decompressed): " + what);
}

// Whole decompressed stream; gzread passes uncompressed files through as-is.
inline std::vector<std::uint8_t> read_stream(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("idx: cannot open " + path);
  std::vector<std::uint8_t> bytes;
  std::vector<std::uint8_t> chunk(1 << 16);
  int n = 0;
  while ((n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()))) > 0)
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  if (n < 0) {
    int errnum = 0;
    const char* msg = gzerror(f, &errnum);
    std::string detail = (errnum == Z_ERRNO) ? "read error" : (msg ? msg : "stream error");
    gzclose(f);
    idx_fail(path, bytes.size(), "decompression failed: " + detail);
  }
  gzclose(f);
  return bytes;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

inline IdxTensor read_idx(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_stream(path);
  if (bytes.size() < 4)
    idx_fail(path, bytes.size(), "file ends inside the 4-byte magic header");
  if (bytes[0] != 0 || bytes[1] != 0)
    idx_fail(path, 0, "first two magic bytes must be zero");
  if (bytes[2] != 0x08)
    idx_fail(path, 2, "unsupported element type code " + std::to_string(int(bytes[2])) +
                          " (only unsigned byte, code 8, is supported)");
  const std::size_t ndims = bytes[3];
  if (ndims == 0 || ndims > 4)
    idx_fail(path, 3, "dimension count " + std::to_string(ndims) + " outside [1,4]");

  IdxTensor t;
  t.magic = read_be32(bytes, 0);
  std::size_t off = 4;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i, off += 4) {
    if (bytes.size() < off + 4)
      idx_fail(path, bytes.size(), "file ends inside dimension " + std::to_string(i));
    const std::size_t d = read_be32(bytes, off);
    if (d == 0) idx_fail(path, off, "dimension " + std::to_string(i) + " is zero");
    t.dims.push_back(d);
    total *= d;
  }
  if (bytes.size() != off + total)
    idx_fail(path, bytes.size(),
             "payload size mismatch: header promises " + std::to_string(total) +
                 " bytes after offset " + std::to_string(off) + ", file holds " +
                 std::to_string(bytes.size() - off));
  t.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return t;
}

// dir/base, else dir/base.gz; never fetches anything.
inline std::string resolve_idx_path(const std::string& dir, const std::string& base) {
  namespace fs = std::filesystem;
  const std::string plain = (fs::path(dir) / base).string();
  if (fs::exists(plain)) return plain;
  const std::string gz = plain + ".gz";
  if (fs::exists(gz)) return gz;
  throw std::runtime_error("idx: neither " + plain + " nor " + gz + " exists");
}

struct MnistSet {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
  std::vector<std::uint8_t> labels;  // count

  const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * rows * cols; }
};

inline MnistSet load_mnist_set(const std::string& dir, const std::string& images_base,
                               const std::string& labels_base) {
  const std::string ipath = resolve_idx_path(dir, images_base);
  const std::string lpath = resolve_idx_path(dir, labels_base);
  IdxTensor images = read_idx(ipath);
  IdxTensor labels = read_idx(lpath);
  if (images.magic != 0x00000803)
    idx_fail(ipath, 0, "expected image magic 0x00000803");
  if (labels.magic != 0x00000801)
    idx_fail(lpath, 0, "expected label magic 0x00000801");
  if (images.dims[0] != labels.dims[0])
    throw std::runtime_error("idx: " + ipath + " holds " + std::to_string(images.dims[0]) +
                             " images but " + lpath + " holds " +
                             std::to_string(labels.dims[0]) + " labels");
  MnistSet s;
  s.count = images.dims[0];
  s.rows = images.dims[1];
  s.cols = images.dims[2];
  s.pixels = std::move(images.data);
  s.labels = std::move(labels.data);
  return s;
}

}  // namespace bpl
