#pragma once

// VITBIND1 tensor archive.
//
//   bytes [0, 8)   magic "VITBIND1"
//   bytes [8, 16)  header length H, unsigned 64-bit little endian
//   bytes [16, 16+H) UTF-8 JSON header:
//       {"version": 1, "metadata": {...},
//        "tensors": [{"name", "dtype": "f32", "shape": [...], "offset", "nbytes"}, ...]}
//   bytes [16+H, end) payload; tensor offsets are relative to the payload start.
//
// All tensor data is little-endian float32.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vitbind/errors.hpp"
#include "vitbind/hash.hpp"
#include "vitbind/tensor.hpp"

namespace vitbind {

inline constexpr std::string_view kArchiveMagic = "VITBIND1";
inline constexpr int kArchiveVersion = 1;

struct ArchiveEntry {
  std::string name;
  std::string dtype = "f32";
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

namespace detail {

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void floats_to_le_bytes(std::span<const float> src, char* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src.data(), src.size_bytes());
  } else {
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(src[i]);
      for (int b = 0; b < 4; ++b) dst[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
}

inline void le_bytes_to_floats(const char* src, std::span<float> dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst.data(), src, dst.size_bytes());
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
      dst[i] = std::bit_cast<float>(bits);
    }
  }
}

}  // namespace detail

// Read-only view of an archive on disk. Tensor bytes are read on demand, so
// large bundles are never fully materialised. Safe for concurrent readers.
class TensorArchive {
 public:
  static TensorArchive read(const std::string& path);

  const nlohmann::json& metadata() const noexcept { return metadata_; }
  const std::vector<ArchiveEntry>& entries() const noexcept { return entries_; }
  const std::string& path() const noexcept { return path_; }
  std::size_t payload_size() const noexcept { return payload_size_; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const ArchiveEntry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("archive " + path_ + " has no tensor named '" + name + "'");
    return entries_[it->second];
  }

  Tensor tensor(const std::string& name) const {
    const ArchiveEntry& e = entry(name);
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw DataError("cannot reopen archive " + path_);
    std::string raw(e.nbytes, '\0');
    in.seekg(static_cast<std::streamoff>(payload_start_ + e.offset));
    in.read(raw.data(), static_cast<std::streamsize>(e.nbytes));
    if (static_cast<std::uint64_t>(in.gcount()) != e.nbytes)
      throw ParseError("archive " + path_ + " changed on disk while reading '" + name + "'", payload_start_ + e.offset);
    Tensor t(e.shape);
    detail::le_bytes_to_floats(raw.data(), t.data());
    return t;
  }

  // SHA-256 of the payload bytes.
  std::string payload_hash() const {
    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(payload_start_));
    std::string payload(payload_size_, '\0');
    in.read(payload.data(), static_cast<std::streamsize>(payload_size_));
    return sha256_hex(payload);
  }

 private:
  std::string path_;
  nlohmann::json metadata_ = nlohmann::json::object();
  std::vector<ArchiveEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t payload_start_ = 0;
  std::uint64_t payload_size_ = 0;
};

inline TensorArchive TensorArchive::read(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open archive " + path);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  char prefix[16] = {};
  in.read(prefix, 16);
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got < 8 || std::string_view(prefix, 8) != kArchiveMagic)
    throw ParseError("bad magic in " + path + ", expected VITBIND1", 0);
  if (got < 16) throw ParseError("truncated header length field in " + path, got);
  const std::uint64_t header_len = detail::read_u64_le(prefix + 8);
  if (header_len > file_size - 16)
    throw ParseError("header length " + std::to_string(header_len) + " exceeds file size " + std::to_string(file_size), 8);

  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON header: ") + e.what(), 16 + e.byte);
  }

  TensorArchive ar;
  ar.path_ = path;
  ar.payload_start_ = 16 + header_len;
  ar.payload_size_ = file_size - ar.payload_start_;
  if (!doc.is_object() || doc.value("version", -1) != kArchiveVersion)
    throw ParseError("unsupported archive version in " + path, 16);
  if (doc.contains("metadata")) ar.metadata_ = doc["metadata"];
  if (!doc.contains("tensors") || !doc["tensors"].is_array()) throw ParseError("header lacks a tensors array", 16);

  for (const auto& t : doc["tensors"]) {
    ArchiveEntry e;
    try {
      e.name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.nbytes = t.at("nbytes").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(std::string("malformed tensor entry: ") + ex.what(), 16);
    }
    if (e.dtype != "f32") throw ParseError("tensor '" + e.name + "' has unsupported dtype " + e.dtype, 16);
    if (e.nbytes != shape_volume(e.shape) * 4)
      throw ParseError("tensor '" + e.name + "' declares " + std::to_string(e.nbytes) + " bytes for shape " +
                           shape_string(e.shape),
                       16);
    if (e.offset + e.nbytes > ar.payload_size_) {
      throw ParseError("truncated payload: tensor '" + e.name + "' needs payload length " +
                           std::to_string(e.offset + e.nbytes) + " but only " + std::to_string(ar.payload_size_) +
                           " bytes are present",
                       ar.payload_start_ + ar.payload_size_);
    }
    if (!ar.index_.emplace(e.name, ar.entries_.size()).second)
      throw ParseError("duplicate tensor name '" + e.name + "'", 16);
    ar.entries_.push_back(std::move(e));
  }

  std::vector<const ArchiveEntry*> by_offset;
  for (const auto& e : ar.entries_) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(),
            [](const ArchiveEntry* a, const ArchiveEntry* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    const ArchiveEntry& prev = *by_offset[i - 1];
    const ArchiveEntry& cur = *by_offset[i];
    if (cur.nbytes > 0 && prev.offset + prev.nbytes > cur.offset)
      throw ParseError("tensors '" + prev.name + "' and '" + cur.name + "' overlap", ar.payload_start_ + cur.offset);
  }
  return ar;
}

// Accumulates named tensors and writes them as one archive.
class ArchiveWriter {
 public:
  nlohmann::json& metadata() { return metadata_; }

  ArchiveWriter& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw DataError("duplicate tensor name '" + name + "'");
    if (!t.all_finite()) throw DataError("tensor '" + name + "' contains non-finite values");
    index_.emplace(name, tensors_.size());
    tensors_.emplace_back(name, std::move(t));
    return *this;
  }

  std::size_t size() const { return tensors_.size(); }

  // Serialised bytes, deterministic for identical contents.
  std::string bytes() const {
    nlohmann::json doc;
    doc["version"] = kArchiveVersion;
    doc["metadata"] = metadata_;
    doc["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors_) {
      const std::uint64_t nbytes = t.size() * 4;
      doc["tensors"].push_back({{"name", name}, {"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
      offset += nbytes;
    }
    const std::string header = doc.dump();
    std::string out;
    out.reserve(16 + header.size() + offset);
    out.append(kArchiveMagic);
    detail::append_u64_le(out, header.size());
    out.append(header);
    const std::size_t payload_start = out.size();
    out.resize(payload_start + offset);
    std::size_t pos = payload_start;
    for (const auto& [name, t] : tensors_) {
      detail::floats_to_le_bytes(t.data(), out.data() + pos);
      pos += t.size() * 4;
    }
    return out;
  }

  // Write-temp-then-rename so readers never observe a partial file.
  void write(const std::string& path) const {
    const std::string data = bytes();
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot write archive " + tmp);
      out.write(data.data(), static_cast<std::streamsize>(data.size()));
      if (!out) throw DataError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, target);
  }

 private:
  nlohmann::json metadata_ = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::map<std::string, std::size_t> index_;
};

inline TensorArchive read_archive(const std::string& path) { return TensorArchive::read(path); }

inline void write_archive(const std::string& path, const ArchiveWriter& writer) { writer.write(path); }

}  // namespace vitbind
