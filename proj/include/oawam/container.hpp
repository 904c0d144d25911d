#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace oawam::io {

// Self-describing binary container: magic, a JSON manifest naming every
// tensor (name, dtype, shape, offset, nbytes) plus arbitrary metadata, then
// the raw little-endian blobs. Checkpoints, episode files, and reports all
// use this one format so `inspect` can render any of them without decoding
// the payload.
struct TensorEntry {
  std::string dtype;  // "f32" | "f64" | "i32"
  std::vector<std::int64_t> shape;
  std::uint64_t offset = 0;  // into the blob section
  std::uint64_t nbytes = 0;
};

class Container {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put_f32(const std::string& name, const std::vector<std::int64_t>& shape,
               const float* data);
  void put_f64(const std::string& name, const std::vector<std::int64_t>& shape,
               const double* data);
  void put_i32(const std::string& name, const std::vector<std::int64_t>& shape,
               const std::int32_t* data);

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const TensorEntry& entry(const std::string& name) const;
  const std::map<std::string, TensorEntry>& entries() const { return entries_; }

  std::vector<float> get_f32(const std::string& name) const;
  std::vector<double> get_f64(const std::string& name) const;
  std::vector<std::int32_t> get_i32(const std::string& name) const;

  std::int64_t numel(const std::string& name) const;

  void save(const std::string& path) const;
  static Container load(const std::string& path);
  // Reads magic + manifest only; blob section is skipped.
  static nlohmann::json peek_manifest(const std::string& path);

 private:
  void put_raw(const std::string& name, const std::string& dtype,
               const std::vector<std::int64_t>& shape, const void* data,
               std::size_t elem_size);

  std::map<std::string, TensorEntry> entries_;
  std::vector<std::uint8_t> blob_;
};

}  // namespace oawam::io
