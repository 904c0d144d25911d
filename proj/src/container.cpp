#include "oawam/container.hpp"

#include <cstring>
#include <fstream>

#include "oawam/errors.hpp"

namespace oawam::io {

namespace {
constexpr char kMagic[8] = {'O', 'A', 'W', 'A', 'M', 'B', '0', '1'};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (const auto d : shape) n *= d;
  return n;
}
}  // namespace

void Container::put_raw(const std::string& name, const std::string& dtype,
                        const std::vector<std::int64_t>& shape, const void* data,
                        std::size_t elem_size) {
  if (entries_.count(name) > 0) {
    throw ConfigError("container: duplicate tensor name '" + name + "'");
  }
  TensorEntry e;
  e.dtype = dtype;
  e.shape = shape;
  e.offset = blob_.size();
  e.nbytes = static_cast<std::uint64_t>(shape_numel(shape)) * elem_size;
  blob_.resize(blob_.size() + e.nbytes);
  if (e.nbytes > 0) std::memcpy(blob_.data() + e.offset, data, e.nbytes);
  entries_[name] = std::move(e);
}

void Container::put_f32(const std::string& name, const std::vector<std::int64_t>& shape,
                        const float* data) {
  put_raw(name, "f32", shape, data, sizeof(float));
}
void Container::put_f64(const std::string& name, const std::vector<std::int64_t>& shape,
                        const double* data) {
  put_raw(name, "f64", shape, data, sizeof(double));
}
void Container::put_i32(const std::string& name, const std::vector<std::int64_t>& shape,
                        const std::int32_t* data) {
  put_raw(name, "i32", shape, data, sizeof(std::int32_t));
}

const TensorEntry& Container::entry(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ConfigError("container: no tensor named '" + name + "'");
  }
  return it->second;
}

std::int64_t Container::numel(const std::string& name) const {
  return shape_numel(entry(name).shape);
}

std::vector<float> Container::get_f32(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != "f32") throw ConfigError("container: '" + name + "' is not f32");
  std::vector<float> out(static_cast<std::size_t>(shape_numel(e.shape)));
  std::memcpy(out.data(), blob_.data() + e.offset, e.nbytes);
  return out;
}

std::vector<double> Container::get_f64(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != "f64") throw ConfigError("container: '" + name + "' is not f64");
  std::vector<double> out(static_cast<std::size_t>(shape_numel(e.shape)));
  std::memcpy(out.data(), blob_.data() + e.offset, e.nbytes);
  return out;
}

std::vector<std::int32_t> Container::get_i32(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != "i32") throw ConfigError("container: '" + name + "' is not i32");
  std::vector<std::int32_t> out(static_cast<std::size_t>(shape_numel(e.shape)));
  std::memcpy(out.data(), blob_.data() + e.offset, e.nbytes);
  return out;
}

void Container::save(const std::string& path) const {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  auto& tensors = manifest["tensors"] = nlohmann::json::object();
  for (const auto& [name, e] : entries_) {
    tensors[name] = {{"dtype", e.dtype},
                     {"shape", e.shape},
                     {"offset", e.offset},
                     {"nbytes", e.nbytes}};
  }
  const std::string mtxt = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("container: cannot open '" + path + "' for writing");
  f.write(kMagic, sizeof(kMagic));
  const std::uint64_t mlen = mtxt.size();
  f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  f.write(mtxt.data(), static_cast<std::streamsize>(mtxt.size()));
  f.write(reinterpret_cast<const char*>(blob_.data()),
          static_cast<std::streamsize>(blob_.size()));
  if (!f) throw RuntimeFailure("container: short write to '" + path + "'");
}

namespace {
nlohmann::json read_manifest(std::ifstream& f, const std::string& path) {
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ConfigError("container: '" + path + "' is not an OAWAM container");
  }
  std::uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtxt(mlen, '\0');
  f.read(mtxt.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw ConfigError("container: truncated manifest in '" + path + "'");
  return nlohmann::json::parse(mtxt);
}
}  // namespace

Container Container::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("container: cannot open '" + path + "'");
  const nlohmann::json manifest = read_manifest(f, path);

  Container c;
  c.meta = manifest.value("meta", nlohmann::json::object());
  std::uint64_t total = 0;
  for (const auto& [name, j] : manifest.at("tensors").items()) {
    TensorEntry e;
    e.dtype = j.at("dtype").get<std::string>();
    e.shape = j.at("shape").get<std::vector<std::int64_t>>();
    e.offset = j.at("offset").get<std::uint64_t>();
    e.nbytes = j.at("nbytes").get<std::uint64_t>();
    total = std::max(total, e.offset + e.nbytes);
    c.entries_[name] = std::move(e);
  }
  c.blob_.resize(total);
  f.read(reinterpret_cast<char*>(c.blob_.data()), static_cast<std::streamsize>(total));
  if (!f && total > 0) throw ConfigError("container: truncated blob in '" + path + "'");
  return c;
}

nlohmann::json Container::peek_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("container: cannot open '" + path + "'");
  return read_manifest(f, path);
}

}  // namespace oawam::io
