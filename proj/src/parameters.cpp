#include "est/parameters.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "est/binary_io.hpp"
#include "est/errors.hpp"

namespace est {

namespace io {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ValidationError("cannot open '" + path.string() + "' for reading");
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<unsigned char> bytes(size);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw ValidationError("short read from '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("short write to '" + path.string() + "'");
}

}  // namespace io

Tensor ParameterStore::add(const std::string& name, Shape shape, std::vector<double> init) {
  if (name.empty()) throw ValidationError("parameter name must not be empty");
  if (contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ValidationError("parameter name too long");
  params_.push_back(Tensor::named(name, std::move(shape), std::move(init), true));
  return params_.back();
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Tensor& t) { return t.name() == name; });
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& t : params_)
    if (t.name() == name) return t;
  throw ValidationError("unknown parameter '" + name + "'");
}

std::size_t ParameterStore::total_elements() const {
  std::size_t total = 0;
  for (const auto& t : params_) total += t.numel();
  return total;
}

void ParameterStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& t : params_)
    if (t.name().rfind(prefix, 0) == 0) t.set_requires_grad(trainable);
}

void ParameterStore::set_all_trainable(bool trainable) { set_trainable("", trainable); }

void ParameterStore::copy_values_from(const ParameterStore& other) {
  if (other.size() != size()) throw ArtifactMismatch("parameter stores differ in size");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& src = other.params_[i];
    Tensor& dst = params_[i];
    if (src.name() != dst.name() || src.shape() != dst.shape()) {
      throw ArtifactMismatch("parameter '" + dst.name() + "' does not match '" + src.name() + "'");
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

std::vector<unsigned char> encode_checkpoint(const ParameterStore& store) {
  io::ByteWriter w;
  w.bytes("ESTW");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& t : store.all()) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name().size()));
    w.bytes(t.name());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    w.put_array<double>(t.data());
  }
  return std::move(w.buffer());
}

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(store));
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "ESTW") throw FormatError("bad checkpoint magic, expected \"ESTW\"", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto count = r.get<std::uint32_t>("parameter count");
  std::vector<CheckpointEntry> entries;
  entries.reserve(std::min<std::size_t>(count, 1u << 16));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string label = "parameter " + std::to_string(i);
    CheckpointEntry e;
    const auto name_len = r.get<std::uint16_t>(label + " name length");
    e.name = r.bytes(name_len, label + " name");
    const auto rank = r.get<std::uint8_t>(label + " rank");
    for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint32_t>(label + " extent"));
    const std::size_t n = numel(e.shape);
    r.require(n * sizeof(double), "data of '" + e.name + "'");
    e.data.resize(n);
    r.get_array<double>(e.data, "data of '" + e.name + "'");
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last parameter", r.offset());
  return entries;
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

void load_checkpoint(ParameterStore& store, const std::vector<CheckpointEntry>& entries) {
  if (entries.size() != store.size()) {
    throw ArtifactMismatch("checkpoint has " + std::to_string(entries.size()) + " parameters, model expects " +
                           std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = store.all()[i];
    if (entries[i].name != t.name()) {
      throw ArtifactMismatch("checkpoint parameter '" + entries[i].name + "' where model expects '" + t.name() + "'");
    }
    if (entries[i].shape != t.shape()) {
      throw ArtifactMismatch("parameter '" + t.name() + "' has shape " + to_string(entries[i].shape) +
                             " in checkpoint but " + to_string(t.shape()) + " in model");
    }
    std::copy(entries[i].data.begin(), entries[i].data.end(), t.mutable_data().begin());
  }
}

}  // namespace est
