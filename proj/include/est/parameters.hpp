#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "est/tensor.hpp"

namespace est {

// Named learnable leaves in registration order. Names are unique and form the
// keys of GradientMap entries and checkpoint records.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> init);

  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  const std::vector<Tensor>& all() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_elements() const;

  // Toggles requires_grad on every parameter whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool trainable);
  void set_all_trainable(bool trainable);

  // Copies values from another store with identical names and shapes.
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<Tensor> params_;
};

// ESTW checkpoint: "ESTW", u32 version, u32 count, then per parameter
// u16 name length, name bytes, u8 rank, rank x u32 extents, float64 data.
// All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> encode_checkpoint(const ParameterStore& store);
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

// Throws FormatError with the failing byte offset.
std::vector<CheckpointEntry> decode_checkpoint(std::span<const unsigned char> bytes);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

// Copies checkpoint values into a store. Throws ArtifactMismatch when the
// names or shapes disagree.
void load_checkpoint(ParameterStore& store, const std::vector<CheckpointEntry>& entries);

}  // namespace est
