#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dynseg/tensor.hpp"

namespace dynseg {

// Ordered, named collection of trainable tensors. Entries share storage with
// the tensors held by the owning network.
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, BasicTensor<T>>;

  BasicTensor<T> add(std::string name, BasicTensor<T> t);
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  const BasicTensor<T>& at(std::string_view name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  void set_requires_grad(bool on);
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

// One named float32 buffer as stored in a checkpoint.
struct NamedBuffer {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Checkpoint layout: <dir>/manifest.json lists {name, shape} in order with
// dtype "f32-le"; <dir>/tensors.bin holds the raw little-endian float32 buffers
// concatenated in manifest order.
void save_buffers(const std::filesystem::path& dir, const std::vector<NamedBuffer>& buffers);
std::vector<NamedBuffer> load_buffers(const std::filesystem::path& dir);

template <typename T>
void append_buffers(const ParamSet<T>& params, const std::string& prefix,
                    std::vector<NamedBuffer>& out);
// Copies matching buffers (prefix + name) into the params; shapes must agree
// and every parameter must be present.
template <typename T>
void restore_buffers(ParamSet<T>& params, const std::string& prefix,
                     const std::vector<NamedBuffer>& buffers);

}  // namespace dynseg
