#include "dynseg/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <stdexcept>
#include <unordered_map>

#include "dynseg/io.hpp"

namespace dynseg {

template <typename T>
BasicTensor<T> ParamSet<T>::add(std::string name, BasicTensor<T> t) {
  for (const auto& [n, _] : entries_) {
    if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  t.set_requires_grad(true);
  entries_.emplace_back(std::move(name), t);
  return t;
}

template <typename T>
const BasicTensor<T>& ParamSet<T>::at(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

template <typename T>
std::size_t ParamSet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

template <typename T>
void ParamSet<T>::set_requires_grad(bool on) {
  for (auto& [_, t] : entries_) t.set_requires_grad(on);
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

using io::read_f32_le;
using io::write_f32_le;

void save_buffers(const std::filesystem::path& dir, const std::vector<NamedBuffer>& buffers) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["dtype"] = "f32-le";
  manifest["tensors"] = nlohmann::json::array();
  std::ofstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + (dir / "tensors.bin").string());
  for (const auto& b : buffers) {
    if (static_cast<Index>(b.values.size()) != numel(b.shape)) {
      throw ShapeError("checkpoint buffer " + b.name + " does not match its shape");
    }
    manifest["tensors"].push_back({{"name", b.name}, {"shape", b.shape}});
    write_f32_le(bin, b.values);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<NamedBuffer> load_buffers(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("missing checkpoint manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("dtype", "") != "f32-le") {
    throw std::runtime_error(manifest_path.string() + ": unsupported dtype");
  }
  const auto bin_path = dir / "tensors.bin";
  std::ifstream bf(bin_path, std::ios::binary);
  if (!bf) throw std::runtime_error("missing checkpoint data " + bin_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  std::vector<NamedBuffer> out;
  std::size_t offset = 0;
  for (const auto& entry : manifest.at("tensors")) {
    NamedBuffer b;
    b.name = entry.at("name").get<std::string>();
    b.shape = entry.at("shape").get<Shape>();
    const auto count = static_cast<std::size_t>(numel(b.shape));
    if (offset + count * 4 > bytes.size()) {
      throw std::runtime_error(bin_path.string() + ": truncated at tensor " + b.name + " (expected " +
                               std::to_string(offset + count * 4) + " bytes, have " +
                               std::to_string(bytes.size()) + ")");
    }
    read_f32_le(bytes.data() + offset, count, b.values);
    offset += count * 4;
    out.push_back(std::move(b));
  }
  if (offset != bytes.size()) {
    throw std::runtime_error(bin_path.string() + ": expected " + std::to_string(offset) +
                             " bytes, found " + std::to_string(bytes.size()));
  }
  return out;
}

template <typename T>
void append_buffers(const ParamSet<T>& params, const std::string& prefix,
                    std::vector<NamedBuffer>& out) {
  for (const auto& [name, t] : params.entries()) {
    out.push_back({prefix + name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
}

template <typename T>
void restore_buffers(ParamSet<T>& params, const std::string& prefix,
                     const std::vector<NamedBuffer>& buffers) {
  std::unordered_map<std::string, const NamedBuffer*> index;
  for (const auto& b : buffers) index[b.name] = &b;
  for (auto& [name, t] : params.entries()) {
    auto it = index.find(prefix + name);
    if (it == index.end()) throw std::runtime_error("checkpoint is missing tensor " + prefix + name);
    if (it->second->shape != t.shape()) {
      throw ShapeError("checkpoint tensor " + prefix + name + " has shape " +
                       shape_str(it->second->shape) + ", model expects " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
  }
}

template class ParamSet<float>;
template class ParamSet<double>;
template void append_buffers(const ParamSet<float>&, const std::string&, std::vector<NamedBuffer>&);
template void append_buffers(const ParamSet<double>&, const std::string&, std::vector<NamedBuffer>&);
template void restore_buffers(ParamSet<float>&, const std::string&, const std::vector<NamedBuffer>&);
template void restore_buffers(ParamSet<double>&, const std::string&, const std::vector<NamedBuffer>&);

}  // namespace dynseg
