#include "qgc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace qgc {

namespace {

constexpr char kMagic[4] = {'Q', 'G', 'C', '1'};

template <typename T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_pod<uint32_t>(os, kCheckpointVersion);
  write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& nt : params) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const auto& shape = nt.tensor.shape();
    write_pod<uint32_t>(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
    const auto& data = nt.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

NamedParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = read_pod<uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  uint32_t count = read_pod<uint32_t>(is, path);
  NamedParams out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated file: " + path);
    uint32_t rank = read_pod<uint32_t>(is, path);
    std::vector<int> shape(rank);
    long numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      uint64_t d = read_pod<uint64_t>(is, path);
      shape[r] = static_cast<int>(d);
      numel *= static_cast<long>(d);
    }
    std::vector<double> data(static_cast<size_t>(numel));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated file: " + path);
    out.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data))});
  }
  return out;
}

void load_checkpoint_into(const std::string& path, const NamedParams& params) {
  NamedParams loaded = load_checkpoint(path);
  std::unordered_map<std::string, Tensor> by_name;
  for (auto& nt : loaded) by_name.emplace(nt.name, nt.tensor);
  for (const auto& nt : params) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing tensor '" + nt.name + "' in " + path);
    if (it->second.shape() != nt.tensor.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + nt.name + "': file has " +
                               shape_str(it->second.shape()) + ", model expects " +
                               shape_str(nt.tensor.shape()));
    nt.tensor.impl()->data = it->second.data();
  }
}

uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t params_hash(const NamedParams& params) {
  uint64_t h = 14695981039346656037ull;
  for (const auto& nt : params) {
    h = fnv1a64(nt.name.data(), nt.name.size(), h);
    for (int d : nt.tensor.shape()) {
      uint64_t dd = static_cast<uint64_t>(d);
      h = fnv1a64(&dd, sizeof(dd), h);
    }
    h = fnv1a64(nt.tensor.data().data(), nt.tensor.data().size() * sizeof(double), h);
  }
  return h;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("file_hash: cannot open: " + path);
  uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
  }
  return h;
}

}  // namespace qgc
