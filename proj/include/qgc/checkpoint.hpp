#pragma once

#include "qgc/nn.hpp"

#include <cstdint>
#include <string>

namespace qgc {

// Binary checkpoint layout (little-endian):
//   magic "QGC1" | u32 version | u32 tensor_count
//   per tensor: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 data[numel]
constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const NamedParams& params);

// loads fresh tensors (requires_grad = false)
NamedParams load_checkpoint(const std::string& path);

// fills existing tensors by name; every name must be present with matching shape
void load_checkpoint_into(const std::string& path, const NamedParams& params);

// FNV-1a over bytes
uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h = 14695981039346656037ull);

// order-sensitive hash over (name, shape, data) of every tensor
uint64_t params_hash(const NamedParams& params);

uint64_t file_hash(const std::string& path);

}  // namespace qgc
