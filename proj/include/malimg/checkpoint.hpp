#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "malimg/tensor.hpp"

namespace malimg {

// Tensor container layout (all integers little-endian):
//   "MCKP" | u32 version (1) | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u64 dims[rank]
//               | float32 values[prod(dims)]
// A JSON sidecar at <path>.json carries the model config and training step.

void write_tensor_container(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_container(const std::filesystem::path& path);

/// Writes content to path through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace malimg
