#pragma once

#include "ddet/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace ddet {

// Flat named-tensor container, used for checkpoints.
//
// Byte layout (all integers little-endian):
//   magic   "DDETCKPT" (8 bytes)
//   u32     format version (1)
//   u32     metadata length; that many bytes of UTF-8 JSON (model spec echo)
//   u32     tensor count
//   per tensor:
//     u16   name length; that many bytes of name
//     u8    rank; rank x u32 dims
//     f32   payload, row-major, dims product entries
struct NamedTensorFile {
    std::string metadata_json = "{}";
    std::vector<std::pair<std::string, TensorF>> tensors;
};

void save_container(const std::string& path, const NamedTensorFile& file);
NamedTensorFile load_container(const std::string& path);

} // namespace ddet
