#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ddet {

struct ImageU8 {
    int w = 0, h = 0, channels = 0; // 1 (gray) or 3 (RGB)
    std::vector<uint8_t> data;      // row-major, interleaved channels
};

// 8-bit PNG I/O. Throws std::runtime_error on failure.
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path); // returns RGB or grayscale as stored

} // namespace ddet
