#pragma once

#include "ddet/geometry.hpp"

#include <string>
#include <vector>

namespace ddet {

// PASCAL-VOC-style annotation I/O. Coordinates are written as integers
// (rounded to nearest); read inverts write. Parse errors name the offending
// field or class.
void write_voc_xml(const std::string& path, const std::string& image_id, int width, int height,
                   const std::vector<LabeledBox>& labels);

std::vector<LabeledBox> read_voc_xml(const std::string& path);

} // namespace ddet
