#pragma once

#include "ddet/classes.hpp"
#include "ddet/geometry.hpp"
#include "ddet/png_io.hpp"
#include "ddet/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ddet {

// Synthetic defect-image generation: class-distinguishable glyphs (disc
// stacks for insulators, ring dials for gauges) over optionally cluttered
// backgrounds. Pure function of (seed, index, spec).

struct GenSpec {
    uint64_t seed = 0;
    int count = 64;
    int size = 64;
    std::array<double, 5> class_weights = kClassWeights;
    double clutter = 1.0; // 0 = exactly uniform background
};

struct DatasetSample {
    TensorF image; // [3,H,W], values in [0,1]
    std::vector<LabeledBox> labels;
    std::string image_id;
};

DatasetSample generate_sample(uint64_t seed, int index, const GenSpec& spec);

// float [3,H,W] in [0,1] <-> 8-bit interleaved RGB
ImageU8 tensor_to_u8(const TensorF& img);
TensorF u8_to_tensor(const ImageU8& img);

// Deterministic seeded shuffle, then largest-remainder apportionment of the
// 8:1:1 (or custom) ratio; remainders favor the largest fractional parts.
struct Split {
    std::vector<std::string> train, val, test;
};
Split split_dataset(const std::vector<std::string>& ids, std::array<int, 3> ratios, uint64_t seed);

// Manifest: CSV of (id, image path, annotation path) relative to its dir.
struct ManifestEntry {
    std::string id, image, annotation;
};
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// Generates `spec.count` samples into out_dir (images/, annotations/,
// manifest.csv + split files); returns the manifest entries.
std::vector<ManifestEntry> generate_dataset(const GenSpec& spec, const std::string& out_dir);

// Loads one sample (PNG + XML) given a manifest entry and its base dir.
DatasetSample load_sample(const std::string& base_dir, const ManifestEntry& entry);

} // namespace ddet
