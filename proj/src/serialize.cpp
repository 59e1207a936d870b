#include "ddet/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ddet {

namespace {
constexpr char kMagic[8] = {'D', 'D', 'E', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& f, const std::string& what) {
    T v;
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw std::runtime_error("load_container: truncated file while reading " + what);
    return v;
}
} // namespace

void save_container(const std::string& path, const NamedTensorFile& file) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_container: cannot open " + path);
    f.write(kMagic, sizeof(kMagic));
    write_raw<uint32_t>(f, kVersion);
    write_raw<uint32_t>(f, static_cast<uint32_t>(file.metadata_json.size()));
    f.write(file.metadata_json.data(), static_cast<std::streamsize>(file.metadata_json.size()));
    write_raw<uint32_t>(f, static_cast<uint32_t>(file.tensors.size()));
    for (const auto& [name, tensor] : file.tensors) {
        if (name.size() > 0xffff) throw std::runtime_error("save_container: tensor name too long: " + name);
        write_raw<uint16_t>(f, static_cast<uint16_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw<uint8_t>(f, static_cast<uint8_t>(tensor.rank()));
        for (int d : tensor.shape) write_raw<uint32_t>(f, static_cast<uint32_t>(d));
        f.write(reinterpret_cast<const char*>(tensor.ptr()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("save_container: write failed for " + path);
}

NamedTensorFile load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_container: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("load_container: bad magic in " + path);
    const auto version = read_raw<uint32_t>(f, "version");
    if (version != kVersion)
        throw std::runtime_error("load_container: unsupported version " + std::to_string(version));
    NamedTensorFile out;
    const auto json_len = read_raw<uint32_t>(f, "metadata length");
    out.metadata_json.resize(json_len);
    f.read(out.metadata_json.data(), json_len);
    if (!f) throw std::runtime_error("load_container: truncated metadata in " + path);
    const auto count = read_raw<uint32_t>(f, "tensor count");
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_raw<uint16_t>(f, "tensor name length");
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) throw std::runtime_error("load_container: truncated tensor name in " + path);
        const auto rank = read_raw<uint8_t>(f, "tensor rank");
        std::vector<int> shape(rank);
        for (int d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_raw<uint32_t>(f, "tensor dim"));
        TensorF t(shape);
        f.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!f) throw std::runtime_error("load_container: truncated payload for tensor " + name);
        out.tensors.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

} // namespace ddet
