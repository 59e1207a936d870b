#include "ddet/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

namespace ddet {

namespace {
struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
} // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) throw std::runtime_error("write_png: channels must be 1 or 3");
    if (img.data.size() != static_cast<size_t>(img.w) * img.h * img.channels)
        throw std::runtime_error("write_png: data size mismatch");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("write_png: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("write_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("write_png: libpng error writing " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, img.w, img.h, 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(img.h);
    for (int y = 0; y < img.h; ++y)
        rows[y] = const_cast<png_bytep>(img.data.data() + static_cast<size_t>(y) * img.w * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageU8 read_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("read_png: png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("read_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png: libpng error reading " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    // normalize to 8-bit gray or RGB
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_read_update_info(png, info);
    ImageU8 img;
    img.w = static_cast<int>(png_get_image_width(png, info));
    img.h = static_cast<int>(png_get_image_height(png, info));
    img.channels = static_cast<int>(png_get_channels(png, info));
    if (img.channels != 1 && img.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png: unsupported channel count in " + path);
    }
    img.data.resize(static_cast<size_t>(img.w) * img.h * img.channels);
    std::vector<png_bytep> rows(img.h);
    for (int y = 0; y < img.h; ++y) rows[y] = img.data.data() + static_cast<size_t>(y) * img.w * img.channels;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

} // namespace ddet
