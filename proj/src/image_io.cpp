#include "muv/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

namespace muv {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t to_u8(double v) {
    if (v <= 0.0) return 0;
    if (v >= 1.0) return 255;
    return static_cast<uint8_t>(v * 255.0 + 0.5);
}

}  // namespace

void png_write(const std::string& path, const Grid& rgb) {
    require(rgb.c == 1 || rgb.c == 3, ErrKind::Data, "png_write: channels must be 1 or 3, got " + std::to_string(rgb.c));
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(fp != nullptr, ErrKind::Data, "png_write: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrKind::Data, "png_write: libpng failure for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, rgb.w, rgb.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // Fixed settings so identical grids produce identical bytes.
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(rgb.w) * 3);
    for (int y = 0; y < rgb.h; ++y) {
        for (int x = 0; x < rgb.w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                row[static_cast<size_t>(x) * 3 + ch] = to_u8(rgb.at(y, x, rgb.c == 3 ? ch : 0));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Grid png_read(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    require(fp != nullptr, ErrKind::Data, "png_read: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrKind::Data, "png_read: libpng failure for " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Grid g(static_cast<int>(h), static_cast<int>(w), 3);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                g.at(static_cast<int>(y), static_cast<int>(x), ch) = row[static_cast<size_t>(x) * 3 + ch] / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return g;
}

void grid_write(const std::string& path, const Grid& g) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), ErrKind::Data, "grid_write: cannot open " + path);
    char magic[4] = {'M', 'G', '0', '1'};
    uint16_t dtype = 0;  // float32
    uint16_t c = static_cast<uint16_t>(g.c);
    uint32_t h = static_cast<uint32_t>(g.h);
    uint32_t w = static_cast<uint32_t>(g.w);
    os.write(magic, 4);
    os.write(reinterpret_cast<const char*>(&dtype), 2);
    os.write(reinterpret_cast<const char*>(&c), 2);
    os.write(reinterpret_cast<const char*>(&h), 4);
    os.write(reinterpret_cast<const char*>(&w), 4);
    std::vector<float> buf(g.size());
    for (size_t i = 0; i < g.size(); ++i) buf[i] = static_cast<float>(g.data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require(os.good(), ErrKind::Data, "grid_write: write failed for " + path);
}

Grid grid_read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), ErrKind::Data, "grid_read: cannot open " + path);
    char magic[4];
    uint16_t dtype = 0, c = 0;
    uint32_t h = 0, w = 0;
    is.read(magic, 4);
    is.read(reinterpret_cast<char*>(&dtype), 2);
    is.read(reinterpret_cast<char*>(&c), 2);
    is.read(reinterpret_cast<char*>(&h), 4);
    is.read(reinterpret_cast<char*>(&w), 4);
    require(is.good() && std::memcmp(magic, "MG01", 4) == 0, ErrKind::Data, "grid_read: bad header in " + path);
    require(dtype == 0, ErrKind::Data, "grid_read: unsupported dtype " + std::to_string(dtype));
    Grid g(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    std::vector<float> buf(g.size());
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require(is.good(), ErrKind::Data, "grid_read: truncated payload in " + path);
    for (size_t i = 0; i < g.size(); ++i) g.data[i] = buf[i];
    return g;
}

}  // namespace muv
