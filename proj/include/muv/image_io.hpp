#pragma once

#include <string>

#include "muv/grid.hpp"

namespace muv {

// 8-bit RGB PNG. Values are clamped to [0,1] on write and mapped back to
// [0,1] on read. Grids with c==1 are written as grayscale RGB.
void png_write(const std::string& path, const Grid& rgb);
Grid png_read(const std::string& path);

// Raw multi-channel grid cache (.mgrid). 16-byte header:
//   bytes 0..3   magic "MG01"
//   bytes 4..5   dtype (u16; 0 = float32)
//   bytes 6..7   channels (u16)
//   bytes 8..11  height (u32)
//   bytes 12..15 width (u32)
// followed by h*w*c little-endian payload values, row-major interleaved.
void grid_write(const std::string& path, const Grid& g);
Grid grid_read(const std::string& path);

}  // namespace muv
