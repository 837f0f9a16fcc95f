#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tigan {

// Interleaved 8-bit image buffer (row-major, `channels` = 1, 3 or 4).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t& at(int y, int x, int c) {
    return pixels[size_t((y * width + x) * channels + c)];
  }
  uint8_t at(int y, int x, int c) const {
    return pixels[size_t((y * width + x) * channels + c)];
  }
};

// Minimal PNG codec (8-bit gray/RGB/RGBA, no interlace). Writing always
// emits filter-0 scanlines at a fixed zlib level so output bytes are
// reproducible; reading handles all five scanline filters.
std::vector<uint8_t> png_encode(const ImageU8& img);
ImageU8 png_decode(const std::vector<uint8_t>& bytes);

void png_write_file(const std::string& path, const ImageU8& img);
ImageU8 png_read_file(const std::string& path);

}  // namespace tigan
