#include "tigan/png.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tigan {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

uint32_t get_u32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  put_u32(out, uint32_t(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = uint32_t(::crc32(0, out.data() + start, uInt(out.size() - start)));
  put_u32(out, crc);
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

const uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

}  // namespace

std::vector<uint8_t> png_encode(const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3 && img.channels != 4)
    throw std::invalid_argument("png_encode: unsupported channel count");
  if (img.width <= 0 || img.height <= 0 ||
      img.pixels.size() != size_t(img.width) * img.height * img.channels)
    throw std::invalid_argument("png_encode: bad image buffer");

  const size_t row = size_t(img.width) * img.channels;
  std::vector<uint8_t> raw((row + 1) * size_t(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw[size_t(y) * (row + 1)] = 0;  // filter: None
    std::memcpy(raw.data() + size_t(y) * (row + 1) + 1, img.pixels.data() + size_t(y) * row, row);
  }

  uLongf bound = ::compressBound(uLong(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png_encode: deflate failed");
  compressed.resize(bound);

  std::vector<uint8_t> out(kSignature, kSignature + 8);
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, uint32_t(img.width));
  put_u32(ihdr, uint32_t(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : (img.channels == 3 ? 2 : 6));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", {});
  return out;
}

ImageU8 png_decode(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0)
    throw std::invalid_argument("png_decode: not a PNG");

  ImageU8 img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  bool saw_ihdr = false;
  while (pos + 12 <= bytes.size()) {
    uint32_t len = get_u32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw std::invalid_argument("png_decode: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const uint8_t* data = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::invalid_argument("png_decode: bad IHDR");
      img.width = int(get_u32(data));
      img.height = int(get_u32(data + 4));
      int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8) throw std::invalid_argument("png_decode: only 8-bit supported");
      if (interlace != 0) throw std::invalid_argument("png_decode: interlace unsupported");
      switch (color) {
        case 0: img.channels = 1; break;
        case 2: img.channels = 3; break;
        case 6: img.channels = 4; break;
        default: throw std::invalid_argument("png_decode: unsupported color type");
      }
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || img.width <= 0 || img.height <= 0)
    throw std::invalid_argument("png_decode: missing IHDR");

  const size_t bpp = size_t(img.channels);
  const size_t row = size_t(img.width) * bpp;
  std::vector<uint8_t> raw((row + 1) * size_t(img.height));
  uLongf raw_len = uLongf(raw.size());
  if (::uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("png_decode: inflate failed");

  img.pixels.assign(row * size_t(img.height), 0);
  std::vector<uint8_t> prev(row, 0);
  for (int y = 0; y < img.height; ++y) {
    const uint8_t filter = raw[size_t(y) * (row + 1)];
    const uint8_t* src = raw.data() + size_t(y) * (row + 1) + 1;
    uint8_t* dst = img.pixels.data() + size_t(y) * row;
    for (size_t x = 0; x < row; ++x) {
      const int a = x >= bpp ? dst[x - bpp] : 0;        // left
      const int b = prev[x];                            // up
      const int c = x >= bpp ? prev[x - bpp] : 0;       // up-left
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw std::invalid_argument("png_decode: bad filter byte");
      }
      dst[x] = uint8_t(v & 0xff);
    }
    std::memcpy(prev.data(), dst, row);
  }
  return img;
}

void png_write_file(const std::string& path, const ImageU8& img) {
  auto bytes = png_encode(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

ImageU8 png_read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return png_decode(bytes);
}

}  // namespace tigan
