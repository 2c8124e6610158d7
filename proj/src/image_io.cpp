#include "gtsa/image_io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace gtsa {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw std::runtime_error(path + ": " + why);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open");
  f.seekg(0, std::ios::end);
  std::streamoff n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) fail(path, "short read");
  return buf;
}

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | p[3];
}

void put_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

const uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

uint8_t paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return uint8_t(a);
  if (pb <= pc) return uint8_t(b);
  return uint8_t(c);
}

ImageU8 decode_png(const std::string& path, const std::vector<uint8_t>& buf) {
  if (buf.size() < 8 + 25 || std::memcmp(buf.data(), kPngSig, 8) != 0)
    fail(path, "not a PNG");
  size_t pos = 8;
  uint32_t width = 0, height = 0;
  int bit_depth = 0, color_type = 0, interlace = 0;
  std::vector<uint8_t> idat;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= buf.size()) {
    uint32_t len = be32(&buf[pos]);
    if (pos + 12 + len > buf.size()) fail(path, "truncated chunk");
    const char* type = reinterpret_cast<const char*>(&buf[pos + 4]);
    const uint8_t* data = &buf[pos + 8];
    if (!std::memcmp(type, "IHDR", 4)) {
      if (len != 13) fail(path, "bad IHDR");
      width = be32(data);
      height = be32(data + 4);
      bit_depth = data[8];
      color_type = data[9];
      interlace = data[12];
      saw_ihdr = true;
    } else if (!std::memcmp(type, "IDAT", 4)) {
      idat.insert(idat.end(), data, data + len);
    } else if (!std::memcmp(type, "IEND", 4)) {
      saw_iend = true;
      break;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || !saw_iend) fail(path, "missing IHDR/IEND");
  if (bit_depth != 8) fail(path, "only 8-bit PNG supported");
  if (interlace != 0) fail(path, "interlaced PNG not supported");
  int channels;
  switch (color_type) {
    case 0: channels = 1; break;  // gray
    case 2: channels = 3; break;  // rgb
    case 6: channels = 4; break;  // rgba
    default: fail(path, "unsupported PNG color type " + std::to_string(color_type));
  }
  if (width == 0 || height == 0) fail(path, "zero-sized image");

  size_t stride = size_t(width) * channels;
  std::vector<uint8_t> raw(height * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  int zrc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  if (zrc != Z_OK || raw_len != raw.size()) fail(path, "corrupt PNG data stream");

  // Undo per-scanline filters in place.
  std::vector<uint8_t> pixels(height * stride);
  int bpp = channels;
  for (uint32_t y = 0; y < height; ++y) {
    uint8_t filter = raw[y * (stride + 1)];
    const uint8_t* src = &raw[y * (stride + 1) + 1];
    uint8_t* dst = &pixels[y * stride];
    const uint8_t* up = y ? &pixels[(y - 1) * stride] : nullptr;
    for (size_t x = 0; x < stride; ++x) {
      int a = x >= size_t(bpp) ? dst[x - bpp] : 0;
      int b = up ? up[x] : 0;
      int c = (up && x >= size_t(bpp)) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: fail(path, "bad PNG filter type");
      }
      dst[x] = uint8_t(v);
    }
  }

  ImageU8 im(static_cast<int>(width), static_cast<int>(height));
  for (size_t i = 0; i < size_t(width) * height; ++i) {
    const uint8_t* p = &pixels[i * channels];
    uint8_t* q = &im.rgb[i * 3];
    if (channels == 1) {
      q[0] = q[1] = q[2] = p[0];
    } else {
      q[0] = p[0]; q[1] = p[1]; q[2] = p[2];  // alpha dropped
    }
  }
  return im;
}

ImageU8 decode_ppm(const std::string& path, const std::vector<uint8_t>& buf) {
  size_t pos = 2;  // past "P6"
  auto next_token = [&]() -> long {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {  // comment to end of line
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + (buf[pos] - '0');
      ++pos;
      any = true;
    }
    if (!any) fail(path, "malformed PPM header");
    return v;
  };
  long w = next_token(), h = next_token(), maxval = next_token();
  if (w <= 0 || h <= 0) fail(path, "bad PPM dims");
  if (maxval != 255) fail(path, "only maxval 255 PPM supported");
  ++pos;  // single whitespace after maxval
  size_t need = size_t(w) * size_t(h) * 3;
  if (buf.size() - pos < need) fail(path, "truncated PPM pixel data");
  ImageU8 im(static_cast<int>(w), static_cast<int>(h));
  std::memcpy(im.rgb.data(), buf.data() + pos, need);
  return im;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
  std::vector<uint8_t> buf = read_file(path);
  if (buf.size() >= 8 && !std::memcmp(buf.data(), kPngSig, 8)) return decode_png(path, buf);
  if (buf.size() >= 2 && buf[0] == 'P' && buf[1] == '6') return decode_ppm(path, buf);
  fail(path, "unrecognized image format (PNG or P6 PPM expected)");
}

void write_png(const std::string& path, const ImageU8& im) {
  size_t stride = size_t(im.w) * 3;
  std::vector<uint8_t> raw(size_t(im.h) * (stride + 1));
  for (int y = 0; y < im.h; ++y) {
    raw[y * (stride + 1)] = 0;  // filter: none
    std::memcpy(&raw[y * (stride + 1) + 1], &im.rgb[y * stride], stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> z(bound);
  if (compress2(z.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    fail(path, "deflate failed");
  z.resize(bound);

  std::vector<uint8_t> out(kPngSig, kPngSig + 8);
  auto chunk = [&](const char* type, const std::vector<uint8_t>& body) {
    put_be32(out, static_cast<uint32_t>(body.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    uLong crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_be32(out, static_cast<uint32_t>(crc));
  };
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, static_cast<uint32_t>(im.w));
  put_be32(ihdr, static_cast<uint32_t>(im.h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // RGB
  ihdr.push_back(0);   // deflate
  ihdr.push_back(0);   // adaptive filtering
  ihdr.push_back(0);   // no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open for write");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) fail(path, "write failed");
}

void write_ppm(const std::string& path, const ImageU8& im) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open for write");
  char header[64];
  int n = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", im.w, im.h);
  f.write(header, n);
  f.write(reinterpret_cast<const char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()));
  if (!f) fail(path, "write failed");
}

}  // namespace gtsa
