#pragma once

#include <string>

#include "gtsa/image.hpp"

namespace gtsa {

/// Reads an 8-bit PNG (gray, RGB, or RGBA; no interlacing) or binary PPM
/// (P6, maxval 255). The format is picked by file signature, not extension.
/// Throws std::runtime_error naming the file on any decode problem.
ImageU8 read_image(const std::string& path);

/// 8-bit RGB PNG, unfiltered scanlines, zlib-compressed.
void write_png(const std::string& path, const ImageU8& im);

/// Binary PPM (P6).
void write_ppm(const std::string& path, const ImageU8& im);

}  // namespace gtsa
