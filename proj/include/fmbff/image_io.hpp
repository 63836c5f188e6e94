#pragma once

#include <string>
#include <string_view>

#include "fmbff/tensor.hpp"

namespace fmbff {

// 8-bit raster decoded from binary PNM (P5 gray, P6 RGB) or PNG.
struct Raster {
  Index channels = 0, height = 0, width = 0;
  std::string pixels;  // row-major, interleaved channels
};

// Throws ParseError (with byte offset) on malformed headers or short payloads.
Raster decode_pnm(std::string_view bytes);
std::string encode_pnm(const Raster& r);
// Throws FormatError when the stream is not a readable PNG.
Raster decode_png(std::string_view bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

// 3 x H x W in [0,1]; gray inputs are replicated to three channels.
Tensor<float> read_image(const std::string& path);
void write_image(const std::string& path, const Tensor<float>& image);

// 1 x H x W in {0,1}; a pixel is foreground when its 8-bit value is > 127.
Tensor<float> read_mask(const std::string& path);
void write_mask(const std::string& path, const Tensor<float>& mask);

// Little-endian single-channel PFM, rows stored bottom-up per the format.
void write_pfm(const std::string& path, const Tensor<float>& plane);

}  // namespace fmbff
