#include "fmbff/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fmbff {

namespace {

struct HeaderReader {
  std::string_view s;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < s.size()) {
      if (std::isspace(static_cast<unsigned char>(s[pos]))) {
        ++pos;
      } else if (s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }

  Index number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos;
    Index v = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      v = v * 10 + (s[pos] - '0');
      if (v > (Index{1} << 24)) throw ParseError(std::string("pnm: ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("pnm: expected ") + what, start);
    return v;
  }
};

bool is_png(std::string_view bytes) {
  return bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0;
}

Raster decode_any(std::string_view bytes) { return is_png(bytes) ? decode_png(bytes) : decode_pnm(bytes); }

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Raster decode_pnm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("pnm: expected magic P5 or P6", 0);
  }
  HeaderReader h{bytes, 2};
  Raster r;
  r.channels = bytes[1] == '6' ? 3 : 1;
  r.width = h.number("width");
  r.height = h.number("height");
  h.skip_space_and_comments();
  const std::size_t maxval_at = h.pos;
  const Index maxval = h.number("maxval");
  if (r.width < 1 || r.height < 1) throw ParseError("pnm: zero extent", maxval_at);
  if (maxval != 255) throw ParseError("pnm: maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (h.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[h.pos]))) {
    throw ParseError("pnm: expected whitespace before pixel data", h.pos);
  }
  const std::size_t data_at = h.pos + 1;
  const std::size_t need = static_cast<std::size_t>(r.channels * r.height * r.width);
  if (bytes.size() - data_at < need) {
    throw ParseError("pnm: truncated pixel data (" + std::to_string(bytes.size() - data_at) + " of " +
                         std::to_string(need) + " bytes)",
                     bytes.size());
  }
  r.pixels.assign(bytes.substr(data_at, need));
  return r;
}

std::string encode_pnm(const Raster& r) {
  std::string out = (r.channels == 3 ? "P6\n" : "P5\n") + std::to_string(r.width) + " " +
                    std::to_string(r.height) + "\n255\n";
  return out + r.pixels;
}

Raster decode_png(std::string_view bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw FormatError(std::string("png: ") + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster r;
  r.channels = gray ? 1 : 3;
  r.height = img.height;
  r.width = img.width;
  r.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("png: " + msg);
  }
  return r;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

Tensor<float> read_image(const std::string& path) {
  const Raster r = decode_any(read_file(path));
  const Index plane = r.height * r.width;
  std::vector<float> v(static_cast<std::size_t>(3 * plane));
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < plane; ++i) {
      const Index src = r.channels == 3 ? i * 3 + c : i;
      v[c * plane + i] = static_cast<std::uint8_t>(r.pixels[src]) / 255.0f;
    }
  return Tensor<float>({3, r.height, r.width}, std::move(v));
}

void write_image(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("write_image: expected 3 x H x W, got " + shape_str(image.shape()));
  }
  Raster r{3, image.dim(1), image.dim(2), {}};
  const Index plane = r.height * r.width;
  r.pixels.resize(static_cast<std::size_t>(3 * plane));
  for (Index i = 0; i < plane; ++i)
    for (Index c = 0; c < 3; ++c) r.pixels[i * 3 + c] = static_cast<char>(quantize(image[c * plane + i]));
  write_file(path, encode_pnm(r));
}

Tensor<float> read_mask(const std::string& path) {
  const Raster r = decode_any(read_file(path));
  const Index plane = r.height * r.width;
  std::vector<float> v(static_cast<std::size_t>(plane));
  for (Index i = 0; i < plane; ++i) {
    // RGB masks: any channel above threshold marks foreground.
    int m = 0;
    for (Index c = 0; c < r.channels; ++c) m = std::max(m, int(static_cast<std::uint8_t>(r.pixels[i * r.channels + c])));
    v[i] = m > 127 ? 1.0f : 0.0f;
  }
  return Tensor<float>({1, r.height, r.width}, std::move(v));
}

void write_mask(const std::string& path, const Tensor<float>& mask) {
  if (mask.rank() != 3 || mask.dim(0) != 1) {
    throw DimensionError("write_mask: expected 1 x H x W, got " + shape_str(mask.shape()));
  }
  Raster r{1, mask.dim(1), mask.dim(2), {}};
  r.pixels.resize(static_cast<std::size_t>(mask.numel()));
  for (Index i = 0; i < mask.numel(); ++i) r.pixels[i] = static_cast<char>(mask[i] >= 0.5f ? 255 : 0);
  write_file(path, encode_pnm(r));
}

void write_pfm(const std::string& path, const Tensor<float>& plane) {
  const Index h = plane.dim(plane.rank() - 2), w = plane.dim(plane.rank() - 1);
  if (plane.numel() != h * w) throw DimensionError("write_pfm: expected a single plane, got " + shape_str(plane.shape()));
  std::string out = "Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(h * w) * 4);
  for (Index y = 0; y < h; ++y) {
    // little-endian host assumed (x86-64, aarch64)
    std::memcpy(out.data() + header + static_cast<std::size_t>((h - 1 - y) * w) * 4,
                plane.data().data() + y * w, static_cast<std::size_t>(w) * 4);
  }
  write_file(path, out);
}

}  // namespace fmbff
