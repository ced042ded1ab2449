#pragma once

// PNG (libpng simplified API) and binary PGM (P5) readers and writers.

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardiolens/image.hpp"
#include "cardiolens/imgproc.hpp"

namespace cardiolens::io {

struct ImageReadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageReadError("cannot open " + path.string());
  auto next_token = [&]() {
    std::string tok;
    while (in) {
      int c = in.peek();
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    in >> tok;
    return tok;
  };
  if (next_token() != "P5") throw ImageReadError(path.string() + ": not a binary PGM (P5)");
  std::size_t w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw ImageReadError(path.string() + ": malformed PGM header");
  }
  if (w == 0 || h == 0 || maxval <= 0 || maxval > 65535) throw ImageReadError(path.string() + ": bad PGM header");
  in.get();  // single whitespace before raster
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(w * h * bpp);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw ImageReadError(path.string() + ": truncated PGM");
  GrayImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    const double v = bpp == 1 ? raw[i] : static_cast<double>((raw[2 * i] << 8) | raw[2 * i + 1]);
    img.set(i % w, i / w, std::round(v * 255.0 / maxval));
  }
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  std::vector<unsigned char> raw(img.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(img.values()[i] * 255.0 / img.max_level()));
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

/// Reads any 8/16-bit PNG as 8-bit RGB (alpha dropped, gray replicated).
inline RgbImage read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw ImageReadError(path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  if (image.width == 0 || image.height == 0) {
    png_image_free(&image);
    throw ImageReadError(path.string() + ": empty PNG");
  }
  RgbImage rgb(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, rgb.data.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageReadError(path.string() + ": " + msg);
  }
  return rgb;
}

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> raw(img.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<std::uint8_t>(std::lround(img.values()[i] * 255.0 / img.max_level()));
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, raw.data(), 0, nullptr))
    throw std::runtime_error(path.string() + ": " + image.message);
}

/// Loads a PNG or P5 PGM (detected by magic bytes) as a grayscale image.
/// Color PNGs go through the luma conversion.
inline GrayImage read_gray(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageReadError("cannot open " + path.string());
  char magic[8] = {};
  in.read(magic, 8);
  const auto got = in.gcount();
  in.close();
  if (got >= 2 && magic[0] == 'P' && magic[1] == '5') return read_pgm(path);
  if (got == 8 && std::memcmp(magic, "\x89PNG\r\n\x1a\n", 8) == 0) return imgproc::to_grayscale(read_png(path));
  throw ImageReadError(path.string() + ": unrecognized image format");
}

inline void write_image(const std::filesystem::path& path, const GrayImage& img) {
  if (path.extension() == ".pgm")
    write_pgm(path, img);
  else
    write_png(path, img);
}

}  // namespace cardiolens::io
