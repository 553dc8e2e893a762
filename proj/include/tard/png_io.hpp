#pragma once

#include <png.h>

#include <cstring>
#include <filesystem>
#include <string>

#include "tard/error.hpp"
#include "tard/imaging.hpp"

namespace tard {

inline Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    fail(ErrorKind::kIo, "cannot read png '" + path.string() + "': " + png.message);
  png.format = PNG_FORMAT_RGB;
  if (png.width == 0 || png.height == 0) {
    png_image_free(&png);
    fail(ErrorKind::kInvalidInput, "zero-area image '" + path.string() + "'");
  }
  Image img(static_cast<int>(png.height), static_cast<int>(png.width));
  if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    fail(ErrorKind::kFormat, "cannot decode png '" + path.string() + "': " + msg);
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  require(!img.empty(), ErrorKind::kInvalidInput, "cannot write a zero-area image");
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.rgb.data(), 0, nullptr))
    fail(ErrorKind::kIo, "cannot write png '" + path.string() + "': " + png.message);
}

}  // namespace tard
