#include "narf/image_io.hpp"

#include "narf/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

namespace narf {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void png_warn(png_structp, png_const_charp) {}

}  // namespace

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Image8 image_from_tensor(const Tensor& t, int width, int height) {
  if (t.rows() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) ||
      (t.cols() != 1 && t.cols() != 3)) {
    throw ShapeError("image_from_tensor: " + t.shape_string() + " is not a " + std::to_string(width) + "x" +
                     std::to_string(height) + " gray or RGB image");
  }
  Image8 img{width, height, static_cast<int>(t.cols()), {}};
  img.data.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) img.data[i] = to_byte(t[i]);
  return img;
}

Tensor tensor_from_image(const Image8& img) {
  Tensor t(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height),
           static_cast<std::size_t>(img.channels));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = img.data[i] / 255.0;
  return t;
}

Tensor quantize(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.values()) v = to_byte(v) / 255.0;
  return out;
}

// libpng reports errors by longjmp; the setjmp frames below hold no objects
// with destructors, so the jump only skips plain C state.
namespace {

bool write_rows(std::FILE* file, const Image8& img) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.channels);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.data.data() + stride * static_cast<std::size_t>(y)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

// Returns 0 on success, 1 on a libpng error, 2 on an unsupported format.
int read_rows(std::FILE* file, Image8& img) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  if (png == nullptr) return 1;
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return 1;
  }
  png_init_io(png, file);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) != 8 || (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_GRAY)) {
    png_destroy_read_struct(&png, &info, nullptr);
    return 2;
  }
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t stride = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.channels);
  img.data.resize(stride * static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.data.data() + stride * static_cast<std::size_t>(y), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return 0;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("write_png: unsupported channel count");
  if (img.data.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
    throw Error("write_png: pixel buffer size does not match the image shape");
  }
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw Error("write_png: cannot open " + path.string());
  if (!write_rows(file.get(), img)) throw Error("write_png: libpng failed writing " + path.string());
}

Image8 read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw Error("read_png: cannot open " + path.string());
  Image8 img;
  const int rc = read_rows(file.get(), img);
  if (rc == 1) throw Error("read_png: libpng failed reading " + path.string());
  if (rc == 2) throw Error("read_png: " + path.string() + " is not an 8-bit RGB or gray PNG");
  return img;
}

}  // namespace narf
