#pragma once

// 8-bit PNG input/output via libpng.

#include "narf/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace narf {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> data;  // row-major, interleaved
};

std::uint8_t to_byte(double v);  // clamps to [0, 1], rounds to nearest
// t is [H*W x C] with values in [0, 1].
Image8 image_from_tensor(const Tensor& t, int width, int height);
Tensor tensor_from_image(const Image8& img);
// Round-trips values through 8-bit quantization.
Tensor quantize(const Tensor& t);

void write_png(const std::filesystem::path& path, const Image8& img);
Image8 read_png(const std::filesystem::path& path);

}  // namespace narf
