#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bimm {

// 8-bit interleaved image, channel-last.
struct ImageU8 {
  size_t h = 0, w = 0, c = 0;
  std::vector<uint8_t> pixels;
};

// Float pixels in [0, 1], same layout.
std::vector<float> image_to_float(const ImageU8& img);
ImageU8 image_from_float(const std::vector<float>& pixels, size_t h, size_t w, size_t c);

// Binary PPM (P6, maxval 255). Grayscale data is written as equal RGB;
// reading always yields c == 3.
ImageU8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);

}  // namespace bimm
