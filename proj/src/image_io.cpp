#include "bimm/image_io.hpp"

#include <cmath>
#include <fstream>

#include "bimm/errors.hpp"

namespace bimm {

std::vector<float> image_to_float(const ImageU8& img) {
  std::vector<float> out(img.pixels.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return out;
}

ImageU8 image_from_float(const std::vector<float>& pixels, size_t h, size_t w, size_t c) {
  if (pixels.size() != h * w * c) throw ContractError("image_from_float: size mismatch");
  ImageU8 img;
  img.h = h;
  img.w = w;
  img.c = c;
  img.pixels.resize(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) {
    float v = pixels[i];
    v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    img.pixels[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
  }
  return img;
}

namespace {

// Skips whitespace and '#' comments between PPM header tokens.
int next_header_int(std::istream& in, const std::string& path) {
  for (;;) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  in >> value;
  if (!in || value < 0) throw DataError("read_ppm: malformed header in " + path);
  return value;
}

}  // namespace

ImageU8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError("read_ppm: not a binary PPM: " + path);
  int w = next_header_int(in, path);
  int h = next_header_int(in, path);
  int maxval = next_header_int(in, path);
  if (maxval != 255) throw DataError("read_ppm: only maxval 255 supported: " + path);
  in.get();  // single whitespace after maxval
  ImageU8 img;
  img.h = static_cast<size_t>(h);
  img.w = static_cast<size_t>(w);
  img.c = 3;
  img.pixels.resize(img.h * img.w * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw DataError("read_ppm: truncated pixel data in " + path);
  }
  return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
  if (img.c != 1 && img.c != 3) throw ContractError("write_ppm: need 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_ppm: cannot open " + path + " for writing");
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  if (img.c == 3) {
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
  } else {
    std::vector<uint8_t> rgb(img.h * img.w * 3);
    for (size_t i = 0; i < img.h * img.w; ++i) {
      rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = img.pixels[i];
    }
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  }
  if (!out) throw DataError("write_ppm: write failed for " + path);
}

}  // namespace bimm
