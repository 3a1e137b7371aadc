#include "mmnet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mmnet {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::string_view bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) throw ImageError("ppm: truncated header");
  return std::string(bytes.substr(start, pos - start));
}

long header_number(std::string_view bytes, std::size_t& pos, const char* what) {
  const std::string tok = header_token(bytes, pos);
  if (!std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw ImageError(std::string("ppm: malformed ") + what + " '" + tok + "'");
  }
  return std::stol(tok);
}

}  // namespace

Image decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  if (header_token(bytes, pos) != "P6") throw ImageError("ppm: only binary P6 files are supported");
  const long w = header_number(bytes, pos, "width");
  const long h = header_number(bytes, pos, "height");
  const long maxval = header_number(bytes, pos, "maxval");
  if (w <= 0 || h <= 0) throw ImageError("ppm: non-positive extents");
  if (maxval != 255) throw ImageError("ppm: maxval must be 255, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ImageError("ppm: missing separator before pixel data");
  }
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - pos < need) {
    throw ImageError("ppm: truncated payload (" + std::to_string(bytes.size() - pos) + " of " +
                     std::to_string(need) + " bytes)");
  }
  Image out(Shape{3, h, w});
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  const Index plane = static_cast<Index>(h) * w;
  for (Index i = 0; i < plane; ++i)
    for (Index c = 0; c < 3; ++c) out[c * plane + i] = static_cast<float>(px[i * 3 + c]) / 255.0f;
  return out;
}

Image read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

std::string encode_ppm(const Image& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("ppm: expected a [3,H,W] image");
  const Index h = image.dim(1), w = image.dim(2), plane = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(plane) * 3);
  for (Index i = 0; i < plane; ++i)
    for (Index c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * plane + i], 0.0f, 1.0f);
      out[header + static_cast<std::size_t>(i * 3 + c)] =
          static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  const std::string bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("write failed for " + path.string());
}

void sample_bilinear(const Image& image, double x, double y, float* out) {
  const Index h = image.dim(1), w = image.dim(2);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const Index x0 = std::min<Index>(static_cast<Index>(x), w - 1);
  const Index y0 = std::min<Index>(static_cast<Index>(y), h - 1);
  const Index x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double ax = x - static_cast<double>(x0), ay = y - static_cast<double>(y0);
  for (Index c = 0; c < 3; ++c) {
    const float* p = image.data() + c * h * w;
    const double top = (1 - ax) * p[y0 * w + x0] + ax * p[y0 * w + x1];
    const double bottom = (1 - ax) * p[y1 * w + x0] + ax * p[y1 * w + x1];
    out[c] = static_cast<float>((1 - ay) * top + ay * bottom);
  }
}

Image resize_bilinear(const Image& image, Index height, Index width) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("resize: expected a [3,H,W] image");
  if (height <= 0 || width <= 0) throw ShapeError("resize: non-positive target extents");
  const Index h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image;
  Image out(Shape{3, height, width});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  float px[3];
  for (Index i = 0; i < height; ++i)
    for (Index j = 0; j < width; ++j) {
      sample_bilinear(image, (static_cast<double>(j) + 0.5) * sx - 0.5,
                      (static_cast<double>(i) + 0.5) * sy - 0.5, px);
      for (Index c = 0; c < 3; ++c) out[(c * height + i) * width + j] = px[c];
    }
  return out;
}

}  // namespace mmnet
