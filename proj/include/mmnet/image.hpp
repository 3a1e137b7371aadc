#pragma once

// RGB rasters as [3,H,W] float tensors in [0,1], binary PPM (P6) codec and bilinear resampling.

#include "mmnet/tensor.hpp"
#include "mmnet/types.hpp"

#include <filesystem>
#include <stdexcept>

namespace mmnet {

using Image = Tensor<float>;

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes a P6 file with maxval 255; samples are divided by 255.
Image read_ppm(const std::filesystem::path& path);
Image decode_ppm(std::string_view bytes);

/// Encodes with rounding to the nearest 8-bit level after clamping to [0,1].
void write_ppm(const std::filesystem::path& path, const Image& image);
std::string encode_ppm(const Image& image);

inline Index image_height(const Image& im) { return im.dim(1); }
inline Index image_width(const Image& im) { return im.dim(2); }

/// Bilinear sample of every channel at continuous pixel coordinates (pixel centers at integers),
/// clamped to the border.
void sample_bilinear(const Image& image, double x, double y, float* out);

/// Half-pixel aligned bilinear resize; identical extents return an exact copy.
Image resize_bilinear(const Image& image, Index height, Index width);

/// Scale factors (sx, sy) that map pixel coordinates of a (w, h) image into (new_w, new_h).
inline Point resize_factors(double w, double h, double new_w, double new_h) {
  return {new_w / w, new_h / h};
}

}  // namespace mmnet
