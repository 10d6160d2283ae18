#pragma once

#include <string>

#include "cnvs/tensor.hpp"

namespace cnvs {

/// Binary PPM (P6, maxval 255). Values are clamped to [0, 1] and rounded to 8 bits.
void write_ppm(const std::string& path, const Tensor& image);
/// Returns an [H x W x 3] tensor with values k / 255.
Tensor read_ppm(const std::string& path, DType dtype = DType::f32);

/// Lossless raw planar float image: "PMRF", u32 height, u32 width, u32 channels,
/// then one little-endian f32 plane per channel.
void write_raw_f32(const std::string& path, const Tensor& image);
Tensor read_raw_f32(const std::string& path, DType dtype = DType::f32);

/// Point map file: "PMPT", u32 height, u32 width, u32 format version (1), then
/// three f32 planes of X followed by one f32 plane of confidence.
void write_point_map(const std::string& path, const Tensor& points, const Tensor& confidence);
struct PointMapFile {
  Tensor points;      // [H x W x 3]
  Tensor confidence;  // [H x W x 1]
};
PointMapFile read_point_map(const std::string& path, DType dtype = DType::f32);

}  // namespace cnvs
