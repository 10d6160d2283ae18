#include "cnvs/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "cnvs/checkpoint.hpp"

namespace cnvs {

namespace {

void require_image(const char* what, const Tensor& image, std::int64_t channels) {
  if (image.rank() != 3 || (channels > 0 && image.dim(2) != channels)) {
    throw DimensionError(std::string(what) + ": unexpected image shape " + shape_str(image.shape()));
  }
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

void append_planes(std::vector<std::uint8_t>& out, const Tensor& image) {
  const auto h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const auto values = image.to_vector();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < h * w; ++i) {
      const auto f = static_cast<float>(values[static_cast<std::size_t>(i * c + ch)]);
      const auto* p = reinterpret_cast<const std::uint8_t*>(&f);
      out.insert(out.end(), p, p + 4);
    }
  }
}

Tensor read_planes(const std::vector<std::uint8_t>& in, std::size_t at, std::int64_t h, std::int64_t w,
                   std::int64_t c, DType dtype) {
  if (in.size() < at + static_cast<std::size_t>(h * w * c) * 4) {
    throw IoError("raw image payload truncated");
  }
  std::vector<double> values(static_cast<std::size_t>(h * w * c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < h * w; ++i) {
      float f;
      std::memcpy(&f, in.data() + at + static_cast<std::size_t>((ch * h * w + i) * 4), 4);
      values[static_cast<std::size_t>(i * c + ch)] = f;
    }
  }
  return Tensor::from({h, w, c}, values, dtype);
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  require_image("write_ppm", image, 3);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path);
  }
  out << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(image.numel()));
  for (double v : image.to_vector()) {
    bytes.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write failed for " + path);
  }
}

Tensor read_ppm(const std::string& path, DType dtype) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + path);
  }
  std::string magic;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  int width = 0, height = 0, maxval = 0;
  skip_comments();
  in >> width;
  skip_comments();
  in >> height;
  skip_comments();
  in >> maxval;
  in.get();
  if (magic != "P6" || width < 1 || height < 1 || maxval != 255 || !in) {
    throw IoError("unsupported PPM header in " + path);
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) {
    throw IoError("PPM payload truncated in " + path);
  }
  std::vector<double> values(bytes.size());
  std::transform(bytes.begin(), bytes.end(), values.begin(), [](unsigned char b) { return b / 255.0; });
  return Tensor::from({height, width, 3}, values, dtype);
}

void write_raw_f32(const std::string& path, const Tensor& image) {
  require_image("write_raw_f32", image, 0);
  std::vector<std::uint8_t> out{'P', 'M', 'R', 'F'};
  put_u32(out, static_cast<std::uint32_t>(image.dim(0)));
  put_u32(out, static_cast<std::uint32_t>(image.dim(1)));
  put_u32(out, static_cast<std::uint32_t>(image.dim(2)));
  append_planes(out, image);
  write_file_bytes(path, out);
}

Tensor read_raw_f32(const std::string& path, DType dtype) {
  const auto in = read_file_bytes(path);
  if (in.size() < 16 || std::memcmp(in.data(), "PMRF", 4) != 0) {
    throw IoError("not a PMRF raw image: " + path);
  }
  return read_planes(in, 16, get_u32(in, 4), get_u32(in, 8), get_u32(in, 12), dtype);
}

void write_point_map(const std::string& path, const Tensor& points, const Tensor& confidence) {
  require_image("write_point_map", points, 3);
  require_image("write_point_map", confidence, 1);
  if (points.dim(0) != confidence.dim(0) || points.dim(1) != confidence.dim(1)) {
    throw DimensionError("write_point_map: points " + shape_str(points.shape()) + " vs confidence " +
                         shape_str(confidence.shape()));
  }
  std::vector<std::uint8_t> out{'P', 'M', 'P', 'T'};
  put_u32(out, static_cast<std::uint32_t>(points.dim(0)));
  put_u32(out, static_cast<std::uint32_t>(points.dim(1)));
  put_u32(out, 1);
  append_planes(out, points);
  append_planes(out, confidence);
  write_file_bytes(path, out);
}

PointMapFile read_point_map(const std::string& path, DType dtype) {
  const auto in = read_file_bytes(path);
  if (in.size() < 16 || std::memcmp(in.data(), "PMPT", 4) != 0) {
    throw IoError("not a PMPT point map: " + path);
  }
  const std::int64_t h = get_u32(in, 4), w = get_u32(in, 8);
  PointMapFile pm;
  pm.points = read_planes(in, 16, h, w, 3, dtype);
  pm.confidence = read_planes(in, 16 + static_cast<std::size_t>(h * w * 3) * 4, h, w, 1, dtype);
  return pm;
}

}  // namespace cnvs
