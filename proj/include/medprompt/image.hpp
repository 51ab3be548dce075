#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace medprompt {

// Interleaved 8-bit RGB raster.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* at(int x, int y) const { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
  void fill_rect(int x1, int y1, int x2, int y2, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

// 2-D integer label raster (rows = height), used for binary and instance masks.
using LabelImage = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Binary PPM (P6, maxval 255) and ASCII PPM (P3).
RgbImage read_ppm(const std::filesystem::path& path);
RgbImage decode_ppm(const std::string& bytes);
std::string encode_ppm(const RgbImage& image);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

// PGM (P5 8/16-bit or P2) label images.
LabelImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelImage& labels);

}  // namespace medprompt
