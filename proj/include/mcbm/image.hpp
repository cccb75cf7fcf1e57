// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mcbm/tensor.hpp"

namespace mcbm {

/// 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 0) {}

  uint8_t* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
  const uint8_t* px(int x, int y) const {
    return rgb.data() + (static_cast<size_t>(y) * width + x) * 3;
  }
};

/// PNG or JPEG, detected from the file signature.
Image read_image(const std::filesystem::path& path);

std::string encode_png(const Image& img);
Image decode_png(const std::string& bytes);

/// Aspect-preserving resize into a cell x cell square, padded with black.
Image letterbox(const Image& src, int cell);

/// Burns a small white-on-black number into the top-left corner at (x, y).
void draw_index(Image& img, int x, int y, int number, int scale = 1);

struct GridCell {
  int row = 0;
  int col = 0;
  int64_t sample = 0;
};

struct Grid {
  std::string png;
  std::vector<GridCell> positions;  // row-major, index i shown as label i + 1
};

inline constexpr int kGridSide = 5;
inline constexpr int kGridCells = kGridSide * kGridSide;

/// Tiles exactly 25 images row-major into a 5x5 grid of letterboxed cells,
/// each labelled "1".."25". Throws ValidationError naming an unreadable path.
Grid compose_grid(std::span<const std::filesystem::path> image_paths,
                  std::span<const int64_t> sample_ids, int cell_size);

/// Grayscale rendering of a saliency map in [0, 1], upscaled to cell x cell.
Image render_saliency(const Tensor& saliency, int cell);

}  // namespace mcbm
