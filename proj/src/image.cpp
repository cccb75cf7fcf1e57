// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>

#include <jpeglib.h>
#include <png.h>

namespace mcbm {

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read image " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image decode_jpeg(const std::string& bytes, const std::string& origin) {
  jpeg_decompress_struct cinfo{};
  JpegErrorMgr err{};
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  Image img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ValidationError("cannot decode JPEG " + origin + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.rgb.data() + static_cast<size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

// 3x5 bitmap digits, one row per entry, bit 2 = leftmost column.
constexpr std::array<std::array<uint8_t, 5>, 10> kDigits = {{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
}};

}  // namespace

Image decode_png(const std::string& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ValidationError(std::string("cannot decode PNG: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  Image img(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ValidationError(std::string("cannot decode PNG: ") + image.message);
  }
  return img;
}

std::string encode_png(const Image& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.rgb.data(), 0, nullptr)) {
    throw ValidationError(std::string("PNG encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.rgb.data(), 0, nullptr)) {
    throw ValidationError(std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

Image read_image(const fs::path& path) {
  const std::string bytes = slurp(path);
  try {
    if (bytes.size() >= 8 && bytes.compare(0, 8, "\x89PNG\r\n\x1a\n", 8) == 0) {
      return decode_png(bytes);
    }
    if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
        static_cast<unsigned char>(bytes[1]) == 0xD8) {
      return decode_jpeg(bytes, path.string());
    }
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  throw ValidationError("unsupported image format (PNG or JPEG expected): " + path.string());
}

Image letterbox(const Image& src, int cell) {
  if (cell < 1) throw ContractError("letterbox: cell size must be positive");
  Image out(cell, cell);
  if (src.width <= 0 || src.height <= 0) return out;
  const double scale = std::min(static_cast<double>(cell) / src.width,
                                static_cast<double>(cell) / src.height);
  const int w = std::max(1, static_cast<int>(std::lround(src.width * scale)));
  const int h = std::max(1, static_cast<int>(std::lround(src.height * scale)));
  const int ox = (cell - w) / 2;
  const int oy = (cell - h) / 2;
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) / scale));
    for (int x = 0; x < w; ++x) {
      const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) / scale));
      std::copy_n(src.px(sx, sy), 3, out.px(ox + x, oy + y));
    }
  }
  return out;
}

void draw_index(Image& img, int x0, int y0, int number, int scale) {
  const std::string text = std::to_string(number);
  const int glyph_w = 3 * scale;
  const int pad = scale;
  const int box_w = static_cast<int>(text.size()) * (glyph_w + scale) + pad;
  const int box_h = 5 * scale + 2 * pad;
  for (int y = y0; y < std::min(img.height, y0 + box_h); ++y) {
    for (int x = x0; x < std::min(img.width, x0 + box_w); ++x) std::fill_n(img.px(x, y), 3, 0);
  }
  int cx = x0 + pad;
  for (char ch : text) {
    const auto& glyph = kDigits[static_cast<size_t>(ch - '0')];
    for (int gy = 0; gy < 5; ++gy) {
      for (int gx = 0; gx < 3; ++gx) {
        if (!(glyph[static_cast<size_t>(gy)] & (4 >> gx))) continue;
        for (int sy = 0; sy < scale; ++sy) {
          for (int sx = 0; sx < scale; ++sx) {
            const int px = cx + gx * scale + sx;
            const int py = y0 + pad + gy * scale + sy;
            if (px < img.width && py < img.height) std::fill_n(img.px(px, py), 3, 255);
          }
        }
      }
    }
    cx += glyph_w + scale;
  }
}

Grid compose_grid(std::span<const fs::path> image_paths, std::span<const int64_t> sample_ids,
                  int cell_size) {
  if (image_paths.size() != static_cast<size_t>(kGridCells) || sample_ids.size() != image_paths.size()) {
    throw ContractError("compose_grid needs exactly 25 images with sample ids");
  }
  if (cell_size < 8) throw ContractError("compose_grid: cell size must be at least 8");
  Image canvas(cell_size * kGridSide, cell_size * kGridSide);
  const int scale = std::max(1, cell_size / 64);
  Grid grid;
  for (int i = 0; i < kGridCells; ++i) {
    const int row = i / kGridSide;
    const int col = i % kGridSide;
    const Image cell = letterbox(read_image(image_paths[static_cast<size_t>(i)]), cell_size);
    for (int y = 0; y < cell_size; ++y) {
      std::copy_n(cell.px(0, y), static_cast<size_t>(cell_size) * 3,
                  canvas.px(col * cell_size, row * cell_size + y));
    }
    draw_index(canvas, col * cell_size, row * cell_size, i + 1, scale);
    grid.positions.push_back({row, col, sample_ids[static_cast<size_t>(i)]});
  }
  grid.png = encode_png(canvas);
  return grid;
}

Image render_saliency(const Tensor& saliency, int cell) {
  if (saliency.rank() != 2) throw ContractError("render_saliency expects an H x W map");
  const int h = static_cast<int>(saliency.dim(0));
  const int w = static_cast<int>(saliency.dim(1));
  Image small(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float v = std::clamp(saliency[static_cast<int64_t>(y) * w + x], 0.0f, 1.0f);
      std::fill_n(small.px(x, y), 3, static_cast<uint8_t>(std::lround(v * 255.0f)));
    }
  }
  return letterbox(small, cell);
}

}  // namespace mcbm
