#pragma once

// Binary PPM (P6, 8-bit) images and PFM (Pf) depth maps.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vpnet/binary_io.hpp"
#include "vpnet/network.hpp"
#include "vpnet/tensor.hpp"

namespace vpnet {

namespace detail {

// Next whitespace-delimited header token, skipping '#' comments.
inline std::string header_token(std::istream& is, const char* what) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw FormatError(std::string(what) + ": truncated header");
  return tok;
}

inline std::size_t header_extent(std::istream& is, const char* what) {
  const std::string tok = header_token(is, what);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != tok.size() || v <= 0) throw FormatError(std::string(what) + ": bad extent '" + tok + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// [3, H, W] image in [0, 1] -> P6; values are rounded to 8 bits.
inline void write_ppm(std::ostream& os, const Tensor<float>& image) {
  require_rank("ppm", image.shape(), 3);
  if (image.dim(0) != 3) throw ShapeError("ppm: expected 3 channels, got " + to_string(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image[(c * h + y) * w + x], 0.0f, 1.0f);
        row[x * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw Error("ppm: write failed");
}

inline Tensor<float> read_ppm(std::istream& is) {
  if (detail::header_token(is, "ppm") != "P6") throw FormatError("ppm: not a binary P6 file");
  const std::size_t w = detail::header_extent(is, "ppm");
  const std::size_t h = detail::header_extent(is, "ppm");
  if (detail::header_extent(is, "ppm") != 255) throw FormatError("ppm: only 8-bit images are supported");
  std::vector<unsigned char> raw(w * h * 3);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (is.gcount() != static_cast<std::streamsize>(raw.size())) throw FormatError("ppm: truncated pixel data");
  Tensor<float> image({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) image[(c * h + y) * w + x] = static_cast<float>(raw[(y * w + x) * 3 + c]) / 255.0f;
  return image;
}

/// Rounds an image to the values an 8-bit PPM stores.
inline void quantize_8bit(Tensor<float>& image) {
  for (auto& v : image.data()) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
}

inline void write_pfm(std::ostream& os, const DepthMap& map) {
  os << "Pf\n" << map.width << ' ' << map.height << "\n-1.0\n";
  for (std::size_t y = map.height; y-- > 0;) {
    for (std::size_t x = 0; x < map.width; ++x) {
      const std::size_t i = y * map.width + x;
      io::write_f32(os, map.valid[i] ? map.depth[i] : 0.0f);
    }
  }
  if (!os) throw Error("pfm: write failed");
}

/// Pixels stored as 0 (or non-finite) are invalid.
inline DepthMap read_pfm(std::istream& is) {
  const std::string magic = detail::header_token(is, "pfm");
  if (magic != "Pf") throw FormatError("pfm: expected single-channel 'Pf' header, got '" + magic + "'");
  const std::size_t w = detail::header_extent(is, "pfm");
  const std::size_t h = detail::header_extent(is, "pfm");
  const std::string scale_tok = detail::header_token(is, "pfm");
  double scale = 0;
  std::size_t used = 0;
  try {
    scale = std::stod(scale_tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != scale_tok.size() || scale == 0 || !std::isfinite(scale)) {
    throw FormatError("pfm: bad scale line '" + scale_tok + "'");
  }
  const bool little = scale < 0;
  std::vector<float> z(w * h);
  for (std::size_t y = h; y-- > 0;) {
    for (std::size_t x = 0; x < w; ++x) {
      std::uint32_t bits = 0;
      unsigned char b[4];
      is.read(reinterpret_cast<char*>(b), 4);
      if (is.gcount() != 4) throw FormatError("pfm: truncated pixel data");
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[little ? k : 3 - k]) << (8 * k);
      z[y * w + x] = std::bit_cast<float>(bits);
    }
  }
  return DepthMap::from_values(w, h, std::move(z), std::numeric_limits<double>::infinity());
}

inline void save_ppm(const std::string& path, const Tensor<float>& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_ppm(os, image);
}

inline Tensor<float> load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  try {
    return read_ppm(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void save_pfm(const std::string& path, const DepthMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_pfm(os, map);
}

inline DepthMap load_pfm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  try {
    return read_pfm(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace vpnet
