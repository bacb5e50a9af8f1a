#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "strata/common.hpp"

namespace strata {

//! Interleaved floating-point image; color values live in [0,1].
struct Image {
  int w = 0, h = 0, c = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w_, int h_, int c_, double fill = 0.0)
      : w(w_), h(h_), c(c_), data(static_cast<size_t>(w_) * h_ * c_, fill) {}

  double& at(int x, int y, int ch = 0) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
  double at(int x, int y, int ch = 0) const {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  size_t size() const { return data.size(); }
};

//! Binary mask; entries are 0 or 1.
struct Mask {
  int w = 0, h = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int w_, int h_, uint8_t fill = 0) : w(w_), h(h_), v(static_cast<size_t>(w_) * h_, fill) {}

  uint8_t& at(int x, int y) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int x, int y) const { return v[static_cast<size_t>(y) * w + x]; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t b : v) n += (b != 0);
    return n;
  }
};

//! Intersection-over-union of two masks; defined as 1 when both are empty.
inline double mask_iou(const Mask& a, const Mask& b) {
  if (a.w != b.w || a.h != b.h) throw DataError("mask_iou: size mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    bool x = a.v[i] != 0, y = b.v[i] != 0;
    inter += (x && y);
    uni += (x || y);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline Mask mask_dilate(const Mask& m, int radius) {
  if (radius <= 0) return m;
  Mask out(m.w, m.h);
  int r2 = radius * radius;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      uint8_t hit = 0;
      for (int dy = -radius; dy <= radius && !hit; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dx * dx + dy * dy > r2) continue;
          int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= m.w || yy >= m.h) continue;
          if (m.at(xx, yy)) {
            hit = 1;
            break;
          }
        }
      out.at(x, y) = hit;
    }
  return out;
}

inline Mask mask_erode(const Mask& m, int radius) {
  if (radius <= 0) return m;
  Mask out(m.w, m.h);
  int r2 = radius * radius;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      uint8_t all = 1;
      for (int dy = -radius; dy <= radius && all; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dx * dx + dy * dy > r2) continue;
          int xx = x + dx, yy = y + dy;
          bool in = xx >= 0 && yy >= 0 && xx < m.w && yy < m.h && m.at(xx, yy);
          if (!in) {
            all = 0;
            break;
          }
        }
      out.at(x, y) = all;
    }
  return out;
}

// ---------------------------------------------------------------------------
// PNG (8-bit gray / RGB / RGBA, no interlace), written with filter 0 rows and
// read with full filter support so externally produced masks load too.
// ---------------------------------------------------------------------------

namespace pngio {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& payload) {
  put_u32(out, static_cast<uint32_t>(payload.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32(out, crc);
}

inline uint32_t get_u32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

inline int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace pngio

inline void write_png(const std::string& path, const Image& img) {
  if (img.c != 1 && img.c != 3) throw DataError("write_png: channels must be 1 or 3");
  const int bpp = img.c;
  std::vector<uint8_t> raw(static_cast<size_t>(img.h) * (1 + static_cast<size_t>(img.w) * bpp));
  size_t k = 0;
  for (int y = 0; y < img.h; ++y) {
    raw[k++] = 0;  // filter: none
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < bpp; ++ch) {
        double v = img.at(x, y, ch);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        raw[k++] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw DataError("write_png: deflate failed");
  compressed.resize(bound);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  std::vector<uint8_t> ihdr;
  pngio::put_u32(ihdr, static_cast<uint32_t>(img.w));
  pngio::put_u32(ihdr, static_cast<uint32_t>(img.h));
  ihdr.push_back(8);                                      // bit depth
  ihdr.push_back(img.c == 1 ? 0 : 2);                     // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  pngio::put_chunk(out, "IHDR", ihdr);
  pngio::put_chunk(out, "IDAT", compressed);
  pngio::put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("write_png: write failed for " + path);
}

inline Image read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_png: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw DataError("read_png: not a PNG file: " + path);

  size_t pos = 8;
  uint32_t w = 0, h = 0;
  int channels = 0;
  std::vector<uint8_t> idat;
  bool done = false;
  while (pos + 8 <= bytes.size() && !done) {
    uint32_t len = pngio::get_u32(&bytes[pos]);
    if (pos + 12 + len > bytes.size()) throw DataError("read_png: truncated chunk in " + path);
    std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
    const uint8_t* payload = &bytes[pos + 8];
    if (type == "IHDR") {
      w = pngio::get_u32(payload);
      h = pngio::get_u32(payload + 4);
      int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8) throw DataError("read_png: only 8-bit supported: " + path);
      if (interlace != 0) throw DataError("read_png: interlaced PNGs unsupported: " + path);
      if (color == 0) channels = 1;
      else if (color == 2) channels = 3;
      else if (color == 6) channels = 4;
      else throw DataError("read_png: unsupported color type: " + path);
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      done = true;
    }
    pos += 12 + len;
  }
  if (w == 0 || h == 0 || channels == 0 || idat.empty())
    throw DataError("read_png: missing IHDR/IDAT in " + path);

  size_t stride = static_cast<size_t>(w) * channels;
  std::vector<uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw DataError("read_png: inflate failed for " + path);

  // Undo per-row filters in place.
  std::vector<uint8_t> pix(static_cast<size_t>(h) * stride);
  for (uint32_t y = 0; y < h; ++y) {
    uint8_t filter = raw[y * (stride + 1)];
    const uint8_t* src = &raw[y * (stride + 1) + 1];
    uint8_t* dst = &pix[y * stride];
    const uint8_t* up = y > 0 ? &pix[(y - 1) * stride] : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= static_cast<size_t>(channels) ? dst[i - channels] : 0;
      int b = up ? up[i] : 0;
      int c = (up && i >= static_cast<size_t>(channels)) ? up[i - channels] : 0;
      int x = src[i];
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: x += pngio::paeth(a, b, c); break;
        default: throw DataError("read_png: bad filter byte in " + path);
      }
      dst[i] = static_cast<uint8_t>(x & 0xFF);
    }
  }

  int out_c = channels == 4 ? 3 : channels;  // alpha dropped on load
  Image img(static_cast<int>(w), static_cast<int>(h), out_c);
  for (uint32_t y = 0; y < h; ++y)
    for (uint32_t x = 0; x < w; ++x)
      for (int ch = 0; ch < out_c; ++ch)
        img.at(static_cast<int>(x), static_cast<int>(y), ch) =
            pix[y * stride + x * channels + ch] / 255.0;
  return img;
}

inline void write_mask_png(const std::string& path, const Mask& m) {
  Image img(m.w, m.h, 1);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) img.at(x, y) = m.at(x, y) ? 1.0 : 0.0;
  write_png(path, img);
}

inline Mask read_mask_png(const std::string& path) {
  Image img = read_png(path);
  Mask m(img.w, img.h);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double v = 0.0;
      for (int ch = 0; ch < img.c; ++ch) v += img.at(x, y, ch);
      m.at(x, y) = v / img.c >= 0.5 ? 1 : 0;
    }
  return m;
}

// ---------------------------------------------------------------------------
// PFM depth maps (single channel, little-endian, bottom-to-top rows).
// Infinite depth is stored as the sentinel 1e30 and restored on load.
// ---------------------------------------------------------------------------

inline constexpr double kDepthInfSentinel = 1e30;

inline void write_pfm(const std::string& path, const Image& img) {
  if (img.c != 1) throw DataError("write_pfm: single channel only");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_pfm: cannot open " + path);
  f << "Pf\n" << img.w << " " << img.h << "\n-1.0\n";
  for (int y = img.h - 1; y >= 0; --y)
    for (int x = 0; x < img.w; ++x) {
      double d = img.at(x, y);
      float v = std::isfinite(d) ? static_cast<float>(d) : static_cast<float>(kDepthInfSentinel);
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
  if (!f) throw DataError("write_pfm: write failed for " + path);
}

inline Image read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_pfm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  f >> magic >> w >> h >> scale;
  if (magic != "Pf" || w <= 0 || h <= 0) throw DataError("read_pfm: bad header in " + path);
  f.get();  // single whitespace after header
  Image img(w, h, 1);
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x) {
      float v = 0.0f;
      f.read(reinterpret_cast<char*>(&v), 4);
      double d = static_cast<double>(v);
      img.at(x, y) = d >= 1e29 ? kInf : d;
    }
  if (!f) throw DataError("read_pfm: truncated file " + path);
  return img;
}

}  // namespace strata
