#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "pseudoseg/error.hpp"
#include "pseudoseg/transform.hpp"

namespace pseudoseg {

// 8-bit raster, row-major, channels interleaved.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, std::uint8_t fill = 0) : width(w), height(h), channels(c) {
    if (w <= 0 || h <= 0) throw ContractError("image dimensions must be positive");
    if (c != 1 && c != 3) throw ContractError("image must have 1 or 3 channels");
    data.assign(static_cast<std::size_t>(w) * h * c, fill);
  }
  ImageBuffer(int w, int h, int c, std::vector<std::uint8_t> samples) : ImageBuffer(w, h, c) {
    if (samples.size() != data.size()) throw ContractError("sample count does not match dimensions");
    data = std::move(samples);
  }

  std::uint8_t& at(int x, int y, int ch = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
  std::uint8_t at(int x, int y, int ch = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

// Half away from zero, then clamped to the 8-bit range.
inline std::uint8_t to_u8(double v) {
  const double r = std::round(v);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

struct ClaheTiles {
  int x = 8;
  int y = 8;
};

struct EnhanceParams {
  double clahe_clip_limit = 2.0;
  ClaheTiles clahe_tiles{8, 8};
  int median_kernel = 5;
  double unsharp_sigma = 2.0;
  double unsharp_amount = 1.0;

  void validate() const {
    if (!(clahe_clip_limit > 0.0)) throw ContractError("clahe clip limit must be positive");
    if (clahe_tiles.x <= 0 || clahe_tiles.y <= 0) throw ContractError("clahe tiles must be positive");
    if (median_kernel < 3 || median_kernel % 2 == 0) {
      throw ContractError("median kernel must be odd and >= 3");
    }
    if (!(unsharp_sigma > 0.0)) throw ContractError("unsharp sigma must be positive");
    if (!(unsharp_amount >= 0.0)) throw ContractError("unsharp amount must be nonnegative");
  }
};

// ---------------------------------------------------------------------------
// CLAHE

using ToneMap = std::array<std::uint8_t, 256>;

struct ClaheLayout {
  int tile_w = 0, tile_h = 0;
  int tiles_x = 0, tiles_y = 0;
};

inline ClaheLayout clahe_layout(const ImageBuffer& img, ClaheTiles tiles) {
  if (tiles.x <= 0 || tiles.y <= 0) throw ContractError("clahe: tile counts must be positive");
  return {(img.width + tiles.x - 1) / tiles.x, (img.height + tiles.y - 1) / tiles.y, tiles.x,
          tiles.y};
}

// One tone map per tile, row-major over tiles. The image is padded on the
// right and bottom by edge replication so every tile is full. A clip limit
// of +infinity disables clipping.
inline std::vector<ToneMap> clahe_tile_maps(const ImageBuffer& img, double clip_limit,
                                            ClaheTiles tiles) {
  if (img.channels != 1) throw ContractError("clahe: expects a single-channel image");
  if (!(clip_limit > 0.0)) throw ContractError("clahe: clip limit must be positive");
  const ClaheLayout L = clahe_layout(img, tiles);
  const std::int64_t tile_pixels = static_cast<std::int64_t>(L.tile_w) * L.tile_h;
  std::int64_t limit = std::numeric_limits<std::int64_t>::max();
  if (std::isfinite(clip_limit)) {
    limit = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::floor(clip_limit * static_cast<double>(tile_pixels) / 256.0)));
  }

  std::vector<ToneMap> maps(static_cast<std::size_t>(L.tiles_x) * L.tiles_y);
  for (int ty = 0; ty < L.tiles_y; ++ty) {
    for (int tx = 0; tx < L.tiles_x; ++tx) {
      std::array<std::int64_t, 256> hist{};
      for (int y = ty * L.tile_h; y < (ty + 1) * L.tile_h; ++y) {
        const int sy = std::min(y, img.height - 1);
        for (int x = tx * L.tile_w; x < (tx + 1) * L.tile_w; ++x) {
          ++hist[img.at(std::min(x, img.width - 1), sy)];
        }
      }
      std::int64_t excess = 0;
      for (auto& h : hist) {
        if (h > limit) {
          excess += h - limit;
          h = limit;
        }
      }
      const std::int64_t share = excess / 256;
      const std::int64_t remainder = excess % 256;
      for (int b = 0; b < 256; ++b) hist[b] += share + (b < remainder ? 1 : 0);

      ToneMap& m = maps[static_cast<std::size_t>(ty) * L.tiles_x + tx];
      std::int64_t cum = 0;
      for (int v = 0; v < 256; ++v) {
        cum += hist[v];
        m[v] = to_u8(255.0 * static_cast<double>(cum) / static_cast<double>(tile_pixels));
      }
    }
  }
  return maps;
}

// Contrast-limited adaptive histogram equalization. Each output sample is
// the bilinear blend of the four nearest tile-centre tone maps, with tile
// indices clamped at the border.
inline ImageBuffer clahe(const ImageBuffer& img, double clip_limit, ClaheTiles tiles) {
  const auto maps = clahe_tile_maps(img, clip_limit, tiles);
  const ClaheLayout L = clahe_layout(img, tiles);
  ImageBuffer out(img.width, img.height, 1);

  auto neighbours = [](int pos, int tile, int count, int& lo, int& hi, double& w) {
    const double f = (pos + 0.5) / tile - 0.5;
    const double fl = std::floor(f);
    w = f - fl;
    lo = std::clamp(static_cast<int>(fl), 0, count - 1);
    hi = std::clamp(static_cast<int>(fl) + 1, 0, count - 1);
  };

  for (int y = 0; y < img.height; ++y) {
    int y0, y1;
    double wy;
    neighbours(y, L.tile_h, L.tiles_y, y0, y1, wy);
    for (int x = 0; x < img.width; ++x) {
      int x0, x1;
      double wx;
      neighbours(x, L.tile_w, L.tiles_x, x0, x1, wx);
      const std::uint8_t v = img.at(x, y);
      const auto& m00 = maps[static_cast<std::size_t>(y0) * L.tiles_x + x0];
      const auto& m01 = maps[static_cast<std::size_t>(y0) * L.tiles_x + x1];
      const auto& m10 = maps[static_cast<std::size_t>(y1) * L.tiles_x + x0];
      const auto& m11 = maps[static_cast<std::size_t>(y1) * L.tiles_x + x1];
      const double top = (1.0 - wx) * m00[v] + wx * m01[v];
      const double bottom = (1.0 - wx) * m10[v] + wx * m11[v];
      out.at(x, y) = to_u8((1.0 - wy) * top + wy * bottom);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Median blur (sliding histogram along each row)

inline ImageBuffer median_blur(const ImageBuffer& img, int kernel) {
  if (kernel < 3 || kernel % 2 == 0) throw ContractError("median_blur: kernel must be odd and >= 3");
  const int r = kernel / 2;
  const int rank = kernel * kernel / 2;
  ImageBuffer out(img.width, img.height, img.channels);
  auto cx = [&](int x) { return std::clamp(x, 0, img.width - 1); };
  auto cy = [&](int y) { return std::clamp(y, 0, img.height - 1); };

  for (int ch = 0; ch < img.channels; ++ch) {
    for (int y = 0; y < img.height; ++y) {
      std::array<int, 256> hist{};
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) ++hist[img.at(cx(dx), cy(y + dy), ch)];
      }
      for (int x = 0;; ++x) {
        int seen = 0;
        int v = 0;
        for (; v < 256; ++v) {
          seen += hist[v];
          if (seen > rank) break;
        }
        out.at(x, y, ch) = static_cast<std::uint8_t>(v);
        if (x + 1 == img.width) break;
        for (int dy = -r; dy <= r; ++dy) {
          --hist[img.at(cx(x - r), cy(y + dy), ch)];
          ++hist[img.at(cx(x + r + 1), cy(y + dy), ch)];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian blur and unsharp mask

// Normalized 1-D weights for offsets -radius..radius, radius = ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ContractError("gaussian: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    w[i + radius] = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
    sum += w[i + radius];
  }
  for (auto& v : w) v /= sum;
  return w;
}

inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int W = img.width, H = img.height, C = img.channels;
  std::vector<double> rows(img.data.size());
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int ch = 0; ch < C; ++ch) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * img.at(std::clamp(x + i, 0, W - 1), y, ch);
        }
        rows[(static_cast<std::size_t>(y) * W + x) * C + ch] = acc;
      }
    }
  }
  ImageBuffer out(W, H, C);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int ch = 0; ch < C; ++ch) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * rows[(static_cast<std::size_t>(std::clamp(y + i, 0, H - 1)) * W + x) * C + ch];
        }
        out.at(x, y, ch) = to_u8(acc);
      }
    }
  }
  return out;
}

inline ImageBuffer unsharp_mask(const ImageBuffer& img, double sigma, double amount) {
  if (!(amount >= 0.0)) throw ContractError("unsharp_mask: amount must be nonnegative");
  const ImageBuffer blurred = gaussian_blur(img, sigma);
  ImageBuffer out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double o = img.data[i];
    out.data[i] = to_u8(o + amount * (o - blurred.data[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// HSV jitter

struct Hsv {
  double h = 0.0;  // [0, 360)
  double s = 0.0;  // [0, 1]
  double v = 0.0;  // [0, 1]
};

inline Hsv rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  Hsv out;
  out.v = mx;
  out.s = mx > 0.0 ? delta / mx : 0.0;
  if (delta > 0.0) {
    if (mx == r) {
      out.h = 60.0 * std::fmod((g - b) / delta, 6.0);
    } else if (mx == g) {
      out.h = 60.0 * ((b - r) / delta + 2.0);
    } else {
      out.h = 60.0 * ((r - g) / delta + 4.0);
    }
    if (out.h < 0.0) out.h += 360.0;
    if (out.h >= 360.0) out.h -= 360.0;
  }
  return out;
}

inline std::array<double, 3> hsv_to_rgb(const Hsv& in) {
  const double c = in.v * in.s;
  const double hp = in.h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  const double m = in.v - c;
  double r = 0, g = 0, b = 0;
  if (hp < 1.0) {
    r = c, g = x;
  } else if (hp < 2.0) {
    r = x, g = c;
  } else if (hp < 3.0) {
    g = c, b = x;
  } else if (hp < 4.0) {
    g = x, b = c;
  } else if (hp < 5.0) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  return {r + m, g + m, b + m};
}

struct JitterParams {
  double hue_gain = 0.0;
  double sat_gain = 0.0;
  double val_gain = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    for (double g : {hue_gain, sat_gain, val_gain}) {
      if (!(g >= 0.0 && g <= 1.0)) throw ContractError("jitter gains must lie in [0,1]");
    }
  }
};

// Multiplicative/additive factors actually applied to one image.
struct HsvFactors {
  double hue_shift = 0.0;  // fraction of a full turn
  double sat_scale = 1.0;
  double val_scale = 1.0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Deterministic generator for one (seed, stream) pair, e.g. (global seed,
// image id). Independent of the order in which streams are visited.
class StreamRng {
 public:
  StreamRng(std::uint64_t seed, std::uint64_t stream)
      : engine_(splitmix64(seed ^ splitmix64(stream))) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::mt19937_64 engine_;
};

inline HsvFactors draw_hsv_factors(const JitterParams& p, StreamRng& rng) {
  p.validate();
  HsvFactors f;
  f.hue_shift = rng.uniform(-p.hue_gain, p.hue_gain);
  f.sat_scale = rng.uniform(1.0 - p.sat_gain, 1.0 + p.sat_gain);
  f.val_scale = rng.uniform(1.0 - p.val_gain, 1.0 + p.val_gain);
  return f;
}

inline ImageBuffer hsv_adjust(const ImageBuffer& img, const HsvFactors& f) {
  if (img.channels != 3) throw ContractError("hsv_adjust: expects a 3-channel image");
  ImageBuffer out = img;
  for (std::size_t i = 0; i < img.data.size(); i += 3) {
    Hsv hsv = rgb_to_hsv(img.data[i] / 255.0, img.data[i + 1] / 255.0, img.data[i + 2] / 255.0);
    hsv.h = std::fmod(hsv.h + 360.0 * f.hue_shift, 360.0);
    if (hsv.h < 0.0) hsv.h += 360.0;
    hsv.s = std::clamp(hsv.s * f.sat_scale, 0.0, 1.0);
    hsv.v = std::clamp(hsv.v * f.val_scale, 0.0, 1.0);
    const auto rgb = hsv_to_rgb(hsv);
    for (int c = 0; c < 3; ++c) out.data[i + c] = to_u8(255.0 * rgb[c]);
  }
  return out;
}

// Draws factors from (params.seed, stream) and applies them.
inline ImageBuffer hsv_jitter(const ImageBuffer& img, const JitterParams& params,
                              std::uint64_t stream = 0) {
  if (img.channels != 3) throw ContractError("hsv_jitter: expects a 3-channel image");
  StreamRng rng(params.seed, stream);
  return hsv_adjust(img, draw_hsv_factors(params, rng));
}

// ---------------------------------------------------------------------------
// Colour handling and enhancement chains

inline ImageBuffer gray_to_rgb(const ImageBuffer& img) {
  if (img.channels != 1) throw ContractError("gray_to_rgb: expects a single-channel image");
  ImageBuffer out(img.width, img.height, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    out.data[3 * i] = out.data[3 * i + 1] = out.data[3 * i + 2] = img.data[i];
  }
  return out;
}

// CLAHE on any image: grayscale directly, colour through Rec.601 luma with
// the chroma (full-range Cb/Cr) kept as is.
inline ImageBuffer clahe_any(const ImageBuffer& img, double clip_limit, ClaheTiles tiles) {
  if (img.channels == 1) return clahe(img, clip_limit, tiles);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  ImageBuffer luma(img.width, img.height, 1);
  std::vector<double> cb(n), cr(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = img.data[3 * i], g = img.data[3 * i + 1], b = img.data[3 * i + 2];
    luma.data[i] = to_u8(0.299 * r + 0.587 * g + 0.114 * b);
    cb[i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
    cr[i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
  }
  const ImageBuffer eq = clahe(luma, clip_limit, tiles);
  ImageBuffer out(img.width, img.height, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = eq.data[i];
    out.data[3 * i] = to_u8(y + 1.402 * cr[i]);
    out.data[3 * i + 1] = to_u8(y - 0.344136 * cb[i] - 0.714136 * cr[i]);
    out.data[3 * i + 2] = to_u8(y + 1.772 * cb[i]);
  }
  return out;
}

enum class EnhanceChain { none, soft, final_ };

inline std::string_view to_string(EnhanceChain c) {
  switch (c) {
    case EnhanceChain::none: return "none";
    case EnhanceChain::soft: return "soft";
    case EnhanceChain::final_: return "final";
  }
  return "none";
}

inline EnhanceChain parse_chain(std::string_view s) {
  if (s == "none") return EnhanceChain::none;
  if (s == "soft") return EnhanceChain::soft;
  if (s == "final") return EnhanceChain::final_;
  throw ValidationError("unknown enhancement chain \"" + std::string(s) + "\" (none|soft|final)");
}

// CLAHE, then median blur. Used before training the intermediate model.
inline ImageBuffer enhance_soft(const ImageBuffer& img, const EnhanceParams& p) {
  p.validate();
  return median_blur(clahe_any(img, p.clahe_clip_limit, p.clahe_tiles), p.median_kernel);
}

// Unsharp mask, then CLAHE. Used on the combined dataset.
inline ImageBuffer enhance_final(const ImageBuffer& img, const EnhanceParams& p) {
  p.validate();
  return clahe_any(unsharp_mask(img, p.unsharp_sigma, p.unsharp_amount), p.clahe_clip_limit,
                   p.clahe_tiles);
}

inline ImageBuffer enhance(const ImageBuffer& img, EnhanceChain chain, const EnhanceParams& p) {
  switch (chain) {
    case EnhanceChain::none: return img;
    case EnhanceChain::soft: return enhance_soft(img, p);
    case EnhanceChain::final_: return enhance_final(img, p);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Geometric image transforms (nearest neighbour, zero fill)

inline ImageBuffer warp_image(const ImageBuffer& img, const AxisAffine& m) {
  if (m.is_identity()) return img;
  ImageBuffer out(img.width, img.height, img.channels, std::uint8_t{0});
  for (int y = 0; y < img.height; ++y) {
    const double sy = std::floor(((y + 0.5) - m.ty) / m.sy);
    if (sy < 0.0 || sy >= img.height) continue;
    for (int x = 0; x < img.width; ++x) {
      const double sx = std::floor(((x + 0.5) - m.tx) / m.sx);
      if (sx < 0.0 || sx >= img.width) continue;
      for (int ch = 0; ch < img.channels; ++ch) {
        out.at(x, y, ch) = img.at(static_cast<int>(sx), static_cast<int>(sy), ch);
      }
    }
  }
  return out;
}

}  // namespace pseudoseg
