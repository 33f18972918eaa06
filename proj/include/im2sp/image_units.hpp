#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "core.hpp"
#include "quantizer.hpp"

namespace im2sp {

inline constexpr std::size_t default_patch_size = 8;
inline constexpr std::size_t default_image_codebook_size = 8192;

/// H x W x C image with pixel values in [0, 1], stored row-major with
/// interleaved channels.
class image {
public:
  image(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> pixels)
      : h_(height), w_(width), c_(channels), px_(std::move(pixels)) {
    detail::require(h_ >= 1 && w_ >= 1 && c_ >= 1, "image: dimensions must be positive");
    detail::require(px_.size() == h_ * w_ * c_, "image: pixel count does not match geometry");
    for (float v : px_)
      detail::require(v >= 0.0f && v <= 1.0f, "image: pixel values must lie in [0, 1]");
  }
  image(std::size_t height, std::size_t width, std::size_t channels, float fill = 0.0f)
      : image(height, width, channels, std::vector<float>(height * width * channels, fill)) {}

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t channels() const { return c_; }
  float at(std::size_t y, std::size_t x, std::size_t ch) const { return px_[(y * w_ + x) * c_ + ch]; }
  void set(std::size_t y, std::size_t x, std::size_t ch, float v) {
    detail::require(v >= 0.0f && v <= 1.0f, "image: pixel values must lie in [0, 1]");
    px_[(y * w_ + x) * c_ + ch] = v;
  }
  const std::vector<float> &pixels() const { return px_; }

  friend bool operator==(const image &, const image &) = default;

private:
  std::size_t h_, w_, c_;
  std::vector<float> px_;
};

/// Image-unit ids on the patch lattice together with the source geometry.
struct patch_grid {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t patch_size = 0;
  std::size_t image_h = 0;
  std::size_t image_w = 0;
  std::size_t channels = 0;
  /// Row-major over the grid; vocab_size is the image codebook size.
  unit_sequence units;

  unit_id at(std::size_t gy, std::size_t gx) const { return units[gy * grid_w + gx]; }
  std::uint64_t bits() const { return units.payload_bits(); }

  friend bool operator==(const patch_grid &, const patch_grid &) = default;
};

inline void check_patch_geometry(std::size_t h, std::size_t w, std::size_t patch) {
  detail::require(patch >= 1, "patch size must be >= 1");
  if (h % patch != 0 || w % patch != 0)
    throw invalid_argument("image " + std::to_string(h) + "x" + std::to_string(w) +
                           " is not divisible by patch size " + std::to_string(patch));
}

/// One row per patch (patches row-major over the grid); each row is the
/// row-major flattening of a patch x patch x C block.
inline matrix patchify(const image &img, std::size_t patch) {
  check_patch_geometry(img.height(), img.width(), patch);
  const std::size_t gh = img.height() / patch, gw = img.width() / patch, c = img.channels();
  matrix out(gh * gw, patch * patch * c);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      auto row = out.row(gy * gw + gx);
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            row[k++] = img.at(gy * patch + y, gx * patch + x, ch);
    }
  return out;
}

/// K-means codebook over the patches pooled from every image in the corpus.
inline kmeans_result fit_image_codebook(std::span<const image> corpus, std::size_t codebook_size,
                                        std::size_t patch, std::uint64_t seed,
                                        std::size_t max_iters = default_kmeans_iters,
                                        double tol = default_kmeans_tol, std::size_t restarts = 1) {
  detail::require(!corpus.empty(), "fit_image_codebook: empty corpus");
  std::vector<float> pooled;
  std::size_t rows = 0, dim = 0;
  for (const auto &img : corpus) {
    const matrix p = patchify(img, patch);
    if (rows == 0)
      dim = p.cols;
    else
      detail::require(p.cols == dim, "fit_image_codebook: images differ in channel count");
    pooled.insert(pooled.end(), p.data.begin(), p.data.end());
    rows += p.rows;
  }
  if (rows < codebook_size)
    throw invalid_argument("fit_image_codebook: " + std::to_string(rows) + " patches is fewer than codebook size " +
                           std::to_string(codebook_size));
  return kmeans_fit_best(matrix(rows, dim, std::move(pooled)), codebook_size, seed, restarts, max_iters, tol);
}

inline patch_grid encode_image(const image &img, const codebook &cb, std::size_t patch) {
  const matrix patches = patchify(img, patch);
  if (patches.cols != cb.dim())
    throw invalid_argument("encode_image: patch dim " + std::to_string(patches.cols) +
                           " does not match codebook dim " + std::to_string(cb.dim()));
  std::vector<unit_id> ids(patches.rows);
  for (std::size_t i = 0; i < patches.rows; ++i)
    ids[i] = nearest(cb, patches.row(i)).index;
  return {img.height() / patch,
          img.width() / patch,
          patch,
          img.height(),
          img.width(),
          img.channels(),
          unit_sequence(std::move(ids), static_cast<std::uint32_t>(cb.size()))};
}

/// Replaces every cell with its centroid patch, clamped to [0, 1].
inline image decode_image(const patch_grid &grid, const codebook &cb) {
  const std::size_t p = grid.patch_size, c = grid.channels;
  detail::require(grid.units.size() == grid.grid_h * grid.grid_w, "decode_image: grid size mismatch");
  detail::require(cb.dim() == p * p * c, "decode_image: codebook dim does not match patch geometry");
  image out(grid.grid_h * p, grid.grid_w * p, c);
  for (std::size_t gy = 0; gy < grid.grid_h; ++gy)
    for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
      const unit_id id = grid.at(gy, gx);
      if (id >= cb.size())
        throw invalid_argument("decode_image: unit " + std::to_string(id) + " out of range for codebook of " +
                               std::to_string(cb.size()));
      auto centre = cb.centroid(id);
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            out.set(gy * p + y, gx * p + x, ch, std::clamp(centre[k++], 0.0f, 1.0f));
    }
  return out;
}

inline double mean_squared_error(const image &a, const image &b) {
  detail::require(a.pixels().size() == b.pixels().size(), "mean_squared_error: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels().size(); ++i) {
    const double d = static_cast<double>(a.pixels()[i]) - b.pixels()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.pixels().size());
}

// ---------------------------------------------------------------------------
// PNM (P6 colour, P5 grey; 8-bit)
// ---------------------------------------------------------------------------

inline image decode_pnm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n')
          ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9)
        throw format_error("pnm: header value too large");
    }
    if (digits == 0)
      throw format_error("pnm: malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5'))
    throw format_error("pnm: only binary P6/P5 images are supported");
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0)
    throw format_error("pnm: zero image dimension");
  if (maxval == 0 || maxval > 255)
    throw format_error("pnm: only 8-bit images are supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw format_error("pnm: malformed header");
  ++pos;
  const std::size_t n = w * h * channels;
  if (bytes.size() - pos < n)
    throw format_error("pnm: truncated pixel data");
  std::vector<float> px(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t v = bytes[pos + i];
    if (v > maxval)
      throw format_error("pnm: sample exceeds maxval");
    px[i] = static_cast<float>(v) / static_cast<float>(maxval);
  }
  return image(h, w, channels, std::move(px));
}

inline std::vector<std::uint8_t> encode_pnm(const image &img) {
  detail::require(img.channels() == 3 || img.channels() == 1, "pnm: need 1 or 3 channels");
  const std::string header = (img.channels() == 3 ? "P6\n" : "P5\n") + std::to_string(img.width()) + " " +
                             std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels().size());
  for (float v : img.pixels())
    out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  return out;
}

inline image load_pnm(const std::string &path) { return decode_pnm(detail::read_file_bytes(path)); }

inline void save_pnm(const std::string &path, const image &img) { detail::write_file_bytes(path, encode_pnm(img)); }

// ---------------------------------------------------------------------------
// Grid files: a unit stream plus a key=value geometry sidecar at <path>.geom
// ---------------------------------------------------------------------------

inline void save_grid(const std::string &path, const patch_grid &g) {
  save_units(path, g.units);
  std::ofstream geom(path + ".geom", std::ios::trunc);
  geom << "grid_h=" << g.grid_h << "\ngrid_w=" << g.grid_w << "\npatch=" << g.patch_size << "\nimage_h=" << g.image_h
       << "\nimage_w=" << g.image_w << "\nchannels=" << g.channels << "\n";
  if (!geom)
    throw format_error("cannot write " + path + ".geom");
}

inline patch_grid load_grid(const std::string &path) {
  patch_grid g;
  g.units = load_units(path);
  std::ifstream geom(path + ".geom");
  if (!geom)
    throw format_error("cannot open " + path + ".geom");
  std::map<std::string, std::size_t> kv;
  std::string line;
  while (std::getline(geom, line)) {
    const auto eq = line.find('=');
    if (line.empty())
      continue;
    if (eq == std::string::npos)
      throw format_error("grid sidecar: malformed line \"" + line + "\"");
    try {
      kv[line.substr(0, eq)] = std::stoul(line.substr(eq + 1));
    } catch (const std::exception &) {
      throw format_error("grid sidecar: bad value in \"" + line + "\"");
    }
  }
  auto field = [&](const char *key) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw format_error(std::string("grid sidecar: missing ") + key);
    return it->second;
  };
  g.grid_h = field("grid_h");
  g.grid_w = field("grid_w");
  g.patch_size = field("patch");
  g.image_h = field("image_h");
  g.image_w = field("image_w");
  g.channels = field("channels");
  if (g.grid_h * g.patch_size != g.image_h || g.grid_w * g.patch_size != g.image_w ||
      g.units.size() != g.grid_h * g.grid_w)
    throw format_error("grid sidecar: geometry inconsistent with unit stream");
  return g;
}

} // namespace im2sp
