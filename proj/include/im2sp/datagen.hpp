#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"
#include "image_units.hpp"
#include "quantizer.hpp"
#include "random.hpp"

namespace im2sp {

// ---------------------------------------------------------------------------
// Caption grammar
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 30> caption_vocabulary{
    "small", "large",                                                                    // sizes
    "red",   "green", "blue",   "yellow", "cyan",     "magenta", "white", "orange", "purple", // colours
    "square", "circle", "triangle", "cross", "diamond",                                  // shapes
    "left-of", "right-of", "above", "below",                                             // relations
    "and",   "in",    "the",    "a",                                                     // function words
    "top",   "middle", "bottom", "left",   "center",   "right"};                         // positions

inline constexpr std::size_t text_vocab_size = caption_vocabulary.size();

namespace word {
inline constexpr unit_id small = 0, large = 1;
inline constexpr unit_id first_colour = 2, first_shape = 11;
inline constexpr unit_id left_of = 16, right_of = 17, above = 18, below = 19;
inline constexpr unit_id and_ = 20, in = 21, the = 22, a = 23;
inline constexpr unit_id top = 24, middle = 25, bottom = 26, left = 27, center = 28, right = 29;
} // namespace word

inline constexpr std::size_t colour_count = 9;
inline constexpr std::size_t shape_count = 5;

inline std::optional<unit_id> word_id(std::string_view w) {
  for (std::size_t i = 0; i < caption_vocabulary.size(); ++i)
    if (caption_vocabulary[i] == w)
      return static_cast<unit_id>(i);
  return std::nullopt;
}

inline std::string caption_text(const std::vector<unit_id> &words) {
  std::string out;
  for (unit_id w : words) {
    if (!out.empty())
      out += ' ';
    out += caption_vocabulary.at(w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Word -> speech-unit map
// ---------------------------------------------------------------------------
//
// Over 32 units: word w is spoken as [w, m_1 .. m_k, 31] with k = w % 3, so
// every word spans 2-4 units. Unit 31 only ever closes a word and no word
// starts with it, so concatenations never merge under dedup and a deduped
// sequence splits back into words at each 31.

inline constexpr std::size_t toy_unit_vocab = 32;
inline constexpr unit_id word_end_unit = 31;

inline std::vector<unit_id> word_units(unit_id w) {
  detail::require(w < text_vocab_size, "word_units: unknown word id");
  std::vector<unit_id> out{w};
  for (unit_id j = 0; j < w % 3; ++j) {
    unit_id m = (7 * w + 11 * j + 5) % word_end_unit;
    if (m == out.back())
      m = (m + 1) % word_end_unit;
    out.push_back(m);
  }
  out.push_back(word_end_unit);
  return out;
}

/// Deduplicated units of a caption.
inline unit_sequence caption_units(const std::vector<unit_id> &words) {
  std::vector<unit_id> out;
  for (unit_id w : words) {
    const auto u = word_units(w);
    out.insert(out.end(), u.begin(), u.end());
  }
  return unit_sequence(std::move(out), toy_unit_vocab, true);
}

/// Inverse of caption_units; nullopt if the units are not a valid caption.
inline std::optional<std::vector<unit_id>> parse_caption_units(const std::vector<unit_id> &units) {
  std::vector<unit_id> words;
  std::size_t start = 0;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (units[i] != word_end_unit)
      continue;
    if (i == start || units[start] >= text_vocab_size)
      return std::nullopt;
    const unit_id w = units[start];
    const auto expect = word_units(w);
    if (!std::equal(expect.begin(), expect.end(), units.begin() + static_cast<std::ptrdiff_t>(start),
                    units.begin() + static_cast<std::ptrdiff_t>(i + 1)))
      return std::nullopt;
    words.push_back(w);
    start = i + 1;
  }
  if (start != units.size())
    return std::nullopt;
  return words;
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

struct scene_shape {
  unsigned colour = 0; // 0..8
  unsigned kind = 0;   // 0..4
  unsigned size = 0;   // 0 small, 1 large
  unsigned slot = 0;   // 0..8, row-major over a 3x3 layout

  friend bool operator==(const scene_shape &, const scene_shape &) = default;
};

inline constexpr std::array<std::array<float, 3>, colour_count> colour_rgb{{{1.0f, 0.0f, 0.0f},
                                                                            {0.0f, 1.0f, 0.0f},
                                                                            {0.0f, 0.0f, 1.0f},
                                                                            {1.0f, 1.0f, 0.0f},
                                                                            {0.0f, 1.0f, 1.0f},
                                                                            {1.0f, 0.0f, 1.0f},
                                                                            {1.0f, 1.0f, 1.0f},
                                                                            {1.0f, 0.5f, 0.0f},
                                                                            {0.5f, 0.0f, 1.0f}}};

inline bool shape_covers(unsigned kind, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (kind) {
  case 0: // square
    return ax <= r && ay <= r;
  case 1: // circle
    return dx * dx + dy * dy <= r * r;
  case 2: // triangle, apex up
    return dy >= -r && dy <= r && ax <= (dy + r) / 2.0;
  case 3: // cross
    return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
  default: // diamond
    return ax + ay <= r;
  }
}

/// Draws the shapes on a black square canvas of the given size.
inline image render_scene(const std::vector<scene_shape> &scene, std::size_t size) {
  image img(size, size, 3);
  const double cell = static_cast<double>(size) / 3.0;
  for (const auto &s : scene) {
    const double cx = cell * (s.slot % 3 + 0.5), cy = cell * (s.slot / 3 + 0.5);
    const double r = cell * (s.size == 0 ? 0.25 : 0.42);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        if (shape_covers(s.kind, x + 0.5 - cx, y + 0.5 - cy, r))
          for (std::size_t ch = 0; ch < 3; ++ch)
            img.set(y, x, ch, colour_rgb[s.colour][ch]);
  }
  return img;
}

/// Caption words for a scene whose shapes are sorted by slot.
///
///   1 shape:  a SIZE COLOUR SHAPE in the ROW COLUMN
///   2 shapes: A REL B
///   3 shapes: A REL B and C REL B
inline std::vector<unit_id> describe_scene(const std::vector<scene_shape> &scene) {
  detail::require(!scene.empty() && scene.size() <= 3, "describe_scene: need 1-3 shapes");
  auto phrase = [](const scene_shape &s, std::vector<unit_id> &out) {
    out.push_back(s.size == 0 ? word::small : word::large);
    out.push_back(word::first_colour + s.colour);
    out.push_back(word::first_shape + s.kind);
  };
  auto relation = [](const scene_shape &a, const scene_shape &b) {
    if (a.slot / 3 == b.slot / 3)
      return a.slot % 3 < b.slot % 3 ? word::left_of : word::right_of;
    return a.slot / 3 < b.slot / 3 ? word::above : word::below;
  };
  std::vector<unit_id> out;
  if (scene.size() == 1) {
    out.push_back(word::a);
    phrase(scene[0], out);
    out.push_back(word::in);
    out.push_back(word::the);
    out.push_back(word::top + scene[0].slot / 3);
    out.push_back(word::left + scene[0].slot % 3);
    return out;
  }
  phrase(scene[0], out);
  out.push_back(relation(scene[0], scene[1]));
  phrase(scene[1], out);
  if (scene.size() == 3) {
    out.push_back(word::and_);
    phrase(scene[2], out);
    out.push_back(relation(scene[2], scene[1]));
    phrase(scene[1], out);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct gen_options {
  std::uint64_t seed = 0;
  std::size_t n_items = 64;
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t feature_dim = 16;
  std::uint64_t codebook_seed = 0x5eed;
  /// Per-coordinate noise bound as a fraction of half the minimum
  /// distance between generating centroids.
  double noise_fraction = 0.1;
  double frame_rate_hz = 50.0;
};

struct corpus_item {
  std::size_t id = 0;
  std::vector<scene_shape> scene;
  image picture{1, 1, 3};
  std::vector<unit_id> words;
  unit_sequence raw_units; // with per-word repetitions
  unit_sequence units;     // deduplicated
  feature_sequence features{matrix(0, 1)};
};

struct corpus {
  gen_options options;
  codebook speech_codebook{matrix(1, 1)};
  double noise = 0.0;
  std::vector<corpus_item> items;
};

/// Smallest Euclidean distance between two distinct centroids.
inline double min_centroid_distance(const codebook &cb) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cb.size(); ++i)
    for (std::size_t j = i + 1; j < cb.size(); ++j)
      best = std::min(best, squared_distance(cb.centroid(i), cb.centroid(j)));
  return std::sqrt(best);
}

/// The fixed generating codebook: toy_unit_vocab centroids uniform in [-1, 1]^dim.
inline codebook generating_codebook(std::size_t dim, std::uint64_t seed) {
  rng gen(seed);
  matrix m(toy_unit_vocab, dim);
  for (float &v : m.data)
    v = static_cast<float>(gen.uniform(-1.0, 1.0));
  return codebook(std::move(m));
}

/// Frames for a raw unit sequence: each frame is its unit's centroid plus
/// independent uniform noise in [-noise, noise] per coordinate.
inline feature_sequence synthesize_features(const unit_sequence &raw, const codebook &cb, double noise, rng &gen,
                                            double frame_rate_hz = 50.0) {
  matrix m(raw.size(), cb.dim());
  for (std::size_t t = 0; t < raw.size(); ++t) {
    auto c = cb.centroid(raw[t]);
    auto row = m.row(t);
    for (std::size_t d = 0; d < cb.dim(); ++d)
      row[d] = static_cast<float>(c[d] + (noise > 0.0 ? gen.uniform(-noise, noise) : 0.0));
  }
  return feature_sequence(std::move(m), frame_rate_hz);
}

inline corpus_item generate_item(const gen_options &opt, const codebook &cb, double noise, std::size_t index) {
  rng gen(derive_seed(opt.seed, index));
  corpus_item item;
  item.id = index;
  const std::size_t n_shapes = static_cast<std::size_t>(gen.between(1, 3));
  std::vector<unsigned> slots{0, 1, 2, 3, 4, 5, 6, 7, 8};
  gen.shuffle(slots);
  for (std::size_t i = 0; i < n_shapes; ++i)
    item.scene.push_back({static_cast<unsigned>(gen.below(colour_count)), static_cast<unsigned>(gen.below(shape_count)),
                          static_cast<unsigned>(gen.below(2)), slots[i]});
  std::sort(item.scene.begin(), item.scene.end(),
            [](const scene_shape &a, const scene_shape &b) { return a.slot < b.slot; });
  item.picture = render_scene(item.scene, opt.image_size);
  item.words = describe_scene(item.scene);

  std::vector<unit_id> raw;
  for (unit_id w : item.words) {
    const auto repeat = static_cast<std::size_t>(gen.between(1, 3));
    for (unit_id u : word_units(w))
      raw.insert(raw.end(), repeat, u);
  }
  item.raw_units = unit_sequence(std::move(raw), toy_unit_vocab);
  item.units = dedup(item.raw_units);
  item.features = synthesize_features(item.raw_units, cb, noise, gen, opt.frame_rate_hz);
  return item;
}

/// Deterministic synthetic corpus of paired images, captions, speech units
/// and speech features. Item i depends only on (seed, i).
inline corpus gen_corpus(const gen_options &opt) {
  detail::require(opt.n_items >= 1, "gen_corpus: n_items must be >= 1");
  check_patch_geometry(opt.image_size, opt.image_size, opt.patch);
  detail::require(opt.image_size >= 6, "gen_corpus: image size must be >= 6");
  detail::require(opt.feature_dim >= 1, "gen_corpus: feature_dim must be >= 1");
  detail::require(opt.noise_fraction >= 0.0, "gen_corpus: noise fraction must be nonnegative");
  corpus c;
  c.options = opt;
  c.speech_codebook = generating_codebook(opt.feature_dim, opt.codebook_seed);
  c.noise = opt.noise_fraction * min_centroid_distance(c.speech_codebook) / 2.0;
  for (std::size_t i = 0; i < opt.n_items; ++i)
    c.items.push_back(generate_item(opt, c.speech_codebook, c.noise, i));
  return c;
}

struct split_indices {
  std::vector<std::size_t> train, val, test;
};

/// Seeded permutation split. val and test get floor(n * fraction) items;
/// train takes the remainder.
inline split_indices split(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions)
    detail::require(f >= 0.0 && f <= 1.0, "split: fractions must lie in [0, 1]");
  detail::require(std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) < 1e-9, "split: fractions must sum to 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i)
    order[i] = i;
  rng gen(seed);
  gen.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[1] + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[2] + 1e-9));
  split_indices s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), order.end());
  return s;
}

} // namespace im2sp
