#include <limits>

#include "support.hpp"

namespace im2sp {
namespace {

image random_image(rng &gen, std::size_t h, std::size_t w, std::size_t c) {
  std::vector<float> px(h * w * c);
  for (auto &v : px)
    v = static_cast<float>(gen.uniform());
  return image(h, w, c, std::move(px));
}

// Codebook whose centroids are random in [0, 1] and pairwise distinct.
codebook random_codebook(rng &gen, std::size_t k, std::size_t dim) {
  matrix m(k, dim);
  for (auto &v : m.data)
    v = static_cast<float>(gen.uniform());
  return codebook(std::move(m));
}

patch_grid random_grid(rng &gen, std::size_t gh, std::size_t gw, std::size_t patch, std::size_t c, std::size_t k) {
  std::vector<unit_id> ids(gh * gw);
  for (auto &v : ids)
    v = static_cast<unit_id>(gen.below(k));
  return {gh, gw, patch, gh * patch, gw * patch, c, unit_sequence(std::move(ids), static_cast<std::uint32_t>(k))};
}

TEST(Image, RejectsOutOfRangePixels) {
  EXPECT_THROW(image(1, 1, 1, std::vector<float>{1.5f}), invalid_argument);
  EXPECT_THROW(image(1, 1, 1, std::vector<float>{-0.1f}), invalid_argument);
  EXPECT_THROW(image(2, 1, 1, std::vector<float>{0.0f}), invalid_argument);
}

TEST(Patchify, ShapeArithmetic) {
  const image img(16, 16, 3, 0.25f);
  const matrix p = patchify(img, 8);
  EXPECT_EQ(p.rows, 4u);
  EXPECT_EQ(p.cols, 192u);
  for (std::size_t i = 1; i < p.rows; ++i)
    EXPECT_TRUE(std::equal(p.row(i).begin(), p.row(i).end(), p.row(0).begin()));
}

TEST(Patchify, RampMatchesHandEnumeration) {
  std::vector<float> px(64);
  for (std::size_t i = 0; i < 64; ++i)
    px[i] = static_cast<float>(i) / 63.0f;
  const matrix p = patchify(image(8, 8, 1, px), 4);
  ASSERT_EQ(p.rows, 4u);
  // patch (gy, gx) holds pixels (4gy + y, 4gx + x) in row-major order
  const std::vector<std::vector<int>> expect{
      {0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27},
      {4, 5, 6, 7, 12, 13, 14, 15, 20, 21, 22, 23, 28, 29, 30, 31},
      {32, 33, 34, 35, 40, 41, 42, 43, 48, 49, 50, 51, 56, 57, 58, 59},
      {36, 37, 38, 39, 44, 45, 46, 47, 52, 53, 54, 55, 60, 61, 62, 63}};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t k = 0; k < 16; ++k)
      EXPECT_EQ(p(r, k), static_cast<float>(expect[r][k]) / 63.0f) << r << "," << k;
}

TEST(Patchify, ChannelsInterleaveWithinPatch) {
  rng gen(1);
  const image img = random_image(gen, 4, 6, 3);
  const matrix p = patchify(img, 2);
  ASSERT_EQ(p.rows, 6u);
  for (std::size_t gy = 0; gy < 2; ++gy)
    for (std::size_t gx = 0; gx < 3; ++gx)
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            EXPECT_EQ(p(gy * 3 + gx, (y * 2 + x) * 3 + c), img.at(gy * 2 + y, gx * 2 + x, c));
}

TEST(Patchify, NonDivisibleGeometry) {
  EXPECT_THROW(patchify(image(10, 8, 1), 4), invalid_argument);
  EXPECT_THROW(patchify(image(8, 8, 1), 0), invalid_argument);
}

TEST(FitImageCodebook, ConstantImageSingleCode) {
  const image img(8, 8, 3, 0.4f);
  const std::vector<image> corpus{img};
  const auto fit = fit_image_codebook(corpus, 1, 4, 0);
  for (float v : fit.centroids.centroid(0))
    EXPECT_FLOAT_EQ(v, 0.4f);
}

TEST(FitImageCodebook, TwoToneCorpus) {
  image img(8, 8, 1, 0.0f);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 4; x < 8; ++x)
      img.set(y, x, 0, 1.0f);
  const std::vector<image> corpus{img};
  const auto fit = fit_image_codebook(corpus, 2, 4, 3);
  EXPECT_EQ(fit.final_inertia(), 0.0);
  const float a = fit.centroids.centroid(0)[0], b = fit.centroids.centroid(1)[0];
  EXPECT_EQ(std::min(a, b), 0.0f);
  EXPECT_EQ(std::max(a, b), 1.0f);
}

TEST(FitImageCodebook, DelegatesToKMeansOverPooledPatches) {
  rng gen(4);
  std::vector<image> corpus;
  for (int i = 0; i < 5; ++i)
    corpus.push_back(random_image(gen, 8, 8, 3));
  const auto fit = fit_image_codebook(corpus, 6, 4, 11);
  matrix pooled(20, 48);
  for (std::size_t i = 0; i < 5; ++i) {
    const matrix p = patchify(corpus[i], 4);
    std::copy(p.data.begin(), p.data.end(), pooled.data.begin() + static_cast<std::ptrdiff_t>(i * p.data.size()));
  }
  const auto ref = kmeans_fit(pooled, 6, 11);
  EXPECT_NEAR(fit.final_inertia(), ref.final_inertia(), 1e-9);
  EXPECT_NEAR(inertia(pooled, fit.centroids), fit.final_inertia(), 1e-4);
}

TEST(FitImageCodebook, InsufficientPatches) {
  const std::vector<image> corpus{image(8, 8, 1)};
  EXPECT_THROW(fit_image_codebook(corpus, 5, 4, 0), invalid_argument);
}

TEST(EncodeImage, PaperGeometryHas784Cells) {
  const image img(224, 224, 3, 0.5f);
  const codebook cb(matrix(2, 8 * 8 * 3));
  const auto g = encode_image(img, cb, 8);
  EXPECT_EQ(g.grid_h, 28u);
  EXPECT_EQ(g.grid_w, 28u);
  EXPECT_EQ(g.units.size(), 784u);
}

TEST(EncodeImage, MatchesBruteForceNearestCentroid) {
  rng gen(21);
  const codebook cb = random_codebook(gen, 16, 48);
  const image img = random_image(gen, 32, 32, 3);
  const auto g = encode_image(img, cb, 4);
  ASSERT_EQ(g.units.size(), 64u);
  for (std::size_t gy = 0; gy < 8; ++gy)
    for (std::size_t gx = 0; gx < 8; ++gx) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < cb.size(); ++k) {
        double d = 0.0;
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
              const double diff = img.at(gy * 4 + y, gx * 4 + x, c) - cb.centroid(k)[(y * 4 + x) * 3 + c];
              d += diff * diff;
            }
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      EXPECT_EQ(g.at(gy, gx), best);
    }
}

TEST(EncodeImage, DimensionMismatch) {
  EXPECT_THROW(encode_image(image(8, 8, 3), codebook(matrix(2, 10)), 4), invalid_argument);
}

TEST(DecodeImage, UniformGridTilesCentroidZero) {
  rng gen(2);
  const codebook cb = random_codebook(gen, 3, 12);
  const patch_grid g{2, 2, 2, 4, 4, 3, unit_sequence(std::vector<unit_id>(4, 0), 3)};
  const image img = decode_image(g, cb);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_EQ(img.at(y, x, c), cb.centroid(0)[((y % 2) * 2 + x % 2) * 3 + c]);
}

TEST(DecodeImage, ClampsToUnitRange) {
  const codebook cb(matrix(1, 1, {1.7f}));
  const patch_grid g{1, 1, 1, 1, 1, 1, unit_sequence({0}, 1)};
  EXPECT_EQ(decode_image(g, cb).at(0, 0, 0), 1.0f);
}

TEST(DecodeImage, OutOfRangeUnit) {
  const codebook cb(matrix(2, 1));
  const patch_grid g{1, 1, 1, 1, 1, 1, unit_sequence({4}, 5)};
  EXPECT_THROW(decode_image(g, cb), invalid_argument);
}

TEST(RoundTrip, EncodeOfDecodeIsIdentity) {
  rng gen(99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t patch = gen.between(1, 4), c = gen.below(2) ? 3 : 1, k = gen.between(1, 40);
    const codebook cb = random_codebook(gen, k, patch * patch * c);
    const auto g = random_grid(gen, gen.between(1, 8), gen.between(1, 8), patch, c, k);
    EXPECT_EQ(encode_image(decode_image(g, cb), cb, patch), g) << "trial " << trial;
  }
}

TEST(RoundTrip, ImageBuiltFromCentroidsDecodesExactly) {
  rng gen(5);
  const codebook cb = random_codebook(gen, 8, 4 * 4 * 3);
  const auto g = random_grid(gen, 4, 4, 4, 3, 8);
  const image img = decode_image(g, cb);
  EXPECT_EQ(decode_image(encode_image(img, cb, 4), cb), img);
}

TEST(RoundTrip, ReconstructionBeatsRandomGrids) {
  rng gen(17);
  const codebook cb = random_codebook(gen, 12, 4 * 4 * 3);
  const image img = random_image(gen, 32, 32, 3);
  const double best = mean_squared_error(decode_image(encode_image(img, cb, 4), cb), img);
  for (int i = 0; i < 100; ++i)
    EXPECT_LE(best, mean_squared_error(decode_image(random_grid(gen, 8, 8, 4, 3, 12), cb), img));
}

TEST(Grid, BitsAndInverseScaling) {
  const codebook cb(matrix(8192, 8 * 8 * 3));
  for (std::size_t patch : {1u, 2u, 4u, 8u, 16u}) {
    const patch_grid g{224 / patch, 224 / patch, patch, 224, 224, 3,
                       unit_sequence(std::vector<unit_id>((224 / patch) * (224 / patch), 0), 8192)};
    EXPECT_EQ(g.bits(), bits_image_units(224, 224, patch, 8192));
    EXPECT_EQ(g.grid_h * patch, 224u);
  }
}

TEST(Grid, FileRoundTrip) {
  testing::scratch_dir dir("grid");
  rng gen(3);
  const auto g = random_grid(gen, 3, 5, 4, 3, 64);
  save_grid(dir.file("g.ucu"), g);
  EXPECT_EQ(load_grid(dir.file("g.ucu")), g);
}

TEST(Pnm, RoundTripColourAndGrey) {
  rng gen(8);
  for (std::size_t c : {1u, 3u}) {
    std::vector<float> px(5 * 7 * c);
    for (auto &v : px)
      v = static_cast<float>(gen.below(256)) / 255.0f;
    const image img(5, 7, c, px);
    EXPECT_EQ(decode_pnm(encode_pnm(img)), img);
  }
}

TEST(Pnm, HeaderCommentsAndMaxval) {
  const std::string text = "P5\n# comment\n2 1\n# another\n15\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.push_back(0);
  bytes.push_back(15);
  const image img = decode_pnm(bytes);
  EXPECT_EQ(img.width(), 2u);
  EXPECT_EQ(img.at(0, 1, 0), 1.0f);
}

TEST(Pnm, Malformed) {
  auto parse = [](const std::string &s) {
    return decode_pnm(std::vector<std::uint8_t>(s.begin(), s.end()));
  };
  EXPECT_THROW(parse("P3\n1 1\n255\n0 0 0"), format_error);
  EXPECT_THROW(parse("P6\n2 2\n255\n"), format_error);
  EXPECT_THROW(parse("P6\n1 1\n65535\n012345"), format_error);
  EXPECT_THROW(parse("P6\n0 1\n255\n"), format_error);
  EXPECT_THROW(parse("P6 x"), format_error);
}

} // namespace
} // namespace im2sp
