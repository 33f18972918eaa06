#include <cmath>

#include "support.hpp"

namespace im2sp {
namespace {

using testing::tiny_config;

model_params random_params(const model_config &c, std::uint64_t seed) {
  auto p = init_random(c, seed);
  rng gen(seed + 100);
  for_each_tensor(p, [&](const std::string &, tensor &t) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.data()[i] += gen.uniform(-0.5, 0.5);
  });
  return p;
}

std::vector<unit_id> image_of(const model_config &c, std::uint64_t seed) {
  rng gen(seed);
  std::vector<unit_id> img(c.max_image_tokens());
  for (auto &t : img)
    t = static_cast<unit_id>(gen.below(c.image_vocab));
  return img;
}

// Only the output bias speaks: every position has the same distribution.
model_params bias_only(model_config c, const std::vector<double> &bias) {
  auto p = init_random(c, 0);
  p.w_out.setZero();
  for (std::size_t i = 0; i < bias.size(); ++i)
    p.b_out(0, static_cast<Eigen::Index>(i)) = bias[i];
  return p;
}

TEST(NextLogProbs, NormalisedAndMatchesLoss) {
  const auto c = tiny_config();
  const auto p = random_params(c, 1);
  const auto img = image_of(c, 1);
  const std::vector<unit_id> target{3, 1, 4};
  double nll = 0;
  std::vector<unit_id> prefix;
  for (unit_id t : std::vector<unit_id>{3, 1, 4, c.eos()}) {
    const auto lp = next_log_probs(p, img, prefix);
    EXPECT_NEAR(lp.array().exp().sum(), 1.0, 1e-12);
    nll -= lp(t);
    prefix.push_back(t);
  }
  EXPECT_NEAR(nll / 4.0, forward_loss(p, img, target).loss, 1e-10);
}

TEST(Greedy, AllMassOnEosGivesEmptyOutput) {
  auto c = tiny_config();
  std::vector<double> bias(c.output_vocab(), 0.0);
  bias[c.eos()] = 50.0;
  const auto p = bias_only(c, bias);
  const auto g = generate_greedy(p, image_of(c, 0), c.max_unit_len);
  EXPECT_TRUE(g.units.empty());
  EXPECT_FALSE(g.hit_max_len);
  EXPECT_NEAR(g.score, 0.0, 1e-12);
  EXPECT_TRUE(generate(p, image_of(c, 0), c.max_unit_len, 4).units.empty());
}

TEST(Greedy, NeverEmitsBosOrPad) {
  auto c = tiny_config();
  std::vector<double> bias(c.output_vocab(), 0.0);
  bias[c.bos()] = 100.0;
  bias[c.pad()] = 100.0;
  bias[2] = 1.0;
  const auto p = bias_only(c, bias);
  const auto g = generate_greedy(p, image_of(c, 0), 5);
  EXPECT_EQ(g.units.tokens(), std::vector<unit_id>(5, 2));
  EXPECT_TRUE(g.hit_max_len);
  for (std::size_t beam : {1u, 3u}) {
    const auto b = generate(p, image_of(c, 0), 5, beam);
    for (unit_id t : b.units.tokens())
      EXPECT_LT(t, c.base_vocab());
  }
}

TEST(Greedy, TiesGoToLowestId) {
  auto c = tiny_config();
  std::vector<double> bias(c.output_vocab(), 0.0);
  bias[1] = bias[3] = 2.0;
  const auto g = generate_greedy(bias_only(c, bias), image_of(c, 0), 3);
  EXPECT_EQ(g.units.tokens(), (std::vector<unit_id>{1, 1, 1}));
}

TEST(Greedy, EqualsBeamOfOne) {
  const auto c = tiny_config();
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto p = random_params(c, seed);
    const auto img = image_of(c, seed);
    const auto g = generate_greedy(p, img, c.max_unit_len);
    const auto b = generate(p, img, c.max_unit_len, 1);
    EXPECT_EQ(g.units, b.units);
    EXPECT_EQ(g.hit_max_len, b.hit_max_len);
    EXPECT_NEAR(g.score, b.score, 1e-12);
  }
}

struct candidate {
  std::vector<unit_id> tokens; // including EOS if present
  double score;
};

// Every finished hypothesis with max_len 2 over two units: [EOS], [a, EOS], [a, b].
std::vector<candidate> enumerate(const model_params &p, std::span<const unit_id> img) {
  const unit_id eos = p.config.eos();
  std::vector<candidate> out;
  const auto lp0 = next_log_probs(p, img, {});
  out.push_back({{eos}, lp0(eos)});
  for (unit_id a = 0; a < 2; ++a) {
    const std::vector<unit_id> pa{a};
    const auto lp1 = next_log_probs(p, img, pa);
    out.push_back({{a, eos}, (lp0(a) + lp1(eos)) / 2});
    for (unit_id b = 0; b < 2; ++b)
      out.push_back({{a, b}, (lp0(a) + lp1(b)) / 2});
  }
  return out;
}

TEST(Beam, ExhaustiveForTwoUnitsAndLengthTwo) {
  auto c = tiny_config();
  c.unit_vocab = 2;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto p = random_params(c, seed);
    const auto img = image_of(c, seed);
    const auto all = enumerate(p, img);
    std::size_t best = 0;
    for (std::size_t i = 1; i < all.size(); ++i)
      if (all[i].score > all[best].score || (all[i].score == all[best].score && all[i].tokens < all[best].tokens))
        best = i;
    auto expect = all[best].tokens;
    const bool ends_eos = expect.back() == c.eos();
    if (ends_eos)
      expect.pop_back();
    const auto g = generate(p, img, 2, 3);
    ASSERT_EQ(g.units.tokens(), expect) << "seed " << seed;
    EXPECT_NEAR(g.score, all[best].score, 1e-12);
    EXPECT_EQ(g.hit_max_len, !ends_eos);
  }
}

TEST(Beam, WiderBeamNeverScoresWorseOnExhaustiveCase) {
  auto c = tiny_config();
  c.unit_vocab = 2;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = random_params(c, seed);
    const auto img = image_of(c, seed);
    EXPECT_GE(generate(p, img, 2, 3).score + 1e-12, generate(p, img, 2, 1).score);
  }
}

TEST(Beam, ScoreIsLengthNormalised) {
  auto c = tiny_config();
  std::vector<double> bias(c.output_vocab(), 0.0);
  bias[0] = 3.0;
  const auto p = bias_only(c, bias);
  const auto g = generate(p, image_of(c, 0), 4, 2);
  // the same distribution at every step: length-normalised score is lp(0)
  const auto lp = next_log_probs(p, image_of(c, 0), {});
  EXPECT_EQ(g.units.tokens(), std::vector<unit_id>(4, 0));
  EXPECT_NEAR(g.score, lp(0), 1e-12);
}

TEST(Generate, RejectsBadArguments) {
  const auto c = tiny_config();
  const auto p = init_random(c, 0);
  const auto img = image_of(c, 0);
  EXPECT_THROW(generate(p, img, 0, 1), invalid_argument);
  EXPECT_THROW(generate(p, img, c.max_unit_len + 1, 1), invalid_argument);
  EXPECT_THROW(generate(p, img, 3, 0), invalid_argument);
  EXPECT_THROW(generate_greedy(p, img, 0), invalid_argument);
  std::vector<unit_id> bad = img;
  bad[0] = static_cast<unit_id>(c.image_vocab);
  EXPECT_THROW(generate_greedy(p, bad, 3), invalid_argument);
}

TEST(Generate, Deterministic) {
  const auto c = tiny_config();
  const auto p = random_params(c, 9);
  const auto img = image_of(c, 9);
  const auto a = generate(p, img, c.max_unit_len, 4), b = generate(p, img, c.max_unit_len, 4);
  EXPECT_EQ(a.units, b.units);
  EXPECT_EQ(a.score, b.score);
}

} // namespace
} // namespace im2sp
