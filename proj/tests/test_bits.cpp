#include "support.hpp"

namespace im2sp {
namespace {

TEST(BitsRawImage, Arithmetic) {
  EXPECT_EQ(bits_raw_image(224, 224, 3), 1204224u);
  EXPECT_EQ(bits_raw_image(1, 1, 1), 8u);
  EXPECT_EQ(bits_raw_image(32, 32, 3), 24576u);
}

TEST(BitsImageUnits, Arithmetic) {
  EXPECT_EQ(bits_image_units(224, 224, 8, 8192), 10192u);
  EXPECT_EQ(bits_image_units(8, 8, 8, 2), 1u);
  EXPECT_THROW(bits_image_units(224, 220, 8, 8192), invalid_argument);
}

TEST(ImageRatio, RoundsToEightTenthsPercent) {
  const bit_ratio r{bits_image_units(224, 224), bits_raw_image(224, 224, 3)};
  EXPECT_EQ(r.num, 10192u);
  EXPECT_EQ(r.den, 1204224u);
  EXPECT_EQ(r.percent_string(), "0.8%");
  EXPECT_EQ(r.percent_string(3), "0.846%");
  EXPECT_TRUE(r.less_than(9, 1000));
}

TEST(SpeechBits, OneSecondDefaults) {
  EXPECT_EQ(bits_raw_audio(1.0), 256000u);
  EXPECT_EQ(bits_mel(1.0), 256000u);
  EXPECT_EQ(speech_unit_count(1.0), 50u);
  EXPECT_EQ(bits_speech_units(1.0), 400u);
  const bit_ratio r{400, 256000};
  EXPECT_EQ(r.percent_string(5), "0.15625%");
  EXPECT_TRUE(r.less_than(2, 1000));
}

TEST(SpeechBits, ZeroDuration) {
  EXPECT_EQ(bits_raw_audio(0.0), 0u);
  EXPECT_EQ(bits_mel(0.0), 0u);
  EXPECT_EQ(bits_speech_units(0.0), 0u);
}

TEST(SpeechBits, ObservedLengthOverridesRate) {
  EXPECT_EQ(bits_speech_units(1.0, 16000, 320, 200, 31), 31u * 8);
  EXPECT_EQ(bits_speech_units(1.0, 16000, 320, 32, 10), 50u);
}

TEST(SpeechBits, SixteenBitMelMissesTwoTenthsPercent) {
  const bit_ratio r{bits_speech_units(1.0), bits_mel(1.0, 100, 80, 16)};
  EXPECT_EQ(r.percent_string(4), "0.3125%");
  EXPECT_FALSE(r.less_than(2, 1000));
}

TEST(BitCounts, LinearInCounts) {
  for (std::uint64_t k = 1; k < 20; ++k) {
    EXPECT_EQ(bits_raw_image(8 * k, 8, 3), k * bits_raw_image(8, 8, 3));
    EXPECT_EQ(bits_image_units(8 * k, 8), k * bits_image_units(8, 8));
    EXPECT_EQ(bits_raw_audio(static_cast<double>(k)), k * bits_raw_audio(1.0));
    EXPECT_EQ(bits_mel(static_cast<double>(k)), k * bits_mel(1.0));
    EXPECT_EQ(bits_speech_units(static_cast<double>(k)), k * bits_speech_units(1.0));
  }
}

TEST(Report, PaperDefaults) {
  const auto r = report({});
  EXPECT_NEAR(r.image_ratio.value(), 0.00846, 5e-6);
  EXPECT_DOUBLE_EQ(r.speech_ratio_vs_raw.value(), 0.0015625);
  EXPECT_DOUBLE_EQ(r.speech_ratio_vs_mel.value(), 0.0015625);
  EXPECT_EQ(r.speech_unit_bits_postdedup, r.speech_unit_bits_prededup);
  EXPECT_TRUE(r.image_ratio.less_than(9, 1000));
  EXPECT_TRUE(r.speech_ratio_vs_raw.less_than(2, 1000));
  EXPECT_NE(format_key_values(r).find("image_ratio_percent=0.8%"), std::string::npos);
  EXPECT_NE(format_table(r).find("0.8%"), std::string::npos);
}

TEST(Report, DedupLength) {
  bits_config cfg;
  cfg.dedup_length = 50;
  EXPECT_EQ(report(cfg).speech_unit_bits_postdedup, report(cfg).speech_unit_bits_prededup);
  cfg.dedup_length = 20;
  EXPECT_EQ(report(cfg).speech_unit_bits_postdedup, 160u);
  cfg.dedup_length = 51;
  EXPECT_THROW(report(cfg), invalid_argument);
}

TEST(Report, SyntheticCorpusDedupShrinks) {
  gen_options opt;
  opt.n_items = 8;
  const auto c = gen_corpus(opt);
  for (const auto &item : c.items) {
    bits_config cfg;
    cfg.duration_s = static_cast<double>(item.features.length()) / item.features.frame_rate_hz();
    cfg.sample_rate = 16000;
    cfg.factor = 320;
    cfg.unit_vocab = toy_unit_vocab;
    cfg.dedup_length = item.units.size();
    const auto r = report(cfg);
    const bool repeated = item.units.size() < item.features.length();
    EXPECT_EQ(r.speech_unit_bits_postdedup < r.speech_unit_bits_prededup, repeated);
  }
}

TEST(Report, InconsistentGeometry) {
  bits_config cfg;
  cfg.image_w = 225;
  EXPECT_THROW(report(cfg), invalid_argument);
}

} // namespace
} // namespace im2sp
