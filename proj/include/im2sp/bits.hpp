#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>

#include "core.hpp"

namespace im2sp {

/// Exact ratio of two bit counts.
struct bit_ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  double value() const { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }
  double percent() const { return 100.0 * value(); }

  /// Percentage rounded to the given number of decimals, e.g. "0.8%".
  std::string percent_string(int decimals = 1) const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f%%", decimals, percent());
    return buf;
  }

  /// num < bound_num / bound_den, compared without rounding.
  bool less_than(std::uint64_t bound_num, std::uint64_t bound_den) const {
    return static_cast<unsigned __int128>(num) * bound_den < static_cast<unsigned __int128>(bound_num) * den;
  }
};

inline std::uint64_t bits_raw_image(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t depth = 8) {
  return h * w * c * depth;
}

inline std::uint64_t bits_image_units(std::uint64_t h, std::uint64_t w, std::uint64_t patch = 8,
                                      std::uint64_t codebook_size = 8192) {
  detail::require(patch >= 1 && h % patch == 0 && w % patch == 0,
                  "bits_image_units: patch size must divide image height and width");
  detail::require(codebook_size >= 1, "bits_image_units: codebook size must be >= 1");
  return (h / patch) * (w / patch) * bits_per_token(codebook_size);
}

namespace detail {
inline std::uint64_t count_at_rate(double duration_s, double rate) {
  require(duration_s >= 0.0 && std::isfinite(duration_s), "duration must be finite and nonnegative");
  require(rate > 0.0, "rate must be positive");
  // small slack so that e.g. 0.1 s * 16000 Hz counts 1600 samples
  return static_cast<std::uint64_t>(std::floor(duration_s * rate + 1e-9));
}
} // namespace detail

inline std::uint64_t bits_raw_audio(double duration_s, std::uint64_t sample_rate = 16000, std::uint64_t depth = 16) {
  return detail::count_at_rate(duration_s, static_cast<double>(sample_rate)) * depth;
}

inline std::uint64_t bits_mel(double duration_s, std::uint64_t fps = 100, std::uint64_t dims = 80,
                              std::uint64_t depth = 32) {
  return detail::count_at_rate(duration_s, static_cast<double>(fps)) * dims * depth;
}

/// Unit count before dedup: floor(samples / factor).
inline std::uint64_t speech_unit_count(double duration_s, std::uint64_t sample_rate = 16000,
                                       std::uint64_t factor = 320) {
  detail::require(factor >= 1, "speech_unit_count: factor must be >= 1");
  return detail::count_at_rate(duration_s, static_cast<double>(sample_rate)) / factor;
}

inline std::uint64_t bits_speech_units(double duration_s, std::uint64_t sample_rate = 16000,
                                       std::uint64_t factor = 320, std::uint64_t unit_vocab = 200,
                                       std::optional<std::uint64_t> observed_length = std::nullopt) {
  detail::require(unit_vocab >= 1, "bits_speech_units: vocabulary must be >= 1");
  const std::uint64_t n = observed_length ? *observed_length : speech_unit_count(duration_s, sample_rate, factor);
  return n * bits_per_token(unit_vocab);
}

struct bits_config {
  std::uint64_t image_h = 224;
  std::uint64_t image_w = 224;
  std::uint64_t channels = 3;
  std::uint64_t pixel_depth = 8;
  std::uint64_t patch = 8;
  std::uint64_t image_codebook = 8192;
  double duration_s = 1.0;
  std::uint64_t sample_rate = 16000;
  std::uint64_t audio_depth = 16;
  std::uint64_t factor = 320;
  std::uint64_t unit_vocab = 200;
  std::uint64_t mel_fps = 100;
  std::uint64_t mel_dims = 80;
  std::uint64_t mel_depth = 32;
  /// Measured unit count after repetition removal, when available.
  std::optional<std::uint64_t> dedup_length;
};

struct bits_report {
  std::uint64_t raw_image_bits = 0;
  std::uint64_t image_unit_bits = 0;
  std::uint64_t raw_audio_bits = 0;
  std::uint64_t mel_bits = 0;
  std::uint64_t speech_unit_bits_prededup = 0;
  std::uint64_t speech_unit_bits_postdedup = 0;
  bit_ratio image_ratio;
  bit_ratio speech_ratio_vs_raw;
  bit_ratio speech_ratio_vs_mel;
};

inline bits_report report(const bits_config &cfg) {
  bits_report r;
  r.raw_image_bits = bits_raw_image(cfg.image_h, cfg.image_w, cfg.channels, cfg.pixel_depth);
  r.image_unit_bits = bits_image_units(cfg.image_h, cfg.image_w, cfg.patch, cfg.image_codebook);
  r.raw_audio_bits = bits_raw_audio(cfg.duration_s, cfg.sample_rate, cfg.audio_depth);
  r.mel_bits = bits_mel(cfg.duration_s, cfg.mel_fps, cfg.mel_dims, cfg.mel_depth);
  const std::uint64_t pre_len = speech_unit_count(cfg.duration_s, cfg.sample_rate, cfg.factor);
  const std::uint64_t post_len = cfg.dedup_length.value_or(pre_len);
  detail::require(post_len <= pre_len, "report: dedup length exceeds the pre-dedup unit count");
  r.speech_unit_bits_prededup = bits_speech_units(cfg.duration_s, cfg.sample_rate, cfg.factor, cfg.unit_vocab);
  r.speech_unit_bits_postdedup =
      bits_speech_units(cfg.duration_s, cfg.sample_rate, cfg.factor, cfg.unit_vocab, post_len);
  r.image_ratio = {r.image_unit_bits, r.raw_image_bits};
  r.speech_ratio_vs_raw = {r.speech_unit_bits_prededup, r.raw_audio_bits};
  r.speech_ratio_vs_mel = {r.speech_unit_bits_prededup, r.mel_bits};
  return r;
}

inline std::string format_table(const bits_report &r) {
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "%-28s %14s %12s\n"
                "%-28s %14llu %12s\n"
                "%-28s %14llu %12s\n"
                "%-28s %14llu %12s\n"
                "%-28s %14llu %12s\n"
                "%-28s %14llu %12s\n"
                "%-28s %14llu %12s\n",
                "representation", "bits", "ratio", "raw image", static_cast<unsigned long long>(r.raw_image_bits),
                "100.0%", "image units", static_cast<unsigned long long>(r.image_unit_bits),
                r.image_ratio.percent_string().c_str(), "raw audio", static_cast<unsigned long long>(r.raw_audio_bits),
                "100.0%", "mel spectrogram", static_cast<unsigned long long>(r.mel_bits), "-",
                "speech units", static_cast<unsigned long long>(r.speech_unit_bits_prededup),
                r.speech_ratio_vs_raw.percent_string().c_str(), "speech units (dedup)",
                static_cast<unsigned long long>(r.speech_unit_bits_postdedup),
                bit_ratio{r.speech_unit_bits_postdedup, r.raw_audio_bits}.percent_string().c_str());
  return buf;
}

inline std::string format_key_values(const bits_report &r) {
  auto ratio = [](const char *key, const bit_ratio &q) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s=%llu/%llu\n%s_value=%.10g\n%s_percent=%s\n", key,
                  static_cast<unsigned long long>(q.num), static_cast<unsigned long long>(q.den), key, q.value(), key,
                  q.percent_string().c_str());
    return std::string(buf);
  };
  std::string out;
  out += "raw_image_bits=" + std::to_string(r.raw_image_bits) + "\n";
  out += "image_unit_bits=" + std::to_string(r.image_unit_bits) + "\n";
  out += "raw_audio_bits=" + std::to_string(r.raw_audio_bits) + "\n";
  out += "mel_bits=" + std::to_string(r.mel_bits) + "\n";
  out += "speech_unit_bits_prededup=" + std::to_string(r.speech_unit_bits_prededup) + "\n";
  out += "speech_unit_bits_postdedup=" + std::to_string(r.speech_unit_bits_postdedup) + "\n";
  out += ratio("image_ratio", r.image_ratio);
  out += ratio("speech_ratio_vs_raw", r.speech_ratio_vs_raw);
  out += ratio("speech_ratio_vs_mel", r.speech_ratio_vs_mel);
  return out;
}

} // namespace im2sp
