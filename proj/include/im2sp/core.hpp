#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"

namespace im2sp {

using unit_id = std::uint32_t;

/// Number of bits needed to store one token of a vocabulary of the given size,
/// i.e. ceil(log2(vocab_size)). A vocabulary of one needs zero bits.
constexpr unsigned bits_per_token(std::uint64_t vocab_size) {
  unsigned bits = 0;
  while (bits < 64 && (std::uint64_t{1} << bits) < vocab_size)
    ++bits;
  return bits;
}

/// Ordered discrete token ids over [0, vocab_size).
///
/// Whether the sequence has had repetitions collapsed is carried explicitly,
/// since dedup is lossy and cannot be recovered from the tokens alone.
class unit_sequence {
public:
  unit_sequence() = default;

  unit_sequence(std::vector<unit_id> tokens, std::uint32_t vocab_size, bool deduplicated = false)
      : tokens_(std::move(tokens)), vocab_size_(vocab_size), deduplicated_(deduplicated) {
    detail::require(vocab_size_ >= 1, "unit_sequence: vocab_size must be >= 1");
    for (unit_id t : tokens_)
      if (t >= vocab_size_)
        throw invalid_argument("unit_sequence: token " + std::to_string(t) +
                               " out of range for vocab " + std::to_string(vocab_size_));
    if (deduplicated_)
      for (std::size_t i = 1; i < tokens_.size(); ++i)
        detail::require(tokens_[i] != tokens_[i - 1],
                        "unit_sequence: deduplicated sequence has adjacent repeats");
  }

  const std::vector<unit_id> &tokens() const { return tokens_; }
  std::uint32_t vocab_size() const { return vocab_size_; }
  bool deduplicated() const { return deduplicated_; }
  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  unit_id operator[](std::size_t i) const { return tokens_[i]; }

  /// Bits of the fixed-width packed payload.
  std::uint64_t payload_bits() const { return tokens_.size() * bits_per_token(vocab_size_); }

  friend bool operator==(const unit_sequence &, const unit_sequence &) = default;

private:
  std::vector<unit_id> tokens_;
  std::uint32_t vocab_size_ = 1;
  bool deduplicated_ = false;
};

/// Dense row-major matrix of 32-bit reals.
struct matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  matrix() = default;
  matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
  matrix(std::size_t r, std::size_t c, std::vector<float> values)
      : rows(r), cols(c), data(std::move(values)) {
    detail::require(data.size() == rows * cols, "matrix: value count does not match shape");
  }

  std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  float operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  float &operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const matrix &, const matrix &) = default;
};

/// K centroids of dimension dim; the quantizer for either modality.
class codebook {
public:
  explicit codebook(matrix centroids) : centroids_(std::move(centroids)) {
    detail::require(centroids_.rows >= 1, "codebook: K must be >= 1");
    detail::require(centroids_.cols >= 1, "codebook: dim must be >= 1");
    detail::require(centroids_.all_finite(), "codebook: centroid entries must be finite");
  }

  std::size_t size() const { return centroids_.rows; }
  std::size_t dim() const { return centroids_.cols; }
  std::span<const float> centroid(std::size_t k) const { return centroids_.row(k); }
  const matrix &centroids() const { return centroids_; }

  friend bool operator==(const codebook &, const codebook &) = default;

private:
  matrix centroids_;
};

/// Continuous per-frame features prior to quantization.
class feature_sequence {
public:
  feature_sequence(matrix frames, double frame_rate_hz = 50.0)
      : frames_(std::move(frames)), frame_rate_hz_(frame_rate_hz) {
    detail::require(frame_rate_hz_ > 0.0, "feature_sequence: frame rate must be positive");
    detail::require(frames_.all_finite(), "feature_sequence: entries must be finite");
  }

  std::size_t length() const { return frames_.rows; }
  std::size_t dim() const { return frames_.cols; }
  double frame_rate_hz() const { return frame_rate_hz_; }
  std::span<const float> frame(std::size_t t) const { return frames_.row(t); }
  const matrix &frames() const { return frames_; }

private:
  matrix frames_;
  double frame_rate_hz_;
};

/// Collapses runs of identical adjacent units to a single unit.
inline unit_sequence dedup(const unit_sequence &seq) {
  std::vector<unit_id> out;
  out.reserve(seq.size());
  for (unit_id t : seq.tokens())
    if (out.empty() || out.back() != t)
      out.push_back(t);
  return unit_sequence(std::move(out), seq.vocab_size(), true);
}

// ---------------------------------------------------------------------------
// Binary encoding
// ---------------------------------------------------------------------------

namespace detail {

class byte_writer {
public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> &buffer() { return buf_; }

private:
  std::vector<std::uint8_t> buf_;
};

class byte_reader {
public:
  byte_reader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  void expect_magic(std::string_view magic) {
    need(magic.size());
    if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0)
      throw format_error(what_ + ": bad magic, expected \"" + std::string(magic) + "\"");
    pos_ += magic.size();
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const {
    if (remaining() != 0)
      throw format_error(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
  const std::string &what() const { return what_; }

private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n)
      throw format_error(what_ + ": truncated");
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw format_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string &path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw format_error("cannot write " + path);
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw format_error("write failed: " + path);
}

} // namespace detail

// Unit stream: "UCU1" | u8 version | u32 vocab_size | u32 length | packed tokens.
// Tokens are packed at bits_per_token(vocab_size) bits each, least significant
// bit first, zero-padded to a byte boundary.

inline constexpr std::uint8_t unit_stream_version = 1;
inline constexpr std::size_t unit_stream_header_bytes = 4 + 1 + 4 + 4;

inline std::vector<std::uint8_t> encode_units(const unit_sequence &seq) {
  detail::byte_writer w;
  w.bytes("UCU1");
  w.u8(unit_stream_version);
  w.u32(seq.vocab_size());
  w.u32(static_cast<std::uint32_t>(seq.size()));
  const unsigned width = bits_per_token(seq.vocab_size());
  auto &buf = w.buffer();
  const std::size_t header = buf.size();
  buf.resize(header + (seq.payload_bits() + 7) / 8, 0);
  std::uint64_t bit = 0;
  for (unit_id t : seq.tokens())
    for (unsigned b = 0; b < width; ++b, ++bit)
      if ((t >> b) & 1u)
        buf[header + bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  return std::move(buf);
}

/// Decodes a unit stream. The dedup flag is not stored, so the result is
/// marked deduplicated only if the caller says so.
inline unit_sequence decode_units(std::span<const std::uint8_t> bytes, bool deduplicated = false) {
  detail::byte_reader r(bytes, "unit stream");
  r.expect_magic("UCU1");
  if (const auto v = r.u8(); v != unit_stream_version)
    throw format_error("unit stream: unsupported version " + std::to_string(v));
  const std::uint32_t vocab = r.u32();
  const std::uint32_t length = r.u32();
  if (vocab == 0)
    throw format_error("unit stream: vocab_size 0");
  const unsigned width = bits_per_token(vocab);
  const std::uint64_t payload_bytes = (std::uint64_t{length} * width + 7) / 8;
  if (r.remaining() < payload_bytes)
    throw format_error("unit stream: truncated payload");
  auto payload = r.take(payload_bytes);
  r.expect_end();
  std::vector<unit_id> tokens(length);
  std::uint64_t bit = 0;
  for (auto &t : tokens) {
    std::uint32_t v = 0;
    for (unsigned b = 0; b < width; ++b, ++bit)
      v |= static_cast<std::uint32_t>((payload[bit / 8] >> (bit % 8)) & 1u) << b;
    if (v >= vocab)
      throw format_error("unit stream: token " + std::to_string(v) + " >= vocab_size " +
                         std::to_string(vocab));
    t = v;
  }
  try {
    return unit_sequence(std::move(tokens), vocab, deduplicated);
  } catch (const invalid_argument &e) {
    throw format_error(std::string("unit stream: ") + e.what());
  }
}

inline void save_units(const std::string &path, const unit_sequence &seq) {
  detail::write_file_bytes(path, encode_units(seq));
}

inline unit_sequence load_units(const std::string &path, bool deduplicated = false) {
  return decode_units(detail::read_file_bytes(path), deduplicated);
}

// Codebook: "UCB1" | u8 version | u32 K | u32 dim | K*dim little-endian f32.

inline constexpr std::uint8_t codebook_version = 1;
inline constexpr std::size_t codebook_header_bytes = 4 + 1 + 4 + 4;

inline std::vector<std::uint8_t> encode_codebook(const codebook &cb) {
  detail::byte_writer w;
  w.bytes("UCB1");
  w.u8(codebook_version);
  w.u32(static_cast<std::uint32_t>(cb.size()));
  w.u32(static_cast<std::uint32_t>(cb.dim()));
  for (float v : cb.centroids().data)
    w.f32(v);
  return std::move(w.buffer());
}

inline codebook decode_codebook(std::span<const std::uint8_t> bytes) {
  detail::byte_reader r(bytes, "codebook");
  r.expect_magic("UCB1");
  if (const auto v = r.u8(); v != codebook_version)
    throw format_error("codebook: unsupported version " + std::to_string(v));
  const std::uint32_t k = r.u32();
  const std::uint32_t dim = r.u32();
  if (k == 0 || dim == 0)
    throw format_error("codebook: K and dim must be >= 1");
  if (r.remaining() != std::uint64_t{k} * dim * 4)
    throw format_error("codebook: payload size does not match K x dim");
  matrix m(k, dim);
  for (float &v : m.data) {
    v = r.f32();
    if (!std::isfinite(v))
      throw format_error("codebook: non-finite centroid entry");
  }
  return codebook(std::move(m));
}

inline void save_codebook(const std::string &path, const codebook &cb) {
  detail::write_file_bytes(path, encode_codebook(cb));
}

inline codebook load_codebook(const std::string &path) {
  return decode_codebook(detail::read_file_bytes(path));
}

// Feature matrix: "UFM1" | u32 T | u32 dim | T*dim little-endian f32,
// or delimited text with one frame per line.

inline std::vector<std::uint8_t> encode_features(const feature_sequence &f) {
  detail::byte_writer w;
  w.bytes("UFM1");
  w.u32(static_cast<std::uint32_t>(f.length()));
  w.u32(static_cast<std::uint32_t>(f.dim()));
  for (float v : f.frames().data)
    w.f32(v);
  return std::move(w.buffer());
}

inline feature_sequence decode_features(std::span<const std::uint8_t> bytes,
                                        double frame_rate_hz = 50.0) {
  detail::byte_reader r(bytes, "feature file");
  r.expect_magic("UFM1");
  const std::uint32_t t = r.u32();
  const std::uint32_t dim = r.u32();
  if (r.remaining() != std::uint64_t{t} * dim * 4)
    throw format_error("feature file: payload size does not match T x dim");
  matrix m(t, dim);
  for (float &v : m.data) {
    v = r.f32();
    if (!std::isfinite(v))
      throw format_error("feature file: non-finite entry");
  }
  return feature_sequence(std::move(m), frame_rate_hz);
}

/// Parses text features: one frame per line, values separated by whitespace
/// or commas. Blank lines and lines starting with '#' are skipped.
inline feature_sequence parse_text_features(std::string_view text, double frame_rate_hz = 50.0) {
  std::vector<float> values;
  std::size_t rows = 0, cols = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::string tok;
    std::size_t n = 0;
    while (ls >> tok) {
      if (n == 0 && tok[0] == '#')
        break;
      float v;
      try {
        std::size_t used = 0;
        v = std::stof(tok, &used);
        if (used != tok.size())
          throw std::invalid_argument(tok);
      } catch (const std::exception &) {
        throw format_error("feature text: bad number \"" + tok + "\" on line " + std::to_string(lineno));
      }
      if (!std::isfinite(v))
        throw format_error("feature text: non-finite entry on line " + std::to_string(lineno));
      values.push_back(v);
      ++n;
    }
    if (n == 0)
      continue;
    if (rows == 0)
      cols = n;
    else if (n != cols)
      throw format_error("feature text: line " + std::to_string(lineno) + " has " +
                         std::to_string(n) + " values, expected " + std::to_string(cols));
    ++rows;
  }
  return feature_sequence(matrix(rows, cols, std::move(values)), frame_rate_hz);
}

inline void save_features(const std::string &path, const feature_sequence &f) {
  detail::write_file_bytes(path, encode_features(f));
}

/// Loads a feature file, detecting the binary form by its magic.
inline feature_sequence load_features(const std::string &path, double frame_rate_hz = 50.0) {
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "UFM1", 4) == 0)
    return decode_features(bytes, frame_rate_hz);
  return parse_text_features(std::string_view(reinterpret_cast<const char *>(bytes.data()), bytes.size()),
                             frame_rate_hz);
}

} // namespace im2sp
