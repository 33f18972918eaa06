#pragma once

#include <map>
#include <string>
#include <vector>

#include "config.hpp"
#include "core.hpp"
#include "model.hpp"

namespace im2sp {

// Checkpoint: "UCKP" | u8 version | u32 n | n bytes of key=value config text
//             | u32 tensor count | per tensor: u32 name length, name,
//               u32 rank, rank x u32 dims, little-endian f32 values.
// Parameters are held in double precision and stored rounded to f32.

inline constexpr std::uint8_t checkpoint_version = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const model_params &p) {
  kv_config kv = p.config.to_kv();
  std::string frozen;
  for (const auto &name : p.frozen)
    frozen += (frozen.empty() ? "" : ",") + name;
  kv.set("frozen", frozen);
  const std::string text = kv.to_string();

  detail::byte_writer w;
  w.bytes("UCKP");
  w.u8(checkpoint_version);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  std::uint32_t count = 0;
  for_each_tensor(p, [&](const std::string &, const tensor &) { ++count; });
  w.u32(count);
  for_each_tensor(p, [&](const std::string &name, const tensor &t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i)
      w.f32(static_cast<float>(t.data()[i]));
  });
  return std::move(w.buffer());
}

inline model_params decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::byte_reader r(bytes, "checkpoint");
  r.expect_magic("UCKP");
  if (const auto v = r.u8(); v != checkpoint_version)
    throw format_error("checkpoint: unsupported version " + std::to_string(v));
  const auto text_bytes = r.take(r.u32());
  const kv_config kv =
      kv_config::parse(std::string_view(reinterpret_cast<const char *>(text_bytes.data()), text_bytes.size()));
  model_config cfg = model_config::from_kv(kv);
  try {
    cfg.validate();
  } catch (const invalid_argument &e) {
    throw format_error(std::string("checkpoint: ") + e.what());
  }

  std::map<std::string, tensor> stored;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_bytes = r.take(r.u32());
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint32_t rank = r.u32();
    if (rank != 2)
      throw format_error("checkpoint: tensor " + name + " has unsupported rank " + std::to_string(rank));
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (std::uint64_t{rows} * cols * 4 > r.remaining())
      throw format_error("checkpoint: truncated tensor " + name);
    tensor t(rows, cols);
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      t.data()[j] = r.f32();
      if (!std::isfinite(t.data()[j]))
        throw format_error("checkpoint: non-finite value in " + name);
    }
    stored[std::move(name)] = std::move(t);
  }
  r.expect_end();

  model_params p = init_random(cfg, 0);
  for_each_tensor(p, [&](const std::string &name, tensor &t) {
    auto it = stored.find(name);
    if (it == stored.end())
      throw format_error("checkpoint: missing tensor " + name);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols())
      throw format_error("checkpoint: tensor " + name + " has the wrong shape");
    t = std::move(it->second);
    stored.erase(it);
  });
  if (!stored.empty())
    throw format_error("checkpoint: unexpected tensor " + stored.begin()->first);

  const std::string frozen = kv.get("frozen", "");
  std::size_t pos = 0;
  while (pos < frozen.size()) {
    const auto comma = frozen.find(',', pos);
    p.frozen.insert(frozen.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    if (comma == std::string::npos)
      break;
    pos = comma + 1;
  }
  return p;
}

inline void save_checkpoint(const std::string &path, const model_params &p) {
  detail::write_file_bytes(path, encode_checkpoint(p));
}

inline model_params load_checkpoint(const std::string &path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

} // namespace im2sp
