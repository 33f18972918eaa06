#pragma once

#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include <im2sp/im2sp.hpp>

namespace im2sp::testing {

// d_model 8, one layer: small enough for exhaustive finite differences.
inline model_config tiny_config(output_kind out = output_kind::units) {
  model_config c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ff_dim = 16;
  c.grid_h = 2;
  c.grid_w = 3;
  c.max_unit_len = 8;
  c.unit_vocab = 5;
  c.text_vocab = 4;
  c.image_vocab = 7;
  c.output = out;
  return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class scratch_dir {
public:
  explicit scratch_dir(const std::string &tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("im2sp_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~scratch_dir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  scratch_dir(const scratch_dir &) = delete;
  scratch_dir &operator=(const scratch_dir &) = delete;

  std::string file(const std::string &name) const { return (path_ / name).string(); }
  const std::filesystem::path &path() const { return path_; }

private:
  std::filesystem::path path_;
};

} // namespace im2sp::testing
