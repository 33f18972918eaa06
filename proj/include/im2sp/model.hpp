#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "config.hpp"
#include "core.hpp"
#include "random.hpp"

namespace im2sp {

using tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Which vocabulary the decoder emits.
enum class output_kind { units, text };

/// Architecture of the unit decoder. Output ids are the base vocabulary
/// followed by three specials: BOS, EOS, PAD.
struct model_config {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ff_dim = 256;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t max_unit_len = 64;
  std::size_t unit_vocab = 32;
  std::size_t text_vocab = 30;
  std::size_t image_vocab = 64;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  output_kind output = output_kind::units;

  std::size_t max_image_tokens() const { return grid_h * grid_w; }
  std::size_t base_vocab() const { return output == output_kind::units ? unit_vocab : text_vocab; }
  std::size_t output_vocab() const { return base_vocab() + 3; }
  unit_id bos() const { return static_cast<unit_id>(base_vocab()); }
  unit_id eos() const { return static_cast<unit_id>(base_vocab() + 1); }
  unit_id pad() const { return static_cast<unit_id>(base_vocab() + 2); }
  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    detail::require(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0,
                    "model_config: d_model must be a positive multiple of n_heads");
    detail::require(n_layers >= 1 && ff_dim >= 1, "model_config: n_layers and ff_dim must be >= 1");
    detail::require(grid_h >= 1 && grid_w >= 1 && max_unit_len >= 1, "model_config: max lengths must be >= 1");
    detail::require(unit_vocab >= 1 && text_vocab >= 1 && image_vocab >= 1, "model_config: vocabularies must be >= 1");
    detail::require(dropout >= 0.0 && dropout < 1.0, "model_config: dropout must be in [0, 1)");
  }

  kv_config to_kv() const {
    kv_config kv;
    kv.set("d_model", d_model);
    kv.set("n_layers", n_layers);
    kv.set("n_heads", n_heads);
    kv.set("ff_dim", ff_dim);
    kv.set("grid_h", grid_h);
    kv.set("grid_w", grid_w);
    kv.set("max_unit_len", max_unit_len);
    kv.set("unit_vocab", unit_vocab);
    kv.set("text_vocab", text_vocab);
    kv.set("image_vocab", image_vocab);
    kv.set("dropout", dropout);
    kv.set("seed", seed);
    kv.set("output", std::string(output == output_kind::units ? "units" : "text"));
    return kv;
  }

  /// Reads recognised keys from kv, keeping the current value for absent ones.
  static model_config from_kv(const kv_config &kv) { return from_kv(kv, model_config{}); }
  static model_config from_kv(const kv_config &kv, model_config base) {
    model_config c = base;
    c.d_model = kv.get_uint("d_model", c.d_model);
    c.n_layers = kv.get_uint("n_layers", c.n_layers);
    c.n_heads = kv.get_uint("n_heads", c.n_heads);
    c.ff_dim = kv.get_uint("ff_dim", c.ff_dim);
    c.grid_h = kv.get_uint("grid_h", c.grid_h);
    c.grid_w = kv.get_uint("grid_w", c.grid_w);
    c.max_unit_len = kv.get_uint("max_unit_len", c.max_unit_len);
    c.unit_vocab = kv.get_uint("unit_vocab", c.unit_vocab);
    c.text_vocab = kv.get_uint("text_vocab", c.text_vocab);
    c.image_vocab = kv.get_uint("image_vocab", c.image_vocab);
    c.dropout = kv.get_double("dropout", c.dropout);
    c.seed = kv.get_uint("seed", c.seed);
    const std::string out = kv.get("output", c.output == output_kind::units ? "units" : "text");
    if (out != "units" && out != "text")
      throw format_error("model config: output must be units or text, got \"" + out + "\"");
    c.output = out == "units" ? output_kind::units : output_kind::text;
    return c;
  }

  friend bool operator==(const model_config &, const model_config &) = default;
};

/// Full-scale architecture: 6-layer decoder, 224x224 input tokenised at a
/// factor of 8 into 8,192 image units, 200 speech units. Recorded for
/// reference; the desk-scale tests do not exercise it.
inline model_config paper_scale_config() {
  model_config c;
  c.d_model = 768;
  c.n_layers = 6;
  c.n_heads = 12;
  c.ff_dim = 3072;
  c.grid_h = 28;
  c.grid_w = 28;
  c.max_unit_len = 512;
  c.unit_vocab = 200;
  c.image_vocab = 8192;
  return c;
}

struct block_params {
  tensor ln1_g, ln1_b;
  tensor w_qkv, b_qkv;
  tensor w_o, b_o;
  tensor ln2_g, ln2_b;
  tensor w_ff1, b_ff1;
  tensor w_ff2, b_ff2;
};

/// Decoder weights. Also used as the gradient container (same shapes).
struct model_params {
  model_config config;
  tensor image_embed;   // image_vocab x d
  tensor image_row_pos; // grid_h x d
  tensor image_col_pos; // grid_w x d
  tensor token_embed;   // (base vocab + 3) x d
  tensor token_pos;     // (max_unit_len + 1) x d
  std::vector<block_params> blocks;
  tensor final_ln_g, final_ln_b;
  tensor w_out, b_out; // d x (base vocab + 3), 1 x (base vocab + 3)
  /// Names of tensors that training must leave untouched.
  std::set<std::string> frozen;

  bool is_frozen(const std::string &name) const { return frozen.count(name) != 0; }
};

/// Calls fn(name, tensor) for every tensor in a fixed order.
template <class Params, class Fn> void for_each_tensor(Params &p, Fn &&fn) {
  fn(std::string("image_embed"), p.image_embed);
  fn(std::string("image_row_pos"), p.image_row_pos);
  fn(std::string("image_col_pos"), p.image_col_pos);
  fn(std::string("token_embed"), p.token_embed);
  fn(std::string("token_pos"), p.token_pos);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto &b = p.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    fn(pre + "ln1_g", b.ln1_g);
    fn(pre + "ln1_b", b.ln1_b);
    fn(pre + "w_qkv", b.w_qkv);
    fn(pre + "b_qkv", b.b_qkv);
    fn(pre + "w_o", b.w_o);
    fn(pre + "b_o", b.b_o);
    fn(pre + "ln2_g", b.ln2_g);
    fn(pre + "ln2_b", b.ln2_b);
    fn(pre + "w_ff1", b.w_ff1);
    fn(pre + "b_ff1", b.b_ff1);
    fn(pre + "w_ff2", b.w_ff2);
    fn(pre + "b_ff2", b.b_ff2);
  }
  fn(std::string("final_ln_g"), p.final_ln_g);
  fn(std::string("final_ln_b"), p.final_ln_b);
  fn(std::string("w_out"), p.w_out);
  fn(std::string("b_out"), p.b_out);
}

/// The image-unit input path (embedding table plus 2-D positions).
inline const std::set<std::string> &image_path_tensors() {
  static const std::set<std::string> names{"image_embed", "image_row_pos", "image_col_pos"};
  return names;
}

inline model_params zeros_like(const model_params &p) {
  model_params z = p;
  for_each_tensor(z, [](const std::string &, tensor &t) { t.setZero(); });
  return z;
}

inline bool all_finite(const model_params &p) {
  bool ok = true;
  for_each_tensor(p, [&](const std::string &, const tensor &t) { ok = ok && t.allFinite(); });
  return ok;
}

namespace detail {

inline void fill_uniform(tensor &t, rng &gen, double scale) {
  for (Eigen::Index i = 0; i < t.size(); ++i)
    t.data()[i] = gen.uniform(-scale, scale);
}

inline constexpr double embed_scale = 0.3;

inline void init_output_layer(model_params &p, rng &gen) {
  const auto &c = p.config;
  const auto d = static_cast<Eigen::Index>(c.d_model), v = static_cast<Eigen::Index>(c.output_vocab());
  p.token_embed.resize(v, d);
  fill_uniform(p.token_embed, gen, embed_scale);
  p.w_out.resize(d, v);
  fill_uniform(p.w_out, gen, 1.0 / std::sqrt(static_cast<double>(d)));
  p.b_out = tensor::Zero(1, v);
}

} // namespace detail

/// Seeded scaled-uniform initialisation: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// residual output projections further scaled by 1/sqrt(2 n_layers),
/// embeddings U(-0.3, 0.3), layer-norm gains 1 and all biases 0.
inline model_params init_random(const model_config &cfg, std::uint64_t seed) {
  cfg.validate();
  rng gen(seed);
  model_params p;
  p.config = cfg;
  const auto d = static_cast<Eigen::Index>(cfg.d_model), ff = static_cast<Eigen::Index>(cfg.ff_dim);
  auto uniform = [&](Eigen::Index r, Eigen::Index c, double scale) {
    tensor t(r, c);
    detail::fill_uniform(t, gen, scale);
    return t;
  };
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_ff = 1.0 / std::sqrt(static_cast<double>(ff));
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  p.image_embed = uniform(static_cast<Eigen::Index>(cfg.image_vocab), d, detail::embed_scale);
  p.image_row_pos = uniform(static_cast<Eigen::Index>(cfg.grid_h), d, detail::embed_scale);
  p.image_col_pos = uniform(static_cast<Eigen::Index>(cfg.grid_w), d, detail::embed_scale);
  p.token_pos = uniform(static_cast<Eigen::Index>(cfg.max_unit_len + 1), d, detail::embed_scale);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    block_params b;
    b.ln1_g = tensor::Ones(1, d);
    b.ln1_b = tensor::Zero(1, d);
    b.w_qkv = uniform(d, 3 * d, inv_d);
    b.b_qkv = tensor::Zero(1, 3 * d);
    b.w_o = uniform(d, d, inv_d * resid);
    b.b_o = tensor::Zero(1, d);
    b.ln2_g = tensor::Ones(1, d);
    b.ln2_b = tensor::Zero(1, d);
    b.w_ff1 = uniform(d, ff, inv_d);
    b.b_ff1 = tensor::Zero(1, ff);
    b.w_ff2 = uniform(ff, d, inv_ff * resid);
    b.b_ff2 = tensor::Zero(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.final_ln_g = tensor::Ones(1, d);
  p.final_ln_b = tensor::Zero(1, d);
  detail::init_output_layer(p, gen);
  return p;
}

/// Builds a unit decoder from a model pretrained on another output vocabulary.
///
/// Transformer blocks, the image-unit path, output positions and the final
/// norm are copied; the output-token embedding and projection are drawn
/// fresh for cfg_units' vocabulary (seeded by cfg_units.seed). The image-unit
/// path is marked frozen.
inline model_params init_transfer(const model_params &pretrained, const model_config &cfg_units) {
  cfg_units.validate();
  const auto &src = pretrained.config;
  if (src.d_model != cfg_units.d_model || src.n_layers != cfg_units.n_layers || src.n_heads != cfg_units.n_heads ||
      src.ff_dim != cfg_units.ff_dim || src.grid_h != cfg_units.grid_h || src.grid_w != cfg_units.grid_w ||
      src.image_vocab != cfg_units.image_vocab || src.max_unit_len != cfg_units.max_unit_len)
    throw invalid_argument("init_transfer: pretrained model dimensions do not match the target config");
  model_params p = pretrained;
  p.config = cfg_units;
  rng gen(derive_seed(cfg_units.seed, 0x7472616e73666572ULL));
  detail::init_output_layer(p, gen);
  p.frozen = image_path_tensors();
  return p;
}

/// One training pair: flattened image units (row-major over the grid) and
/// the target token sequence, without BOS/EOS.
struct sequence_example {
  std::vector<unit_id> image_tokens;
  std::vector<unit_id> target;
};

namespace detail {

inline constexpr double ln_eps = 1e-5;

struct ln_cache {
  tensor xhat;
  Eigen::VectorXd rstd;
};

inline tensor layer_norm(const tensor &x, const tensor &g, const tensor &b, ln_cache *cache) {
  const auto d = static_cast<double>(x.cols());
  const Eigen::VectorXd mean = x.rowwise().sum() / d;
  tensor xhat = x.colwise() - mean;
  const Eigen::VectorXd rstd = ((xhat.array().square().rowwise().sum() / d) + ln_eps).rsqrt();
  xhat = rstd.asDiagonal() * xhat;
  tensor y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = rstd;
  }
  return y;
}

inline tensor layer_norm_backward(const tensor &dy, const tensor &g, const ln_cache &c, tensor &dg, tensor &db) {
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const auto d = static_cast<double>(dy.cols());
  const tensor dxhat = dy.array().rowwise() * g.row(0).array();
  const Eigen::VectorXd m1 = dxhat.rowwise().sum() / d;
  const Eigen::VectorXd m2 = (dxhat.array() * c.xhat.array()).rowwise().sum() / d;
  tensor dx = (dxhat.colwise() - m1) - m2.asDiagonal() * c.xhat;
  return c.rstd.asDiagonal() * dx;
}

inline constexpr double gelu_k = 0.7978845608028654; // sqrt(2 / pi)
inline constexpr double gelu_c = 0.044715;

// tanh-approximated GELU; t receives tanh(k (x + c x^3)) for the backward pass.
inline tensor gelu(const tensor &x, tensor &t) {
  const auto z = gelu_k * (x.array() + gelu_c * x.array().cube());
  t = 1.0 - 2.0 / ((2.0 * z).exp() + 1.0);
  return 0.5 * x.array() * (1.0 + t.array());
}

inline tensor gelu_grad(const tensor &x, const tensor &t) {
  return 0.5 * (1.0 + t.array()) +
         0.5 * x.array() * (1.0 - t.array().square()) * gelu_k * (1.0 + 3.0 * gelu_c * x.array().square());
}

struct block_cache {
  tensor x_in;
  ln_cache ln1;
  tensor a;   // ln1 output
  tensor qkv; // L x 3d
  std::vector<tensor> probs;
  tensor heads; // concatenated head outputs, L x d
  tensor attn_mask, ff_mask; // dropout masks; empty when inactive
  tensor h;
  ln_cache ln2;
  tensor b; // ln2 output
  tensor f1;
  tensor f1_tanh;
  tensor g;
};

// Forward state for one example. Sequence layout: [image units][BOS, targets].
struct forward_state {
  std::size_t prefix = 0;
  std::size_t outputs = 0;
  std::vector<unit_id> image_tokens;
  std::vector<unit_id> inputs; // BOS followed by targets
  std::vector<block_cache> blocks;
  tensor x_final;
  ln_cache final_ln;
  tensor y_final;
  tensor logits; // outputs x output_vocab
};

inline void check_example(const model_config &c, std::span<const unit_id> image_tokens,
                          std::span<const unit_id> targets) {
  if (image_tokens.size() > c.max_image_tokens())
    throw invalid_argument("model: " + std::to_string(image_tokens.size()) + " image tokens exceeds maximum " +
                           std::to_string(c.max_image_tokens()));
  for (unit_id t : image_tokens)
    if (t >= c.image_vocab)
      throw invalid_argument("model: image unit " + std::to_string(t) + " out of range for vocabulary " +
                             std::to_string(c.image_vocab));
  if (targets.size() > c.max_unit_len)
    throw invalid_argument("model: target length " + std::to_string(targets.size()) + " exceeds max_unit_len " +
                           std::to_string(c.max_unit_len));
  for (unit_id t : targets)
    if (t >= c.base_vocab())
      throw invalid_argument("model: target token " + std::to_string(t) + " out of range for vocabulary " +
                             std::to_string(c.base_vocab()));
}

/// Runs the decoder over [image units][BOS, decoder_tokens...] and fills
/// st.logits with one row per decoder input position. When train_rng is
/// given and dropout > 0, dropout is applied to both residual branches.
inline void forward(const model_params &p, std::span<const unit_id> image_tokens,
                    std::span<const unit_id> decoder_tokens, forward_state &st, rng *train_rng = nullptr) {
  const auto &c = p.config;
  const std::size_t m = image_tokens.size();
  const std::size_t n_out = decoder_tokens.size() + 1;
  if (n_out > c.max_unit_len + 1)
    throw invalid_argument("model: decoder input longer than max_unit_len + 1");
  const auto seq = static_cast<Eigen::Index>(m + n_out);
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool use_dropout = train_rng && c.dropout > 0.0;

  st.prefix = m;
  st.outputs = n_out;
  st.image_tokens.assign(image_tokens.begin(), image_tokens.end());
  st.inputs.clear();
  st.inputs.push_back(c.bos());
  st.inputs.insert(st.inputs.end(), decoder_tokens.begin(), decoder_tokens.end());

  tensor x(seq, d);
  for (std::size_t i = 0; i < m; ++i)
    x.row(static_cast<Eigen::Index>(i)) = p.image_embed.row(image_tokens[i]) +
                                          p.image_row_pos.row(static_cast<Eigen::Index>(i / c.grid_w)) +
                                          p.image_col_pos.row(static_cast<Eigen::Index>(i % c.grid_w));
  for (std::size_t j = 0; j < n_out; ++j)
    x.row(static_cast<Eigen::Index>(m + j)) =
        p.token_embed.row(st.inputs[j]) + p.token_pos.row(static_cast<Eigen::Index>(j));

  auto dropout_mask = [&](Eigen::Index rows, Eigen::Index cols) {
    tensor mask(rows, cols);
    const double keep = 1.0 - c.dropout;
    for (Eigen::Index i = 0; i < mask.size(); ++i)
      mask.data()[i] = train_rng->uniform() < keep ? 1.0 / keep : 0.0;
    return mask;
  };

  st.blocks.resize(p.blocks.size());
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto &bp = p.blocks[l];
    auto &bc = st.blocks[l];
    bc.x_in = x;
    bc.a = layer_norm(x, bp.ln1_g, bp.ln1_b, &bc.ln1);
    bc.qkv.noalias() = bc.a * bp.w_qkv;
    bc.qkv.rowwise() += bp.b_qkv.row(0);
    bc.heads.resize(seq, d);
    bc.probs.resize(c.n_heads);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const auto off = static_cast<Eigen::Index>(hd) * dh;
      tensor scores;
      scores.noalias() = bc.qkv.middleCols(off, dh) * bc.qkv.middleCols(d + off, dh).transpose();
      tensor &prob = bc.probs[hd];
      prob = tensor::Zero(seq, seq);
      for (Eigen::Index i = 0; i < seq; ++i) {
        // image positions see the whole image; decoder positions see the
        // image and every earlier decoder position
        const Eigen::Index lim = static_cast<std::size_t>(i) < m ? static_cast<Eigen::Index>(m) : i + 1;
        auto row = scores.row(i).head(lim).array();
        prob.row(i).head(lim) = ((row - row.maxCoeff()) * scale).exp().matrix();
        prob.row(i).head(lim) /= prob.row(i).head(lim).sum();
      }
      bc.heads.middleCols(off, dh).noalias() = prob * bc.qkv.middleCols(2 * d + off, dh);
    }
    tensor attn;
    attn.noalias() = bc.heads * bp.w_o;
    attn.rowwise() += bp.b_o.row(0);
    if (use_dropout) {
      bc.attn_mask = dropout_mask(seq, d);
      attn.array() *= bc.attn_mask.array();
    } else {
      bc.attn_mask.resize(0, 0);
    }
    bc.h = x + attn;

    bc.b = layer_norm(bc.h, bp.ln2_g, bp.ln2_b, &bc.ln2);
    bc.f1.noalias() = bc.b * bp.w_ff1;
    bc.f1.rowwise() += bp.b_ff1.row(0);
    bc.g = gelu(bc.f1, bc.f1_tanh);
    tensor f2;
    f2.noalias() = bc.g * bp.w_ff2;
    f2.rowwise() += bp.b_ff2.row(0);
    if (use_dropout) {
      bc.ff_mask = dropout_mask(seq, d);
      f2.array() *= bc.ff_mask.array();
    } else {
      bc.ff_mask.resize(0, 0);
    }
    x = bc.h + f2;
  }

  st.x_final = x.bottomRows(static_cast<Eigen::Index>(n_out));
  st.y_final = layer_norm(st.x_final, p.final_ln_g, p.final_ln_b, &st.final_ln);
  st.logits.noalias() = st.y_final * p.w_out;
  st.logits.rowwise() += p.b_out.row(0);
}

/// Row-wise log-softmax.
inline tensor log_softmax(const tensor &logits) {
  tensor out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

/// Backpropagates d(loss)/d(logits) through the state, accumulating into grads.
inline void backward(const model_params &p, const forward_state &st, const tensor &dlogits, model_params &grads) {
  const auto &c = p.config;
  const auto m = static_cast<Eigen::Index>(st.prefix);
  const auto n_out = static_cast<Eigen::Index>(st.outputs);
  const auto seq = m + n_out;
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  grads.w_out.noalias() += st.y_final.transpose() * dlogits;
  grads.b_out.row(0) += dlogits.colwise().sum();
  const tensor dy_final = dlogits * p.w_out.transpose();
  tensor dx = tensor::Zero(seq, d);
  dx.bottomRows(n_out) = layer_norm_backward(dy_final, p.final_ln_g, st.final_ln, grads.final_ln_g, grads.final_ln_b);

  for (std::size_t li = p.blocks.size(); li-- > 0;) {
    const auto &bp = p.blocks[li];
    const auto &bc = st.blocks[li];
    auto &bg = grads.blocks[li];

    // feed-forward branch: out = h + drop(gelu(ln2(h) W1 + b1) W2 + b2)
    tensor df2 = dx;
    if (bc.ff_mask.size() != 0)
      df2.array() *= bc.ff_mask.array();
    bg.w_ff2.noalias() += bc.g.transpose() * df2;
    bg.b_ff2.row(0) += df2.colwise().sum();
    tensor df1 = df2 * bp.w_ff2.transpose();
    df1.array() *= gelu_grad(bc.f1, bc.f1_tanh).array();
    bg.w_ff1.noalias() += bc.b.transpose() * df1;
    bg.b_ff1.row(0) += df1.colwise().sum();
    const tensor db = df1 * bp.w_ff1.transpose();
    tensor dh_total = dx + layer_norm_backward(db, bp.ln2_g, bc.ln2, bg.ln2_g, bg.ln2_b);

    // attention branch: h = x + drop(attn(ln1(x)) Wo + bo)
    tensor dattn = dh_total;
    if (bc.attn_mask.size() != 0)
      dattn.array() *= bc.attn_mask.array();
    bg.w_o.noalias() += bc.heads.transpose() * dattn;
    bg.b_o.row(0) += dattn.colwise().sum();
    const tensor dheads = dattn * bp.w_o.transpose();
    tensor dqkv = tensor::Zero(seq, 3 * d);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const auto off = static_cast<Eigen::Index>(hd) * dh;
      const tensor &prob = bc.probs[hd];
      const auto q = bc.qkv.middleCols(off, dh);
      const auto k = bc.qkv.middleCols(d + off, dh);
      const auto v = bc.qkv.middleCols(2 * d + off, dh);
      const auto dout = dheads.middleCols(off, dh);
      dqkv.middleCols(2 * d + off, dh).noalias() += prob.transpose() * dout;
      tensor dprob;
      dprob.noalias() = dout * v.transpose();
      // softmax backward; masked entries have prob 0 and so get 0
      tensor dscore = prob.array() * (dprob.array().colwise() - (dprob.array() * prob.array()).rowwise().sum());
      dscore *= scale;
      dqkv.middleCols(off, dh).noalias() += dscore * k;
      dqkv.middleCols(d + off, dh).noalias() += dscore.transpose() * q;
    }
    bg.w_qkv.noalias() += bc.a.transpose() * dqkv;
    bg.b_qkv.row(0) += dqkv.colwise().sum();
    const tensor da = dqkv * bp.w_qkv.transpose();
    dx = dh_total + layer_norm_backward(da, bp.ln1_g, bc.ln1, bg.ln1_g, bg.ln1_b);
  }

  for (Eigen::Index i = 0; i < m; ++i) {
    const auto cell = static_cast<std::size_t>(i);
    grads.image_embed.row(st.image_tokens[cell]) += dx.row(i);
    grads.image_row_pos.row(static_cast<Eigen::Index>(cell / c.grid_w)) += dx.row(i);
    grads.image_col_pos.row(static_cast<Eigen::Index>(cell % c.grid_w)) += dx.row(i);
  }
  for (Eigen::Index j = 0; j < n_out; ++j) {
    grads.token_embed.row(st.inputs[static_cast<std::size_t>(j)]) += dx.row(m + j);
    grads.token_pos.row(j) += dx.row(m + j);
  }
}

// Next-token targets for the decoder inputs [BOS, t1..tS]: t1..tS, EOS.
inline std::vector<unit_id> shifted_targets(const model_config &c, std::span<const unit_id> target) {
  std::vector<unit_id> out(target.begin(), target.end());
  out.push_back(c.eos());
  return out;
}

} // namespace detail

/// Mean negative log-likelihood with its per-position logits.
struct loss_result {
  double loss = 0.0;
  tensor logits; // (target length + 1) x output_vocab
};

/// Teacher-forced loss of one example: mean over target positions (EOS
/// included) of -log p(next token | earlier tokens, image units).
inline loss_result forward_loss(const model_params &p, std::span<const unit_id> image_tokens,
                                std::span<const unit_id> target) {
  detail::check_example(p.config, image_tokens, target);
  detail::forward_state st;
  detail::forward(p, image_tokens, target, st);
  const tensor logp = detail::log_softmax(st.logits);
  const auto next = detail::shifted_targets(p.config, target);
  double nll = 0.0;
  for (std::size_t j = 0; j < next.size(); ++j)
    nll -= logp(static_cast<Eigen::Index>(j), next[j]);
  return {nll / static_cast<double>(next.size()), std::move(st.logits)};
}

inline loss_result forward_loss(const model_params &p, const unit_sequence &grid_tokens,
                                const unit_sequence &target_units) {
  return forward_loss(p, grid_tokens.tokens(), target_units.tokens());
}

/// Mean loss over every target position in the batch and its gradient.
/// Frozen tensors get a zero gradient.
struct batch_gradient {
  double loss = 0.0;
  std::size_t positions = 0;
  model_params grads;
};

inline batch_gradient compute_gradients(const model_params &p, std::span<const sequence_example> batch,
                                        rng *dropout_rng = nullptr) {
  detail::require(!batch.empty(), "compute_gradients: empty batch");
  std::size_t positions = 0;
  for (const auto &ex : batch) {
    detail::check_example(p.config, ex.image_tokens, ex.target);
    positions += ex.target.size() + 1;
  }
  batch_gradient out{0.0, positions, zeros_like(p)};
  const double w = 1.0 / static_cast<double>(positions);
  detail::forward_state st;
  for (const auto &ex : batch) {
    detail::forward(p, ex.image_tokens, ex.target, st, dropout_rng);
    const auto next = detail::shifted_targets(p.config, ex.target);
    tensor dlogits = detail::log_softmax(st.logits);
    for (std::size_t j = 0; j < next.size(); ++j) {
      const auto row = static_cast<Eigen::Index>(j);
      out.loss -= dlogits(row, next[j]);
      dlogits.row(row) = dlogits.row(row).array().exp();
      dlogits(row, next[j]) -= 1.0;
    }
    dlogits *= w;
    detail::backward(p, st, dlogits, out.grads);
  }
  out.loss *= w;
  for_each_tensor(out.grads, [&](const std::string &name, tensor &t) {
    if (p.is_frozen(name))
      t.setZero();
  });
  return out;
}

/// Fraction of target positions (EOS included) whose argmax prediction
/// under teacher forcing is correct. Ties go to the lowest id.
inline double teacher_forced_accuracy(const model_params &p, std::span<const sequence_example> data) {
  std::size_t correct = 0, total = 0;
  detail::forward_state st;
  for (const auto &ex : data) {
    detail::check_example(p.config, ex.image_tokens, ex.target);
    detail::forward(p, ex.image_tokens, ex.target, st);
    const auto next = detail::shifted_targets(p.config, ex.target);
    for (std::size_t j = 0; j < next.size(); ++j) {
      Eigen::Index arg = 0;
      st.logits.row(static_cast<Eigen::Index>(j)).maxCoeff(&arg);
      correct += static_cast<unit_id>(arg) == next[j];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

} // namespace im2sp
