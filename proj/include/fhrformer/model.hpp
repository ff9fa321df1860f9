#pragma once

// The masked transformer autoencoder.
//
//   series --patchify--> N patches of p_s samples
//   visible patches --linear embed + sinusoidal position--> encoder (pre-norm
//     MHSA + FFN blocks, no causal mask) --> Z, one latent per visible patch
//   decoder input: Z at visible slots, mask_token + position at masked slots
//   decoder (pre-norm MHSA + cross-attention onto Z + FFN blocks) --> D
//   linear projection of every row of D --> predicted patches
//   reconstruction keeps the original visible patches and the predicted
//   masked ones.
//
// Linear weights are stored [out, in]; activations are row-major [tokens, features].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fhrformer/diffcore.hpp"
#include "fhrformer/random.hpp"

namespace fhrformer::model {

using diff::Tensor;

struct ModelConfig {
  std::size_t length = 7200;    // L, samples
  std::size_t patch_size = 30;  // p_s
  std::size_t input_dim = 1;    // d
  std::size_t d_model = 512;
  std::size_t ffn_dim = 1024;
  std::size_t n_heads = 16;
  std::size_t n_enc_layers = 5;
  std::size_t n_dec_layers = 5;
  double dropout = 0.1;
  double mask_ratio = 0.15;  // gamma

  std::size_t n_patches() const { return length / patch_size; }
  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t patch_values() const { return patch_size * input_dim; }

  void validate() const {
    if (patch_size == 0 || length % patch_size != 0) {
      throw std::invalid_argument("length " + std::to_string(length) + " is not divisible by patch size " +
                                  std::to_string(patch_size));
    }
    if (input_dim != 1) throw std::invalid_argument("only univariate input (d = 1) is supported");
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw std::invalid_argument("d_model " + std::to_string(d_model) + " is not divisible by " +
                                  std::to_string(n_heads) + " heads");
    }
    if (ffn_dim == 0 || n_enc_layers == 0 || n_dec_layers == 0) {
      throw std::invalid_argument("ffn_dim and layer counts must be positive");
    }
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  }

  /// Full-scale configuration (L=7200, d_model=512, 16 heads, 5+5 layers).
  static ModelConfig full(std::size_t patch_size = 30) {
    ModelConfig c;
    c.patch_size = patch_size;
    return c;
  }

  /// Desk-scale preset: L=720, d_model=64, 4 heads, 2+2 layers.
  static ModelConfig desk(std::size_t patch_size = 30) {
    ModelConfig c;
    c.length = 720;
    c.patch_size = patch_size;
    c.d_model = 64;
    c.ffn_dim = 128;
    c.n_heads = 4;
    c.n_enc_layers = 2;
    c.n_dec_layers = 2;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Patches and masks

struct PatchSequence {
  std::size_t patch_size = 0;
  std::size_t count = 0;      // N
  std::vector<double> data;  // [N, p_s], row-major

  std::span<const double> patch(std::size_t i) const { return {data.data() + i * patch_size, patch_size}; }
};

inline PatchSequence patchify(std::span<const double> values, std::size_t patch_size) {
  if (patch_size == 0 || values.size() % patch_size != 0) {
    throw std::invalid_argument("series length " + std::to_string(values.size()) +
                                " is not divisible by patch size " + std::to_string(patch_size));
  }
  return {patch_size, values.size() / patch_size, std::vector<double>(values.begin(), values.end())};
}

inline std::vector<double> unpatchify(const PatchSequence& patches) { return patches.data; }

/// Patch-level mask: visible[i] = 1 keeps patch i (set U), 0 hides it (set M).
class MaskSpec {
 public:
  MaskSpec() = default;

  /// Validates |M| >= 1 and |U| >= 1.
  static MaskSpec from_bits(std::vector<std::uint8_t> visible) {
    MaskSpec m;
    m.bits_ = std::move(visible);
    for (std::size_t i = 0; i < m.bits_.size(); ++i) (m.bits_[i] ? m.visible_ : m.masked_).push_back(i);
    if (m.masked_.empty()) throw std::invalid_argument("mask must hide at least one patch");
    if (m.visible_.empty()) throw std::invalid_argument("mask must keep at least one patch visible");
    return m;
  }

  /// Mask hiding exactly the listed patches.
  static MaskSpec hiding(std::size_t n, const std::vector<std::size_t>& masked) {
    std::vector<std::uint8_t> bits(n, 1);
    for (auto i : masked) {
      if (i >= n) throw std::out_of_range("masked patch index out of range");
      bits[i] = 0;
    }
    return from_bits(std::move(bits));
  }

  std::size_t size() const { return bits_.size(); }
  bool is_visible(std::size_t i) const { return bits_[i] != 0; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }
  const std::vector<std::size_t>& masked() const { return masked_; }
  const std::vector<std::size_t>& visible() const { return visible_; }

 private:
  std::vector<std::uint8_t> bits_;
  std::vector<std::size_t> masked_;
  std::vector<std::size_t> visible_;
};

/// Number of patches hidden for ratio gamma: max(1, round(gamma*N)), capped at N-1.
inline std::size_t masked_count(std::size_t n, double mask_ratio) {
  const auto target = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(target, 1, n - 1);
}

/// Hides masked_count(N, gamma) patches chosen uniformly without replacement.
inline MaskSpec sample_mask(std::size_t n, double mask_ratio, Rng& rng) {
  if (n < 2) throw std::invalid_argument("mask sampling needs at least 2 patches");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
  const std::size_t k = masked_count(n, mask_ratio);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
  order.resize(k);
  return MaskSpec::hiding(n, order);
}

// ---------------------------------------------------------------------------
// Positional encoding

/// Writes the sinusoidal encoding of one position: entry 2j = sin(pos / 10000^(2j/d)),
/// entry 2j+1 = cos of the same angle.
inline void positional_row(std::size_t pos, std::size_t d_model, double* out) {
  for (std::size_t i = 0; i < d_model; i += 2) {
    const double angle =
        static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
    out[i] = std::sin(angle);
    if (i + 1 < d_model) out[i + 1] = std::cos(angle);
  }
}

/// Sinusoidal table [n, d_model]; defined for any n.
inline std::vector<double> positional_encoding(std::size_t n, std::size_t d_model) {
  std::vector<double> table(n * d_model);
  for (std::size_t pos = 0; pos < n; ++pos) positional_row(pos, d_model, table.data() + pos * d_model);
  return table;
}

/// Positional rows at the given positions, as a constant tensor.
inline Tensor positional_rows(const std::vector<std::size_t>& positions, std::size_t d_model) {
  std::vector<double> rows(positions.size() * d_model);
  for (std::size_t r = 0; r < positions.size(); ++r) positional_row(positions[r], d_model, rows.data() + r * d_model);
  return Tensor::constant({positions.size(), d_model}, std::move(rows));
}

// ---------------------------------------------------------------------------
// Weights

struct LinearWeights {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct NormWeights {
  Tensor gain;
  Tensor bias;
};

struct AttentionWeights {
  LinearWeights query, key, value, output;
};

struct FeedForwardWeights {
  LinearWeights up, down;
};

struct EncoderLayerWeights {
  NormWeights norm1;
  AttentionWeights self_attn;
  NormWeights norm2;
  FeedForwardWeights ffn;
};

struct DecoderLayerWeights {
  NormWeights norm1;
  AttentionWeights self_attn;
  NormWeights norm2;
  AttentionWeights cross_attn;
  NormWeights norm3;
  FeedForwardWeights ffn;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

namespace detail {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
  LinearWeights linear(std::size_t out, std::size_t in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(out * in);
    for (auto& v : w) v = rng_.uniform(-bound, bound);
    return {Tensor::parameter({out, in}, std::move(w)), Tensor::zeros({out}, true)};
  }
  NormWeights norm(std::size_t d) {
    return {Tensor::parameter({d}, std::vector<double>(d, 1.0)), Tensor::zeros({d}, true)};
  }
  AttentionWeights attention(std::size_t d) { return {linear(d, d), linear(d, d), linear(d, d), linear(d, d)}; }
  FeedForwardWeights ffn(std::size_t d, std::size_t hidden) { return {linear(hidden, d), linear(d, hidden)}; }
  Tensor normal(std::size_t d, double sigma) {
    std::vector<double> v(d);
    for (auto& x : v) x = sigma * rng_.normal();
    return Tensor::parameter({d}, std::move(v));
  }

 private:
  Rng rng_;
};

inline void add_linear(std::vector<NamedParameter>& out, const std::string& name, const LinearWeights& w) {
  out.push_back({name + ".weight", w.weight});
  out.push_back({name + ".bias", w.bias});
}
inline void add_norm(std::vector<NamedParameter>& out, const std::string& name, const NormWeights& w) {
  out.push_back({name + ".gain", w.gain});
  out.push_back({name + ".bias", w.bias});
}
inline void add_attention(std::vector<NamedParameter>& out, const std::string& name, const AttentionWeights& w) {
  add_linear(out, name + ".query", w.query);
  add_linear(out, name + ".key", w.key);
  add_linear(out, name + ".value", w.value);
  add_linear(out, name + ".output", w.output);
}
inline void add_ffn(std::vector<NamedParameter>& out, const std::string& name, const FeedForwardWeights& w) {
  add_linear(out, name + ".up", w.up);
  add_linear(out, name + ".down", w.down);
}

}  // namespace detail

struct ModelWeights {
  ModelConfig config;
  LinearWeights embed;  // [d_model, p_s*d]
  Tensor mask_token;    // [d_model]
  std::vector<EncoderLayerWeights> encoder;
  std::vector<DecoderLayerWeights> decoder;
  LinearWeights project;  // [p_s*d, d_model]

  static ModelWeights initialize(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    detail::Initializer init(seed);
    ModelWeights w;
    w.config = cfg;
    const std::size_t d = cfg.d_model;
    w.embed = init.linear(d, cfg.patch_values());
    w.mask_token = init.normal(d, 0.02);
    for (std::size_t l = 0; l < cfg.n_enc_layers; ++l)
      w.encoder.push_back({init.norm(d), init.attention(d), init.norm(d), init.ffn(d, cfg.ffn_dim)});
    for (std::size_t l = 0; l < cfg.n_dec_layers; ++l)
      w.decoder.push_back(
          {init.norm(d), init.attention(d), init.norm(d), init.attention(d), init.norm(d), init.ffn(d, cfg.ffn_dim)});
    w.project = init.linear(cfg.patch_values(), d);
    return w;
  }

  /// Every learnable tensor with a stable dotted name, in a fixed order.
  std::vector<NamedParameter> parameters() const {
    std::vector<NamedParameter> out;
    detail::add_linear(out, "embed", embed);
    out.push_back({"mask_token", mask_token});
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      const std::string p = "encoder." + std::to_string(l);
      detail::add_norm(out, p + ".norm1", encoder[l].norm1);
      detail::add_attention(out, p + ".self_attn", encoder[l].self_attn);
      detail::add_norm(out, p + ".norm2", encoder[l].norm2);
      detail::add_ffn(out, p + ".ffn", encoder[l].ffn);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "decoder." + std::to_string(l);
      detail::add_norm(out, p + ".norm1", decoder[l].norm1);
      detail::add_attention(out, p + ".self_attn", decoder[l].self_attn);
      detail::add_norm(out, p + ".norm2", decoder[l].norm2);
      detail::add_attention(out, p + ".cross_attn", decoder[l].cross_attn);
      detail::add_norm(out, p + ".norm3", decoder[l].norm3);
      detail::add_ffn(out, p + ".ffn", decoder[l].ffn);
    }
    detail::add_linear(out, "project", project);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// Deep copy: the clone shares no storage with *this.
  ModelWeights clone() const {
    ModelWeights w = initialize(config, 0);
    copy_values_from(*this, w);
    return w;
  }

  /// Overwrites dst's parameter values with src's (same config required).
  static void copy_values_from(const ModelWeights& src, ModelWeights& dst) {
    auto s = src.parameters();
    auto d = dst.parameters();
    if (s.size() != d.size()) throw std::invalid_argument("parameter layouts differ");
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto dv = d[i].tensor.mutable_values();
      const auto sv = s[i].tensor.values();
      if (sv.size() != dv.size()) throw std::invalid_argument("parameter '" + s[i].name + "' sizes differ");
      std::copy(sv.begin(), sv.end(), dv.begin());
    }
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

/// Closed-form parameter count for a configuration.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, p = c.patch_values(), f = c.ffn_dim;
  const std::size_t linear_dd = d * d + d;
  const std::size_t attention = 4 * linear_dd;
  const std::size_t ffn = (d * f + f) + (f * d + d);
  const std::size_t norm = 2 * d;
  const std::size_t enc_layer = norm + attention + norm + ffn;
  const std::size_t dec_layer = norm + attention + norm + attention + norm + ffn;
  return (d * p + d) + d + c.n_enc_layers * enc_layer + c.n_dec_layers * dec_layer + (p * d + p);
}

// ---------------------------------------------------------------------------
// Forward pass

enum class Mode { train, eval };

/// Per-forward state: mode and the dropout seed. Each dropout site draws a
/// fresh seed derived from (seed, call index), so a forward pass is fully
/// determined by its inputs and this seed.
struct ForwardContext {
  Mode mode = Mode::eval;
  std::uint64_t dropout_seed = 0;
  double dropout = 0.0;
  std::uint64_t calls = 0;

  Tensor apply_dropout(const Tensor& x) {
    if (mode != Mode::train || dropout == 0.0) return x;
    return diff::dropout(x, dropout, derive_seed(dropout_seed, calls++), true);
  }
};

inline Tensor linear(const Tensor& x, const LinearWeights& w) {
  return diff::add(diff::matmul(x, diff::transpose(w.weight)), w.bias);
}

inline Tensor norm(const Tensor& x, const NormWeights& w) { return diff::layer_norm(x, w.gain, w.bias, 1e-5); }

/// Multi-head attention. Heads split d_model into contiguous column blocks;
/// scores are scaled by 1/sqrt(head_dim). No causal mask. When `weights_out`
/// is given it receives the [queries, keys] attention matrix of every head.
inline Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const AttentionWeights& w,
                                   std::size_t n_heads, std::vector<Tensor>* weights_out = nullptr) {
  const Tensor q = linear(queries, w.query);
  const Tensor k = linear(keys_values, w.key);
  const Tensor v = linear(keys_values, w.value);
  const std::size_t d = q.cols();
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor qh = diff::slice_cols(q, h * dh, dh);
    const Tensor kh = diff::slice_cols(k, h * dh, dh);
    const Tensor vh = diff::slice_cols(v, h * dh, dh);
    const Tensor attn = diff::softmax(diff::scale(diff::matmul(qh, diff::transpose(kh)), scale), 1);
    if (weights_out) weights_out->push_back(attn);
    heads.push_back(diff::matmul(attn, vh));
  }
  return linear(n_heads == 1 ? heads[0] : diff::concat_cols(heads), w.output);
}

inline Tensor feed_forward(const Tensor& x, const FeedForwardWeights& w) {
  return linear(diff::gelu(linear(x, w.up)), w.down);
}

/// e_i = W_in vec(x_i) + b_in for each row of `patches` ([rows, p_s*d]).
inline Tensor embed(const Tensor& patches, const ModelWeights& w) {
  if (patches.rank() != 2 || patches.cols() != w.config.patch_values()) {
    throw std::invalid_argument("embed: patches of width " + std::to_string(patches.cols()) + ", expected " +
                                std::to_string(w.config.patch_values()));
  }
  return linear(patches, w.embed);
}

/// Pre-norm encoder over the visible-patch inputs (embedding + position).
inline Tensor encode(const Tensor& inputs, const ModelWeights& w, ForwardContext& ctx) {
  if (inputs.rank() != 2 || inputs.rows() == 0 || inputs.cols() != w.config.d_model) {
    throw std::invalid_argument("encode: expected [visible, d_model] input");
  }
  Tensor h = inputs;
  for (const auto& layer : w.encoder) {
    const Tensor a = norm(h, layer.norm1);
    const Tensor z = diff::add(ctx.apply_dropout(multi_head_attention(a, a, layer.self_attn, w.config.n_heads)), h);
    h = diff::add(ctx.apply_dropout(feed_forward(norm(z, layer.norm2), layer.ffn)), z);
  }
  return h;
}

/// Encoder latents for the patches listed in `visible` (all patches for
/// feature extraction, the visible set during reconstruction).
inline Tensor encode_patches(const PatchSequence& patches, const std::vector<std::size_t>& visible,
                             const ModelWeights& w, ForwardContext& ctx) {
  std::vector<double> rows(visible.size() * patches.patch_size);
  for (std::size_t r = 0; r < visible.size(); ++r) {
    const auto p = patches.patch(visible[r]);
    std::copy(p.begin(), p.end(), rows.begin() + r * patches.patch_size);
  }
  const Tensor x = Tensor::constant({visible.size(), patches.patch_size}, std::move(rows));
  const Tensor e = diff::add(embed(x, w), positional_rows(visible, w.config.d_model));
  return encode(e, w, ctx);
}

/// D0: row i is Z's row for visible i (in visible order), mask_token + p_i for masked i.
inline Tensor assemble_decoder_input(const Tensor& z, const MaskSpec& mask, const ModelWeights& w) {
  const auto& vis = mask.visible();
  const auto& hid = mask.masked();
  if (z.rank() != 2 || z.rows() != vis.size()) {
    throw std::invalid_argument("assemble_decoder_input: " + std::to_string(z.rows()) + " latents for " +
                                std::to_string(vis.size()) + " visible patches");
  }
  const Tensor tokens = diff::add(positional_rows(hid, w.config.d_model), w.mask_token);
  const Tensor stacked = diff::concat_rows(z, tokens);
  std::vector<std::size_t> order(mask.size());
  for (std::size_t r = 0; r < vis.size(); ++r) order[vis[r]] = r;
  for (std::size_t r = 0; r < hid.size(); ++r) order[hid[r]] = vis.size() + r;
  return diff::gather_rows(stacked, std::move(order));
}

/// Pre-norm decoder: self-attention over all N slots, cross-attention onto Z, FFN.
inline Tensor decode(const Tensor& d0, const Tensor& z, const ModelWeights& w, ForwardContext& ctx) {
  Tensor d = d0;
  for (const auto& layer : w.decoder) {
    const Tensor a = norm(d, layer.norm1);
    const Tensor d1 = diff::add(d, ctx.apply_dropout(multi_head_attention(a, a, layer.self_attn, w.config.n_heads)));
    const Tensor d2 = diff::add(
        d1, ctx.apply_dropout(multi_head_attention(norm(d1, layer.norm2), z, layer.cross_attn, w.config.n_heads)));
    d = diff::add(d2, ctx.apply_dropout(feed_forward(norm(d2, layer.norm3), layer.ffn)));
  }
  return d;
}

/// x_hat_i = W_out d_i + b_out for every row.
inline Tensor project(const Tensor& d, const ModelWeights& w) { return linear(d, w.project); }

/// Reconstruction: original values at visible patches, predictions at masked ones.
inline std::vector<double> compose(const Tensor& predicted, const MaskSpec& mask, const PatchSequence& original) {
  std::vector<double> out = original.data;
  const std::size_t ps = original.patch_size;
  for (auto i : mask.masked())
    for (std::size_t j = 0; j < ps; ++j) out[i * ps + j] = predicted.at(i, j);
  return out;
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  std::uint64_t dropout_seed = 0;
};

struct ForwardResult {
  Tensor predicted;                   // x_hat, [N, p_s], every patch
  Tensor predicted_masked;            // rows of x_hat at masked patches, in mask.masked() order
  std::vector<double> reconstruction;  // x^R, length N*p_s
};

/// Works for any N >= 2 with the same weights; the positional table is built
/// for the series' own length.
inline ForwardResult forward(std::span<const double> series, const MaskSpec& mask, const ModelWeights& w,
                             const ForwardOptions& opt = {}) {
  const PatchSequence patches = patchify(series, w.config.patch_size);
  if (mask.size() != patches.count) {
    throw std::invalid_argument("mask covers " + std::to_string(mask.size()) + " patches, series has " +
                                std::to_string(patches.count));
  }
  ForwardContext ctx{opt.mode, opt.dropout_seed, w.config.dropout, 0};
  const Tensor z = encode_patches(patches, mask.visible(), w, ctx);
  const Tensor d = decode(assemble_decoder_input(z, mask, w), z, w, ctx);
  ForwardResult r;
  r.predicted = project(d, w);
  r.predicted_masked = diff::gather_rows(r.predicted, mask.masked());
  r.reconstruction = compose(r.predicted, mask, patches);
  return r;
}

/// Target rows of the masked patches, as a constant tensor aligned with
/// ForwardResult::predicted_masked.
inline Tensor masked_targets(std::span<const double> series, const MaskSpec& mask, std::size_t patch_size) {
  const auto& hid = mask.masked();
  std::vector<double> rows(hid.size() * patch_size);
  for (std::size_t r = 0; r < hid.size(); ++r)
    std::copy_n(series.begin() + hid[r] * patch_size, patch_size, rows.begin() + r * patch_size);
  return Tensor::constant({hid.size(), patch_size}, std::move(rows));
}

}  // namespace fhrformer::model
