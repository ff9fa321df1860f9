#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "fhrformer/checkpoint.hpp"
#include "fhrformer/model.hpp"
#include "test_support.hpp"

using namespace fhrformer;
using namespace fhrformer::model;
using diff::Tensor;

namespace {

ModelConfig tiny(std::size_t length = 120, std::size_t ps = 30) {
  ModelConfig c;
  c.length = length;
  c.patch_size = ps;
  c.d_model = 16;
  c.ffn_dim = 32;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.dropout = 0.0;
  return c;
}

std::vector<double> random_series(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  return test::uniform_vector(n, gen, 0.4, 0.8);
}

}  // namespace

TEST(Patchify, Counts) {
  const std::vector<double> x(7200, 0.5);
  EXPECT_EQ(patchify(x, 30).count, 240u);
  EXPECT_EQ(patchify(x, 480).count, 15u);
  EXPECT_EQ(ModelConfig::full(120).n_patches(), 60u);
}

TEST(Patchify, RoundTripBitExact) {
  for (std::size_t ps : {30u, 60u, 120u, 240u, 480u}) {
    const auto x = random_series(7200, ps);
    EXPECT_EQ(unpatchify(patchify(x, ps)), x);
  }
}

TEST(Patchify, IndivisibleLengthReportsBoth) {
  const std::vector<double> x(100, 0.5);
  try {
    patchify(x, 30);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("100"), std::string::npos);
    EXPECT_NE(msg.find("30"), std::string::npos);
  }
}

TEST(SampleMask, Counts) {
  Rng rng(1);
  EXPECT_EQ(sample_mask(240, 0.15, rng).masked().size(), 36u);
  EXPECT_EQ(sample_mask(240, 0.001, rng).masked().size(), 1u);
  EXPECT_EQ(sample_mask(4, 0.99, rng).masked().size(), 3u);
  EXPECT_THROW(sample_mask(1, 0.5, rng), std::invalid_argument);
}

TEST(SampleMask, PartitionAndUniformity) {
  Rng rng(2);
  std::vector<std::size_t> hits(24, 0);
  const int draws = 20000;
  for (int d = 0; d < draws; ++d) {
    const auto m = sample_mask(24, 0.15, rng);
    std::set<std::size_t> all(m.masked().begin(), m.masked().end());
    all.insert(m.visible().begin(), m.visible().end());
    ASSERT_EQ(all.size(), 24u);
    ASSERT_EQ(m.masked().size() + m.visible().size(), 24u);
    for (auto i : m.masked()) ++hits[i];
  }
  // Each patch is hidden with probability 4/24; 5 sigma band.
  const double p = 4.0 / 24.0, sd = std::sqrt(draws * p * (1 - p));
  for (auto h : hits) EXPECT_NEAR(static_cast<double>(h), draws * p, 5 * sd);
}

TEST(MaskSpec, RejectsDegenerateMasks) {
  EXPECT_THROW(MaskSpec::from_bits({1, 1, 1}), std::invalid_argument);
  EXPECT_THROW(MaskSpec::from_bits({0, 0}), std::invalid_argument);
  EXPECT_THROW(MaskSpec::hiding(3, {3}), std::out_of_range);
}

TEST(PositionalEncoding, PositionZero) {
  const auto t = positional_encoding(1, 16);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(t[j], j % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalEncoding, RangeAndOracle) {
  const std::size_t d = 64;
  const auto t = positional_encoding(500, d);
  for (double v : t) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  for (std::size_t pos : {1u, 17u, 499u})
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq = std::exp(-std::log(10000.0) * 2.0 * i / d);
      EXPECT_NEAR(t[pos * d + 2 * i], std::sin(pos * freq), 1e-12);
      EXPECT_NEAR(t[pos * d + 2 * i + 1], std::cos(pos * freq), 1e-12);
    }
}

TEST(PositionalEncoding, DistinctRowsUpTo10k) {
  const std::size_t n = 10000, d = 16;
  const auto t = positional_encoding(n, d);
  std::set<std::vector<double>> rows;
  for (std::size_t p = 0; p < n; ++p) rows.insert(std::vector<double>(t.begin() + p * d, t.begin() + (p + 1) * d));
  EXPECT_EQ(rows.size(), n);
}

TEST(Weights, ParameterCountMatchesClosedForm) {
  for (std::size_t ps : {30u, 60u, 120u, 240u, 480u}) {
    const auto c = ModelConfig::full(ps);
    const auto w = ModelWeights::initialize(c, 1);
    EXPECT_EQ(w.parameter_count(), expected_parameter_count(c)) << ps;
  }
  const auto d = ModelConfig::desk(30);
  EXPECT_EQ(ModelWeights::initialize(d, 1).parameter_count(), expected_parameter_count(d));
}

TEST(Weights, InitializationScheme) {
  const auto c = ModelConfig::desk(30);
  const auto w = ModelWeights::initialize(c, 5);
  const double bound = 1.0 / std::sqrt(30.0);
  for (double v : w.embed.weight.values()) EXPECT_LE(std::abs(v), bound);
  for (double v : w.embed.bias.values()) EXPECT_EQ(v, 0.0);
  for (double v : w.encoder[0].norm1.gain.values()) EXPECT_EQ(v, 1.0);
  double ss = 0.0;
  for (double v : w.mask_token.values()) ss += v * v;
  EXPECT_LT(std::sqrt(ss / 64.0), 0.05);
  EXPECT_GT(std::sqrt(ss / 64.0), 0.005);
}

TEST(Embed, ZeroPatchZeroBias) {
  const auto w = ModelWeights::initialize(tiny(), 1);
  const auto e = embed(Tensor::constant({2, 30}, std::vector<double>(60, 0.0)), w);
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, IdentityWeightCopiesInput) {
  auto c = tiny(64, 16);
  auto w = ModelWeights::initialize(c, 1);
  auto wv = w.embed.weight.mutable_values();
  std::fill(wv.begin(), wv.end(), 0.0);
  for (std::size_t i = 0; i < 16; ++i) wv[i * 16 + i] = 1.0;
  const auto x = random_series(16, 3);
  const auto e = embed(Tensor::constant({1, 16}, x), w);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(e[i], x[i]);
}

TEST(Embed, MatchesMatrixVectorOracle) {
  const auto w = ModelWeights::initialize(tiny(), 9);
  const auto x = random_series(30, 4);
  const auto e = embed(Tensor::constant({1, 30}, x), w);
  for (std::size_t r = 0; r < 16; ++r) {
    double acc = w.embed.bias[r];
    for (std::size_t j = 0; j < 30; ++j) acc += w.embed.weight.at(r, j) * x[j];
    EXPECT_NEAR(e[r], acc, 1e-12);
  }
  EXPECT_THROW(embed(Tensor::constant({1, 20}, std::vector<double>(20, 0.0)), w), std::invalid_argument);
}

TEST(Encode, SingleVisiblePatchAttendsToItself) {
  const auto w = ModelWeights::initialize(tiny(), 2);
  std::vector<Tensor> attn;
  const auto x = Tensor::constant({1, 16}, random_series(16, 1));
  multi_head_attention(x, x, w.encoder[0].self_attn, 2, &attn);
  ASSERT_EQ(attn.size(), 2u);
  for (const auto& a : attn) EXPECT_EQ(a.item(), 1.0);
}

TEST(Encode, OutputShapeForAnyMask) {
  const auto w = ModelWeights::initialize(tiny(240), 2);
  const auto x = random_series(240, 2);
  const auto patches = patchify(x, 30);
  for (std::size_t k = 1; k <= 8; ++k) {
    std::vector<std::size_t> vis(k);
    std::iota(vis.begin(), vis.end(), 0);
    ForwardContext ctx;
    const auto z = encode_patches(patches, vis, w, ctx);
    EXPECT_EQ(z.shape(), (diff::Shape{k, 16}));
  }
}

TEST(Encode, PermutationEquivariant) {
  const auto w = ModelWeights::initialize(tiny(), 3);
  const auto x = random_series(120, 5);
  const auto patches = patchify(x, 30);
  const std::vector<std::size_t> order{0, 1, 2, 3}, perm{2, 0, 3, 1};
  ForwardContext ctx;
  const auto z = encode_patches(patches, order, w, ctx);
  const auto zp = encode_patches(patches, perm, w, ctx);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(zp.at(r, c), z.at(perm[r], c), 1e-12);
}

TEST(DecoderInput, SlotsFollowMask) {
  const auto w = ModelWeights::initialize(tiny(240), 4);
  const auto x = random_series(240, 6);
  const auto mask = MaskSpec::hiding(8, {2, 5});
  ForwardContext ctx;
  const auto z = encode_patches(patchify(x, 30), mask.visible(), w, ctx);
  const auto d0 = assemble_decoder_input(z, mask, w);
  ASSERT_EQ(d0.shape(), (diff::Shape{8, 16}));
  const auto pe = positional_encoding(8, 16);
  std::size_t zr = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t c = 0; c < 16; ++c) {
      const double expect = mask.is_visible(i) ? z.at(zr, c) : pe[i * 16 + c] + w.mask_token[c];
      EXPECT_EQ(d0.at(i, c), expect);
    }
    if (mask.is_visible(i)) ++zr;
  }
  // Shared token: after removing positions the two masked slots agree.
  for (std::size_t c = 0; c < 16; ++c)
    EXPECT_NEAR(d0.at(2, c) - pe[2 * 16 + c], d0.at(5, c) - pe[5 * 16 + c], 1e-15);
  EXPECT_THROW(assemble_decoder_input(diff::slice_cols(z, 0, 16), MaskSpec::hiding(8, {1}), w), std::invalid_argument);
}

TEST(DecoderInput, SingleMaskedSlot) {
  const auto w = ModelWeights::initialize(tiny(), 4);
  const auto mask = MaskSpec::hiding(4, {3});
  ForwardContext ctx;
  const auto z = encode_patches(patchify(random_series(120, 1), 30), mask.visible(), w, ctx);
  const auto d0 = assemble_decoder_input(z, mask, w);
  std::size_t token_rows = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    bool from_z = false;
    for (std::size_t r = 0; r < z.rows(); ++r) {
      bool same = true;
      for (std::size_t c = 0; c < 16; ++c) same = same && d0.at(i, c) == z.at(r, c);
      from_z = from_z || same;
    }
    if (!from_z) ++token_rows;
  }
  EXPECT_EQ(token_rows, 1u);
}

TEST(Decode, ShapeAndSingleKeyCrossAttention) {
  const auto w = ModelWeights::initialize(tiny(), 7);
  const auto mask = MaskSpec::hiding(4, {0, 1, 3});
  ForwardContext ctx;
  const auto z = encode_patches(patchify(random_series(120, 2), 30), mask.visible(), w, ctx);
  const auto d0 = assemble_decoder_input(z, mask, w);
  const auto d = decode(d0, z, w, ctx);
  EXPECT_EQ(d.shape(), (diff::Shape{4, 16}));
  std::vector<Tensor> attn;
  multi_head_attention(d0, z, w.decoder[0].cross_attn, 2, &attn);
  for (const auto& a : attn)
    for (double v : a.values()) EXPECT_EQ(v, 1.0);
}

TEST(Decode, GradientReachesVisibleInputsFromMaskedOutputs) {
  const auto w = ModelWeights::initialize(tiny(), 8);
  const auto x = random_series(120, 3);
  const auto mask = MaskSpec::hiding(4, {1});
  std::vector<double> rows;
  for (auto i : mask.visible()) rows.insert(rows.end(), x.begin() + i * 30, x.begin() + (i + 1) * 30);
  const auto vis = Tensor::parameter({3, 30}, rows);
  ForwardContext ctx;
  const auto e = diff::add(embed(vis, w), positional_rows(mask.visible(), 16));
  const auto z = encode(e, w, ctx);
  const auto out = project(decode(assemble_decoder_input(z, mask, w), z, w, ctx), w);
  diff::backward(diff::sum(diff::square(diff::gather_rows(out, {1}))));
  double norm = 0.0;
  for (double g : vis.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Forward, PassthroughAndProjectionOracle) {
  const auto w = ModelWeights::initialize(tiny(240), 10);
  const auto x = random_series(240, 4);
  const auto mask = MaskSpec::hiding(8, {1, 4, 6});
  const auto r = forward(x, mask, w);
  ASSERT_EQ(r.reconstruction.size(), 240u);
  for (auto i : mask.visible())
    for (std::size_t j = i * 30; j < (i + 1) * 30; ++j) EXPECT_EQ(r.reconstruction[j], x[j]);
  // x_hat = W_out d + b_out on the masked rows.
  ForwardContext ctx;
  const auto z = encode_patches(patchify(x, 30), mask.visible(), w, ctx);
  const auto d = decode(assemble_decoder_input(z, mask, w), z, w, ctx);
  for (std::size_t k = 0; k < mask.masked().size(); ++k) {
    const auto i = mask.masked()[k];
    for (std::size_t j = 0; j < 30; ++j) {
      double acc = w.project.bias[j];
      for (std::size_t c = 0; c < 16; ++c) acc += w.project.weight.at(j, c) * d.at(i, c);
      EXPECT_NEAR(r.reconstruction[i * 30 + j], acc, 1e-12);
      EXPECT_EQ(r.predicted_masked.at(k, j), r.predicted.at(i, j));
    }
  }
}

TEST(Forward, EvalIsDeterministicTrainDependsOnSeed) {
  auto c = tiny(240);
  c.dropout = 0.2;
  const auto w = ModelWeights::initialize(c, 11);
  const auto x = random_series(240, 5);
  const auto mask = MaskSpec::hiding(8, {3});
  const auto a = forward(x, mask, w), b = forward(x, mask, w);
  EXPECT_EQ(a.reconstruction, b.reconstruction);
  const auto t1 = forward(x, mask, w, {Mode::train, 1}), t2 = forward(x, mask, w, {Mode::train, 1});
  const auto t3 = forward(x, mask, w, {Mode::train, 2});
  EXPECT_EQ(t1.reconstruction, t2.reconstruction);
  EXPECT_NE(t1.reconstruction, t3.reconstruction);
}

TEST(Forward, LengthAgnostic) {
  const auto w = ModelWeights::initialize(tiny(120), 12);
  for (std::size_t n : {2u, 3u, 10u, 41u}) {
    const auto x = random_series(n * 30, n);
    const auto r = forward(x, MaskSpec::hiding(n, {n - 1}), w);
    EXPECT_EQ(r.reconstruction.size(), n * 30);
  }
}

TEST(Forward, MaskSizeMismatchRejected) {
  const auto w = ModelWeights::initialize(tiny(120), 12);
  EXPECT_THROW(forward(random_series(120, 1), MaskSpec::hiding(5, {0}), w), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto w = ModelWeights::initialize(ModelConfig::desk(30), 21);
  std::stringstream io;
  write_checkpoint(io, w);
  const auto back = read_checkpoint(io);
  EXPECT_EQ(back.config, w.config);
  const auto a = w.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::ranges::equal(a[i].tensor.values(), b[i].tensor.values())) << a[i].name;
  }
  const auto x = random_series(720, 8);
  const auto mask = MaskSpec::hiding(24, {4, 5, 17});
  EXPECT_EQ(forward(x, mask, w).reconstruction, forward(x, mask, back).reconstruction);
}

TEST(Checkpoint, BadMagicRejected) {
  std::stringstream io("NOTACKPT and more bytes follow here");
  try {
    read_checkpoint(io);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::bad_magic);
  }
}

TEST(Checkpoint, TruncatedRejected) {
  std::stringstream io;
  write_checkpoint(io, ModelWeights::initialize(tiny(), 1));
  const auto bytes = io.str();
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  try {
    read_checkpoint(cut);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::truncated);
  }
}

TEST(Checkpoint, ShapeMismatchNamesBlock) {
  std::stringstream io;
  write_checkpoint(io, ModelWeights::initialize(tiny(), 1));
  auto other = tiny();
  other.ffn_dim = 48;
  try {
    read_checkpoint(io, other);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::shape_mismatch);
    EXPECT_NE(std::string(e.what()).find("encoder.0.ffn.up.weight"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = test::scratch_dir("ckpt");
  const auto w = ModelWeights::initialize(tiny(), 2);
  save_checkpoint(dir / "m.ckpt", w);
  const auto back = load_checkpoint(dir / "m.ckpt", tiny());
  EXPECT_TRUE(std::ranges::equal(w.mask_token.values(), back.mask_token.values()));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
}
