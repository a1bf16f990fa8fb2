#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "bimm/model.hpp"
#include "bimm/patching.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bimm;
using testutil::random_tensor;

namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.depth = 2;
  cfg.mlp_ratio = 2;
  cfg.separation = {1, 2};
  cfg.dec_dim = 8;
  cfg.dec_depth = 1;
  cfg.dec_heads = 2;
  return cfg;
}

// Closed-form parameter counts, assembled from the layer shapes.
size_t linear_params(size_t in, size_t out) { return in * out + out; }
size_t block_params(size_t d, size_t mlp) {
  return 2 * d + linear_params(d, 3 * d) + linear_params(d, d) + 2 * d +
         linear_params(d, mlp * d) + linear_params(mlp * d, d);
}
size_t branch_params(const EncoderConfig& cfg, size_t token_dim,
                     const std::vector<size_t>& target_dims) {
  size_t n = linear_params(token_dim, cfg.d_model);
  n += cfg.depth * block_params(cfg.d_model, cfg.mlp_ratio);
  n += 2 * cfg.d_model;   // final norm
  n += cfg.dec_dim;       // mask token
  for (size_t t = 0; t < target_dims.size(); ++t) {
    n += linear_params(cfg.d_model, cfg.dec_dim);
    if (t == 0) {
      n += linear_params(cfg.dec_dim, cfg.dec_dim);
    } else {
      n += cfg.dec_depth * block_params(cfg.dec_dim, cfg.mlp_ratio) + 2 * cfg.dec_dim;
    }
    n += linear_params(cfg.dec_dim, target_dims[t]);
  }
  return n;
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig cfg = tiny_cfg();
  CHECK_NOTHROW(cfg.validate());
  cfg.separation = {2, 1};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.separation = {1};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // last tap must be the final block
  cfg.separation = {1, 2};
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("branch init registers the documented parameter set") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(1);
  std::vector<size_t> tdims{20, 30};
  init_branch(ps, "ventral", cfg, 12, tdims, rng);

  CHECK(ps.contains("ventral.embed.weight"));
  CHECK(ps.contains("ventral.block01.attn.qkv.weight"));
  CHECK(ps.contains("ventral.block02.mlp.fc2.bias"));
  CHECK(ps.contains("ventral.norm.gamma"));
  CHECK(ps.contains("ventral.mask_token"));
  CHECK(ps.contains("ventral.dec1.fc.weight"));
  CHECK(!ps.contains("ventral.dec1.norm.gamma"));  // shallow decoder has no blocks
  CHECK(ps.contains("ventral.dec2.block01.ln1.gamma"));
  CHECK(ps.contains("ventral.dec2.norm.gamma"));
  CHECK(ps.at("ventral.dec1.head.weight").shape() == Shape{8, 20});
  CHECK(ps.at("ventral.dec2.head.weight").shape() == Shape{8, 30});

  CHECK(ps.total_params() == branch_params(cfg, 12, tdims));

  // truncated-normal init stays within two standard deviations
  for (double v : ps.at("ventral.embed.weight").vec()) CHECK(std::abs(v) <= 0.04 + 1e-12);
  for (double v : ps.at("ventral.block01.ln1.gamma").vec()) CHECK(v == 1.0);
  for (double v : ps.at("ventral.block01.attn.qkv.bias").vec()) CHECK(v == 0.0);

  // same seed reproduces the same initialization
  ParamStore<double> ps2;
  Rng rng2(1);
  init_branch(ps2, "ventral", cfg, 12, tdims, rng2);
  CHECK(ps.at("ventral.embed.weight").vec() == ps2.at("ventral.embed.weight").vec());

  CHECK_THROWS_AS(init_branch(ps, "ventral", cfg, 12, tdims, rng), ContractError);
  ParamStore<double> ps3;
  CHECK_THROWS_AS(init_branch(ps3, "x", cfg, 12, {size_t{20}}, rng), ConfigError);
}

TEST_CASE("encoder taps have the right shapes and positions") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(2);
  init_branch(ps, "v", cfg, 12, {4, 6}, rng);
  auto tokens = random_tensor({3, 5, 12}, rng);
  auto taps = encoder_forward_with_taps(ps, "v", cfg, tokens);
  REQUIRE(taps.size() == 2);
  CHECK(taps[0].shape() == Shape{3, 5, 16});
  CHECK(taps[1].shape() == Shape{3, 5, 16});
  // consecutive taps are different activations
  double diff = 0;
  for (size_t i = 0; i < taps[0].size(); ++i) {
    diff = std::max(diff, std::abs(taps[0].vec()[i] - taps[1].vec()[i]));
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("encoder without position embeddings is permutation equivariant") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(3);
  init_branch(ps, "v", cfg, 10, {4, 6}, rng);
  auto tokens = random_tensor({1, 6, 10}, rng);

  std::vector<size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor<double> permuted({1, 6, 10});
  for (size_t i = 0; i < 6; ++i) {
    std::copy(tokens.data() + perm[i] * 10, tokens.data() + (perm[i] + 1) * 10,
              permuted.data() + i * 10);
  }
  NoGrad ng;
  auto base = encoder_forward_with_taps(ps, "v", cfg, tokens);
  auto p = encoder_forward_with_taps(ps, "v", cfg, permuted);
  for (size_t t = 0; t < 2; ++t) {
    for (size_t i = 0; i < 6; ++i) {
      for (size_t j = 0; j < 16; ++j) {
        CHECK(p[t].vec()[i * 16 + j] ==
              doctest::Approx(base[t].vec()[perm[i] * 16 + j]).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("decoder forward shapes and the shallow-tap property") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(4);
  init_branch(ps, "v", cfg, 12, {4, 6}, rng);

  size_t N = 8, V = 5;
  std::vector<MaskSpec> masks(2);
  masks[0] = MaskSpec{N, {0, 2, 4, 6, 7}, {1, 3, 5}};
  masks[1] = masks[0];
  auto dec_pos = sincos_pos_embed<double>({2, 4}, cfg.dec_dim);
  auto tap = random_tensor({2, V, 16}, rng);

  auto out_masked = decoder_forward(ps, "v", 0, cfg, tap, masks, dec_pos, true);
  CHECK(out_masked.shape() == Shape{2, 3, 4});
  auto out_all = decoder_forward(ps, "v", 1, cfg, tap, masks, dec_pos, false);
  CHECK(out_all.shape() == Shape{2, 8, 6});

  // shallow decoder, masked rows only: predictions are a function of
  // (mask token + position), so two different samples with the same mask
  // produce identical rows
  for (size_t j = 0; j < out_masked.dim(1) * out_masked.dim(2); ++j) {
    CHECK(out_masked.vec()[j] == doctest::Approx(out_masked.vec()[12 + j]).epsilon(1e-12));
  }

  // the deep decoder attends to visible tokens, so its masked outputs differ
  auto deep_masked = decoder_forward(ps, "v", 1, cfg, tap, masks, dec_pos, true);
  double diff = 0;
  for (size_t j = 0; j < deep_masked.dim(1) * deep_masked.dim(2); ++j) {
    diff = std::max(diff,
                    std::abs(deep_masked.vec()[j] - deep_masked.vec()[18 + j]));
  }
  CHECK(diff > 1e-9);
}

TEST_CASE("head forward") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(5);
  init_branch(ps, "v", cfg, 12, {4, 6}, rng);
  init_head(ps, "v", cfg, 4, HeadPool::mean, rng);
  auto act = random_tensor({3, 5, 16}, rng);
  auto logits = head_forward(ps, "v", cfg, act, HeadPool::mean);
  CHECK(logits.shape() == Shape{3, 4});

  // zero head weights give uniform logits, hence chance-level cross entropy
  std::fill(ps.at("v.cls_head.weight").vec().begin(), ps.at("v.cls_head.weight").vec().end(), 0.0);
  std::fill(ps.at("v.cls_head.bias").vec().begin(), ps.at("v.cls_head.bias").vec().end(), 0.0);
  auto uniform_logits = head_forward(ps, "v", cfg, act, HeadPool::mean);
  auto ce = cross_entropy_loss(uniform_logits, std::vector<int>{0, 1, 2});
  CHECK(ce.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("class-token pooling reads the prepended token") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(6);
  init_branch(ps, "v", cfg, 12, {4, 6}, rng);
  init_head(ps, "v", cfg, 3, HeadPool::class_token, rng);
  CHECK(ps.contains("v.cls_token"));
  auto tokens = random_tensor({2, 4, 12}, rng);
  auto pe = sincos_pos_embed<double>({2, 2}, cfg.d_model);
  auto taps = encoder_forward_with_taps(ps, "v", cfg, tokens, &pe, &ps.at("v.cls_token"));
  CHECK(taps.back().shape() == Shape{2, 5, 16});
  auto logits = head_forward(ps, "v", cfg, taps.back(), HeadPool::class_token);
  CHECK(logits.shape() == Shape{2, 3});
}

TEST_CASE("inflation preserves static-frame behavior") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(7);
  size_t img_dim = 12, ct = 2;
  init_branch(ps, "ventral", cfg, img_dim, {4, 6}, rng);
  inflate_ventral_to_dorsal(ps, cfg, img_dim, ct * img_dim, ct, {5, 7}, rng);

  CHECK(ps.contains("dorsal.embed.weight"));
  CHECK(ps.at("dorsal.embed.weight").shape() == Shape{24, 16});
  CHECK(ps.at("dorsal.block01.attn.qkv.weight").vec() ==
        ps.at("ventral.block01.attn.qkv.weight").vec());
  // copied, not aliased
  CHECK(ps.at("dorsal.block01.attn.qkv.weight").storage().get() !=
        ps.at("ventral.block01.attn.qkv.weight").storage().get());

  // a static cube (same patch twice) embeds exactly like the still patch
  Rng prng(8);
  auto patch = random_tensor({1, 1, 12}, prng);
  Tensor<double> cube({1, 1, 24});
  std::copy(patch.vec().begin(), patch.vec().end(), cube.data());
  std::copy(patch.vec().begin(), patch.vec().end(), cube.data() + 12);
  NoGrad ng;
  auto ve = linear(patch, ps.at("ventral.embed.weight"), ps.at("ventral.embed.bias"));
  auto de = linear(cube, ps.at("dorsal.embed.weight"), ps.at("dorsal.embed.bias"));
  for (size_t j = 0; j < 16; ++j) {
    CHECK(de.vec()[j] == doctest::Approx(ve.vec()[j]).epsilon(1e-12));
  }

  CHECK_THROWS_AS(inflate_ventral_to_dorsal(ps, cfg, img_dim, 24, 2, {5, 7}, rng),
                  ContractError);
}

TEST_CASE("shared region aliases exactly the chosen prefix") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(9);
  init_branch(ps, "ventral", cfg, 12, {4, 6}, rng);
  inflate_ventral_to_dorsal(ps, cfg, 12, 24, 2, {5, 7}, rng);

  install_shared_region(ps, cfg, Sharing::partial, 1);
  CHECK(ps.at("dorsal.block01.attn.qkv.weight").storage().get() ==
        ps.at("ventral.block01.attn.qkv.weight").storage().get());
  CHECK(ps.at("dorsal.block02.attn.qkv.weight").storage().get() !=
        ps.at("ventral.block02.attn.qkv.weight").storage().get());
  CHECK(!ps.at("dorsal.embed.weight").storage()->empty());
  CHECK(ps.at("dorsal.embed.weight").storage().get() !=
        ps.at("ventral.embed.weight").storage().get());

  // writing through one name is visible through the other
  ps.at("ventral.block01.ln1.beta").data()[0] = 42.0;
  CHECK(ps.at("dorsal.block01.ln1.beta").data()[0] == 42.0);

  // prefix past the second tap is rejected (second tap sits at block 2)
  CHECK_THROWS_AS(install_shared_region(ps, cfg, Sharing::partial, 3), ConfigError);

  CHECK(shared_param_names(cfg, Sharing::partial, 1).size() == 12);
  CHECK(shared_param_names(cfg, Sharing::none, 1).empty());
  CHECK(shared_param_names(cfg, Sharing::all, 0).size() == 24);
}

TEST_CASE("single-branch reconstruction pipeline gradcheck") {
  EncoderConfig cfg = tiny_cfg();
  ParamStore<double> ps;
  Rng rng(10);
  ImageGeom geom{8, 8, 1, 4};  // 4 tokens
  init_branch(ps, "v", cfg, geom.token_dim(), {6, 9}, rng);

  std::vector<MaskSpec> masks(2);
  Rng mrng(11);
  masks[0] = sample_random_mask(geom.n_tokens(), 0.5, mrng);
  masks[1] = sample_random_mask(geom.n_tokens(), 0.5, mrng);

  Rng drng(12);
  auto img0 = testutil::random_tensor({geom.n_tokens(), geom.token_dim()}, drng);
  auto img1 = testutil::random_tensor({geom.n_tokens(), geom.token_dim()}, drng);
  auto pe = sincos_pos_embed<double>({2, 2}, cfg.d_model);
  auto dpe = sincos_pos_embed<double>({2, 2}, cfg.dec_dim);

  // stack visible tokens and gathered positions
  size_t V = masks[0].n_visible();
  Tensor<double> vis({2, V, geom.token_dim()});
  Tensor<double> pos({2, V, cfg.d_model});
  const Tensor<double>* imgs[2] = {&img0, &img1};
  for (size_t b = 0; b < 2; ++b) {
    for (size_t j = 0; j < V; ++j) {
      size_t row = masks[b].visible_idx[j];
      std::copy(imgs[b]->data() + row * geom.token_dim(),
                imgs[b]->data() + (row + 1) * geom.token_dim(),
                vis.data() + (b * V + j) * geom.token_dim());
      std::copy(pe.data() + row * cfg.d_model, pe.data() + (row + 1) * cfg.d_model,
                pos.data() + (b * V + j) * cfg.d_model);
    }
  }
  Tensor<double> tgt0({2, masks[0].n_masked(), 6}, std::vector<double>(2 * masks[0].n_masked() * 6, 0.1));
  Tensor<double> tgt1({2, masks[0].n_masked(), 9}, std::vector<double>(2 * masks[0].n_masked() * 9, -0.2));

  auto fwd = [&]() {
    auto taps = encoder_forward_with_taps(ps, "v", cfg, vis, &pos);
    auto p0 = decoder_forward(ps, "v", 0, cfg, taps[0], masks, dpe, true);
    auto p1 = decoder_forward(ps, "v", 1, cfg, taps[1], masks, dpe, true);
    return add(mse_loss(p0, tgt0), mse_loss(p1, tgt1));
  };

  // sampled coordinates across every parameter kind
  ps.zero_grad();
  auto loss = fwd();
  backward(loss);
  auto value_fn = [&]() {
    NoGrad ng;
    return fwd().item();
  };
  Rng crng(13);
  double worst = 0;
  size_t checked = 0;
  for (size_t p = 0; p < ps.size(); ++p) {
    auto& t = ps.tensor(p);
    size_t n_coords = std::min<size_t>(3, t.size());
    for (size_t c = 0; c < n_coords; ++c) {
      size_t e = static_cast<size_t>(crng.uniform_int(t.size()));
      std::vector<CoordRef> coord{{p, e}};
      double fd = finite_diff_grad<double>(ps, value_fn, coord, 1e-6)[0];
      worst = std::max(worst, rel_err(t.grad()[e], fd));
      ++checked;
    }
  }
  CHECK(checked >= 60);
  CHECK(worst < 1e-4);
}
