#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "bimm/ops.hpp"
#include "bimm/param_store.hpp"
#include "bimm/rng.hpp"

namespace bimm {

// ---------------------------------------------------------------------------
// Configuration for one encoder branch plus its per-tap decoders.
// ---------------------------------------------------------------------------
struct EncoderConfig {
  size_t d_model = 96;
  size_t heads = 4;
  size_t depth = 12;
  size_t mlp_ratio = 4;
  std::vector<size_t> separation = {2, 4, 12};  // tap positions, 1-based block indices
  size_t dec_dim = 48;
  size_t dec_depth = 1;
  size_t dec_heads = 4;

  size_t n_taps() const { return separation.size(); }

  void validate() const {
    if (d_model == 0 || depth == 0 || heads == 0 || mlp_ratio == 0) {
      throw ConfigError("EncoderConfig: zero-sized field");
    }
    if (d_model % heads != 0) throw ConfigError("EncoderConfig: d_model not divisible by heads");
    if (dec_dim == 0 || dec_heads == 0 || dec_dim % dec_heads != 0) {
      throw ConfigError("EncoderConfig: decoder width not divisible by decoder heads");
    }
    if (separation.empty()) throw ConfigError("EncoderConfig: need at least one tap");
    for (size_t i = 0; i < separation.size(); ++i) {
      if (separation[i] == 0 || separation[i] > depth) {
        throw ConfigError("EncoderConfig: tap position out of range");
      }
      if (i > 0 && separation[i] <= separation[i - 1]) {
        throw ConfigError("EncoderConfig: tap positions must be strictly increasing");
      }
    }
    if (separation.back() != depth) {
      throw ConfigError("EncoderConfig: last tap must sit at the final block");
    }
  }
};

enum class Sharing { none, partial, all };

inline std::string sharing_name(Sharing s) {
  switch (s) {
    case Sharing::none: return "none";
    case Sharing::partial: return "partial";
    case Sharing::all: return "all";
  }
  return "?";
}

inline Sharing sharing_from_name(const std::string& s) {
  if (s == "none") return Sharing::none;
  if (s == "partial") return Sharing::partial;
  if (s == "all") return Sharing::all;
  throw ConfigError("unknown sharing mode: " + s);
}

enum class HeadPool { mean, class_token };

inline std::string pool_name(HeadPool p) {
  return p == HeadPool::mean ? "mean" : "class_token";
}

inline HeadPool pool_from_name(const std::string& s) {
  if (s == "mean") return HeadPool::mean;
  if (s == "class_token" || s == "cls") return HeadPool::class_token;
  throw ConfigError("unknown pool mode: " + s);
}

// ---------------------------------------------------------------------------
// Parameter naming. Blocks are 1-based and zero-padded: "<prefix>.block03".
// ---------------------------------------------------------------------------
inline std::string block_name(const std::string& prefix, size_t i) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%02zu", i);
  return prefix + ".block" + buf;
}

inline const std::vector<std::string>& block_param_suffixes() {
  static const std::vector<std::string> suffixes = {
      "ln1.gamma",         "ln1.beta",        "attn.qkv.weight", "attn.qkv.bias",
      "attn.proj.weight",  "attn.proj.bias",  "ln2.gamma",       "ln2.beta",
      "mlp.fc1.weight",    "mlp.fc1.bias",    "mlp.fc2.weight",  "mlp.fc2.bias"};
  return suffixes;
}

namespace detail {

template <class Real>
void init_linear(ParamStore<Real>& store, const std::string& base, size_t in, size_t out,
                 Rng& rng) {
  std::vector<Real> w(in * out);
  for (auto& v : w) v = static_cast<Real>(rng.trunc_normal(0.02));
  store.add(base + ".weight", Tensor<Real>({in, out}, std::move(w)));
  store.add(base + ".bias", Tensor<Real>({out}));
}

template <class Real>
void init_layer_norm(ParamStore<Real>& store, const std::string& base, size_t d) {
  store.add(base + ".gamma", Tensor<Real>::full({d}, Real(1)));
  store.add(base + ".beta", Tensor<Real>({d}));
}

template <class Real>
void init_block(ParamStore<Real>& store, const std::string& bp, size_t d, size_t mlp_ratio,
                Rng& rng) {
  init_layer_norm(store, bp + ".ln1", d);
  init_linear(store, bp + ".attn.qkv", d, 3 * d, rng);
  init_linear(store, bp + ".attn.proj", d, d, rng);
  init_layer_norm(store, bp + ".ln2", d);
  init_linear(store, bp + ".mlp.fc1", d, mlp_ratio * d, rng);
  init_linear(store, bp + ".mlp.fc2", mlp_ratio * d, d, rng);
}

}  // namespace detail

// Registers every parameter of one branch: token embedding, encoder blocks,
// final norm, shared mask token, and one decoder per tap. target_dims gives
// each decoder head's output width, shallow to deep.
template <class Real>
void init_branch(ParamStore<Real>& store, const std::string& prefix, const EncoderConfig& cfg,
                 size_t token_dim, const std::vector<size_t>& target_dims, Rng& rng) {
  cfg.validate();
  if (target_dims.size() != cfg.n_taps()) {
    throw ConfigError("init_branch: need one target dim per tap");
  }
  if (token_dim == 0) throw ConfigError("init_branch: zero token dim");
  detail::init_linear(store, prefix + ".embed", token_dim, cfg.d_model, rng);
  for (size_t b = 1; b <= cfg.depth; ++b) {
    detail::init_block(store, block_name(prefix, b), cfg.d_model, cfg.mlp_ratio, rng);
  }
  detail::init_layer_norm(store, prefix + ".norm", cfg.d_model);
  {
    std::vector<Real> tok(cfg.dec_dim);
    for (auto& v : tok) v = static_cast<Real>(rng.trunc_normal(0.02));
    store.add(prefix + ".mask_token", Tensor<Real>({cfg.dec_dim}, std::move(tok)));
  }
  for (size_t t = 0; t < cfg.n_taps(); ++t) {
    std::string dp = prefix + ".dec" + std::to_string(t + 1);
    detail::init_linear(store, dp + ".embed", cfg.d_model, cfg.dec_dim, rng);
    if (t == 0) {
      // shallowest readout stays linear: two affine layers with a gelu
      detail::init_linear(store, dp + ".fc", cfg.dec_dim, cfg.dec_dim, rng);
    } else {
      for (size_t b = 1; b <= cfg.dec_depth; ++b) {
        detail::init_block(store, block_name(dp, b), cfg.dec_dim, cfg.mlp_ratio, rng);
      }
      detail::init_layer_norm(store, dp + ".norm", cfg.dec_dim);
    }
    detail::init_linear(store, dp + ".head", cfg.dec_dim, target_dims[t], rng);
  }
}

// Classifier head; pool == class_token additionally registers the token that
// is prepended to the sequence.
template <class Real>
void init_head(ParamStore<Real>& store, const std::string& prefix, const EncoderConfig& cfg,
               size_t n_classes, HeadPool pool, Rng& rng) {
  if (n_classes == 0) throw ConfigError("init_head: need at least one class");
  if (pool == HeadPool::class_token && !store.contains(prefix + ".cls_token")) {
    std::vector<Real> tok(cfg.d_model);
    for (auto& v : tok) v = static_cast<Real>(rng.trunc_normal(0.02));
    store.add(prefix + ".cls_token", Tensor<Real>({cfg.d_model}, std::move(tok)));
  }
  detail::init_linear(store, prefix + ".cls_head", cfg.d_model, n_classes, rng);
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> transformer_block_forward(ParamStore<Real>& store, const std::string& bp,
                                       size_t heads, const Tensor<Real>& x) {
  auto h = layer_norm(x, store.at(bp + ".ln1.gamma"), store.at(bp + ".ln1.beta"));
  auto qkv = linear(h, store.at(bp + ".attn.qkv.weight"), store.at(bp + ".attn.qkv.bias"));
  auto att = attention(qkv, heads);
  auto proj = linear(att, store.at(bp + ".attn.proj.weight"), store.at(bp + ".attn.proj.bias"));
  auto x2 = add(x, proj);
  auto h2 = layer_norm(x2, store.at(bp + ".ln2.gamma"), store.at(bp + ".ln2.beta"));
  auto m1 = gelu(linear(h2, store.at(bp + ".mlp.fc1.weight"), store.at(bp + ".mlp.fc1.bias")));
  auto m2 = linear(m1, store.at(bp + ".mlp.fc2.weight"), store.at(bp + ".mlp.fc2.bias"));
  return add(x2, m2);
}

// Runs the encoder and returns the activation after each tap block, shallow
// to deep. tokens is (B, V, token_dim); pos, when given, is added after the
// embedding ((V, d) or (B, V, d)); cls, when given, is prepended after that.
template <class Real>
std::vector<Tensor<Real>> encoder_forward_with_taps(ParamStore<Real>& store,
                                                    const std::string& prefix,
                                                    const EncoderConfig& cfg,
                                                    const Tensor<Real>& tokens,
                                                    const Tensor<Real>* pos = nullptr,
                                                    const Tensor<Real>* cls = nullptr) {
  cfg.validate();
  if (tokens.ndim() != 3) throw ShapeError("encoder_forward: tokens must be (B, V, D_raw)");
  auto x = linear(tokens, store.at(prefix + ".embed.weight"), store.at(prefix + ".embed.bias"));
  if (pos) x = add(x, *pos);
  if (cls) x = prepend_token(x, *cls);
  std::vector<Tensor<Real>> taps;
  taps.reserve(cfg.n_taps());
  size_t next_tap = 0;
  for (size_t b = 1; b <= cfg.depth; ++b) {
    x = transformer_block_forward(store, block_name(prefix, b), cfg.heads, x);
    if (next_tap < cfg.separation.size() && cfg.separation[next_tap] == b) {
      taps.push_back(x);
      ++next_tap;
    }
  }
  return taps;
}

// Lightweight per-tap decoder. Projects tap activations to the decoder
// width, rebuilds the full token sequence with the branch's mask token,
// adds decoder position embeddings, runs the decoder body, and reads out
// regression predictions. With masked_only the readout covers the masked
// rows (ascending); otherwise every row.
//
// The shallowest decoder's body is purely pointwise (affine, gelu, affine),
// so its masked-row outputs depend only on (mask token + position).
template <class Real>
Tensor<Real> decoder_forward(ParamStore<Real>& store, const std::string& prefix, size_t tap_index,
                             const EncoderConfig& cfg, const Tensor<Real>& tap_act,
                             const std::vector<MaskSpec>& masks, const Tensor<Real>& dec_pos,
                             bool masked_only) {
  if (tap_index >= cfg.n_taps()) throw ContractError("decoder_forward: tap index out of range");
  if (tap_act.ndim() != 3) throw ShapeError("decoder_forward: tap activations must be (B, V, d)");
  size_t B = tap_act.dim(0);
  if (masks.size() != B) throw ShapeError("decoder_forward: one MaskSpec per sample required");
  size_t N = masks[0].n_tokens;
  if (dec_pos.shape() != Shape{N, cfg.dec_dim}) {
    throw ShapeError("decoder_forward: decoder pos embed must be (N, dec_dim)");
  }
  std::string dp = prefix + ".dec" + std::to_string(tap_index + 1);

  auto z = linear(tap_act, store.at(dp + ".embed.weight"), store.at(dp + ".embed.bias"));
  auto seq = assemble_sequence(z, store.at(prefix + ".mask_token"), masks);
  seq = add(seq, dec_pos);

  std::vector<std::vector<size_t>> readout(B);
  for (size_t b = 0; b < B; ++b) {
    if (masked_only) {
      readout[b] = masks[b].masked_idx;
    } else {
      readout[b].resize(N);
      for (size_t i = 0; i < N; ++i) readout[b][i] = i;
    }
  }

  if (tap_index == 0) {
    auto rows = gather_rows(seq, readout);
    auto h = gelu(linear(rows, store.at(dp + ".fc.weight"), store.at(dp + ".fc.bias")));
    return linear(h, store.at(dp + ".head.weight"), store.at(dp + ".head.bias"));
  }
  for (size_t b = 1; b <= cfg.dec_depth; ++b) {
    seq = transformer_block_forward(store, block_name(dp, b), cfg.dec_heads, seq);
  }
  seq = layer_norm(seq, store.at(dp + ".norm.gamma"), store.at(dp + ".norm.beta"));
  auto rows = gather_rows(seq, readout);
  return linear(rows, store.at(dp + ".head.weight"), store.at(dp + ".head.bias"));
}

// Classification readout on the final tap: final norm, pooling, affine head.
template <class Real>
Tensor<Real> head_forward(ParamStore<Real>& store, const std::string& prefix,
                          const EncoderConfig& cfg, const Tensor<Real>& final_act,
                          HeadPool pool) {
  auto normed =
      layer_norm(final_act, store.at(prefix + ".norm.gamma"), store.at(prefix + ".norm.beta"));
  Tensor<Real> pooled =
      pool == HeadPool::mean ? mean_rows(normed) : take_row(normed, 0);
  (void)cfg;
  return linear(pooled, store.at(prefix + ".cls_head.weight"), store.at(prefix + ".cls_head.bias"));
}

// ---------------------------------------------------------------------------
// Ventral -> dorsal transfer. Initializes a fresh dorsal branch, then copies
// every ventral block and the final norm verbatim. The token embedding is
// inflated: a cube token stacks ct frame patches, so the image embedding
// rows are tiled across the ct slices and divided by ct, which makes a
// static clip embed exactly like its still frame. Decoders and the mask
// token stay freshly initialized.
// ---------------------------------------------------------------------------
template <class Real>
void inflate_ventral_to_dorsal(ParamStore<Real>& store, const EncoderConfig& cfg,
                               size_t image_token_dim, size_t clip_token_dim, size_t ct,
                               const std::vector<size_t>& dorsal_target_dims, Rng& rng) {
  cfg.validate();
  if (clip_token_dim != ct * image_token_dim) {
    throw ConfigError("inflate: clip token dim must be ct * image token dim");
  }
  if (store.contains("dorsal.embed.weight")) {
    throw ContractError("inflate: dorsal branch already present");
  }
  if (!store.contains("ventral.embed.weight")) {
    throw ContractError("inflate: ventral branch missing");
  }
  init_branch(store, "dorsal", cfg, clip_token_dim, dorsal_target_dims, rng);

  const auto& vw = store.at("ventral.embed.weight");
  auto& dw = store.at("dorsal.embed.weight");
  Real inv = Real(1) / Real(ct);
  for (size_t f = 0; f < ct; ++f) {
    for (size_t i = 0; i < image_token_dim; ++i) {
      for (size_t j = 0; j < cfg.d_model; ++j) {
        dw.data()[(f * image_token_dim + i) * cfg.d_model + j] =
            vw.data()[i * cfg.d_model + j] * inv;
      }
    }
  }
  store.at("dorsal.embed.bias").vec() = store.at("ventral.embed.bias").vec();

  for (size_t b = 1; b <= cfg.depth; ++b) {
    for (const auto& suffix : block_param_suffixes()) {
      store.at(block_name("dorsal", b) + "." + suffix).vec() =
          store.at(block_name("ventral", b) + "." + suffix).vec();
    }
  }
  store.at("dorsal.norm.gamma").vec() = store.at("ventral.norm.gamma").vec();
  store.at("dorsal.norm.beta").vec() = store.at("ventral.norm.beta").vec();
}

// ---------------------------------------------------------------------------
// Weight sharing: rebinds dorsal block parameters to the ventral tensors so
// both names address one storage. Embeddings, decoders, norms, and heads are
// never shared. partial shares blocks 1..shared_prefix; the prefix must not
// reach past the second tap.
// ---------------------------------------------------------------------------
template <class Real>
void install_shared_region(ParamStore<Real>& store, const EncoderConfig& cfg, Sharing mode,
                           size_t shared_prefix) {
  cfg.validate();
  size_t k = 0;
  if (mode == Sharing::partial) {
    size_t limit = cfg.separation.size() >= 2 ? cfg.separation[1] : cfg.depth;
    if (shared_prefix > limit) {
      throw ConfigError("install_shared_region: shared prefix " + std::to_string(shared_prefix) +
                        " reaches past the second tap at block " + std::to_string(limit));
    }
    k = shared_prefix;
  } else if (mode == Sharing::all) {
    k = cfg.depth;
  }
  for (size_t b = 1; b <= k; ++b) {
    for (const auto& suffix : block_param_suffixes()) {
      store.rebind(block_name("dorsal", b) + "." + suffix,
                   store.at(block_name("ventral", b) + "." + suffix));
    }
  }
}

// Names of the parameters aliased by the active sharing mode.
inline std::vector<std::string> shared_param_names(const EncoderConfig& cfg, Sharing mode,
                                                   size_t shared_prefix) {
  size_t k = mode == Sharing::all ? cfg.depth : (mode == Sharing::partial ? shared_prefix : 0);
  std::vector<std::string> out;
  for (size_t b = 1; b <= k; ++b) {
    for (const auto& suffix : block_param_suffixes()) {
      out.push_back(block_name("ventral", b) + "." + suffix);
    }
  }
  return out;
}

}  // namespace bimm
