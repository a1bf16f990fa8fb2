#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "bimm/data.hpp"
#include "bimm/model.hpp"
#include "bimm/optim.hpp"
#include "bimm/schedule.hpp"
#include "bimm/targets.hpp"

namespace bimm {

// ---------------------------------------------------------------------------
// Training configuration shared by the pretraining stages.
// ---------------------------------------------------------------------------
struct TrainConfig {
  EncoderConfig encoder;
  TargetConfig targets;
  std::vector<TargetKind> ventral_kinds = default_ventral_kinds();
  std::vector<TargetKind> dorsal_kinds = default_dorsal_kinds();
  std::vector<double> tap_weights = {1.0, 1.0, 1.0};
  double lambda = 1.0;  // dorsal loss weight in the joint objective
  Sharing sharing = Sharing::partial;
  size_t shared_prefix = 4;
  double image_mask_ratio = 0.75;
  double clip_mask_ratio = 0.9;
  size_t frames_per_clip = 1;  // ventral samples per clip during joint training
  bool loss_on_all = false;    // reconstruct every token instead of masked only
  HeadPool pool = HeadPool::mean;
  LrSchedule schedule;
  AdamWConfig adamw;
  size_t batch_images = 16;
  size_t batch_clips = 8;
  uint64_t seed = 0;
  bool log_wall_ms = false;  // wall time makes logs nondeterministic; off by default

  void validate() const {
    encoder.validate();
    schedule.validate();
    if (!(lambda >= 0.0)) throw ConfigError("TrainConfig: lambda must be nonnegative");
    if (tap_weights.size() != encoder.n_taps()) {
      throw ConfigError("TrainConfig: need one tap weight per tap");
    }
    double total = 0.0;
    for (double w : tap_weights) {
      if (!(w >= 0.0)) throw ConfigError("TrainConfig: tap weights must be nonnegative");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("TrainConfig: at least one tap weight must be positive");
    if (ventral_kinds.size() != encoder.n_taps() || dorsal_kinds.size() != encoder.n_taps()) {
      throw ConfigError("TrainConfig: need one target kind per tap");
    }
    if (!(image_mask_ratio >= 0.0 && image_mask_ratio < 1.0) ||
        !(clip_mask_ratio >= 0.0 && clip_mask_ratio < 1.0)) {
      throw ConfigError("TrainConfig: mask ratios must lie in [0, 1)");
    }
    if (batch_images == 0 || batch_clips == 0) throw ConfigError("TrainConfig: zero batch size");
    if (frames_per_clip == 0) throw ConfigError("TrainConfig: frames_per_clip must be positive");
    if (sharing == Sharing::partial && encoder.n_taps() >= 2 &&
        shared_prefix > encoder.separation[1]) {
      throw ConfigError("TrainConfig: shared prefix reaches past the second tap");
    }
  }
};

// Per-step record handed to the caller; wall_ms stays -1 unless timing is on.
struct StepReport {
  size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_v = 0.0;
  double loss_d = 0.0;
  std::vector<double> taps_v;
  std::vector<double> taps_d;
  double wall_ms = -1.0;
};

using StepCallback = std::function<void(const StepReport&)>;

// ---------------------------------------------------------------------------
// Static per-branch data: token grid, position embeddings, target kinds.
// ---------------------------------------------------------------------------
template <class Real>
struct BranchGeom {
  std::vector<size_t> grid;  // (gh, gw) or (gt, gh, gw)
  size_t n_tokens = 0;
  size_t spatial_tokens = 0;   // tube masks sample over these
  size_t temporal_tokens = 1;  // 1 for images
  Tensor<Real> enc_pos;        // (N, d_model)
  Tensor<Real> dec_pos;        // (N, dec_dim)
};

template <class Real>
BranchGeom<Real> make_branch_geom(const ImageGeom& g, const EncoderConfig& cfg) {
  g.validate();
  BranchGeom<Real> bg;
  bg.grid = {g.grid_h(), g.grid_w()};
  bg.n_tokens = g.n_tokens();
  bg.spatial_tokens = g.n_tokens();
  bg.enc_pos = sincos_pos_embed<Real>(bg.grid, cfg.d_model);
  bg.dec_pos = sincos_pos_embed<Real>(bg.grid, cfg.dec_dim);
  return bg;
}

template <class Real>
BranchGeom<Real> make_branch_geom(const ClipGeom& g, const EncoderConfig& cfg) {
  g.validate();
  BranchGeom<Real> bg;
  bg.grid = {g.grid_t(), g.grid_h(), g.grid_w()};
  bg.n_tokens = g.n_tokens();
  bg.spatial_tokens = g.spatial_tokens();
  bg.temporal_tokens = g.grid_t();
  bg.enc_pos = sincos_pos_embed<Real>(bg.grid, cfg.d_model);
  bg.dec_pos = sincos_pos_embed<Real>(bg.grid, cfg.dec_dim);
  return bg;
}

// One branch's minibatch: visible tokens, their position rows, the masks,
// and per-tap regression targets at the readout rows.
template <class Real>
struct BranchBatch {
  Tensor<Real> visible;  // (B, n_vis, token_dim)
  Tensor<Real> pos;      // (B, n_vis, d_model)
  std::vector<MaskSpec> masks;
  std::vector<Tensor<Real>> tap_targets;  // each (B, rows, target_dim)
};

namespace detail {

template <class Real>
Tensor<Real> stack_mats(const std::vector<Tensor<Real>>& mats) {
  size_t B = mats.size();
  size_t R = mats[0].dim(0), D = mats[0].dim(1);
  Tensor<Real> out({B, R, D});
  for (size_t b = 0; b < B; ++b) {
    if (mats[b].shape() != Shape{R, D}) throw ShapeError("stack_mats: ragged sample matrices");
    std::copy(mats[b].data(), mats[b].data() + R * D, out.data() + b * R * D);
  }
  return out;
}

template <class Real>
Tensor<Real> gather_pos_rows(const Tensor<Real>& pos, const std::vector<MaskSpec>& masks) {
  size_t B = masks.size();
  size_t n_vis = masks[0].n_visible();
  size_t d = pos.dim(1);
  Tensor<Real> out({B, n_vis, d});
  for (size_t b = 0; b < B; ++b) {
    for (size_t i = 0; i < n_vis; ++i) {
      const Real* src = pos.data() + masks[b].visible_idx[i] * d;
      std::copy(src, src + d, out.data() + (b * n_vis + i) * d);
    }
  }
  return out;
}

template <class Real>
void append_sample_targets(const std::vector<TargetMatrix<Real>>& tms, const MaskSpec& mask,
                           bool loss_on_all, std::vector<std::vector<Tensor<Real>>>& per_tap) {
  for (size_t t = 0; t < tms.size(); ++t) {
    if (loss_on_all) {
      per_tap[t].push_back(tms[t].values.clone());
    } else {
      per_tap[t].push_back(gather_masked_rows(tms[t], mask));
    }
  }
}

}  // namespace detail

// Builds a ventral minibatch from still images (or single frames).
template <class Real>
BranchBatch<Real> prepare_image_batch(const std::vector<std::vector<float>>& images,
                                      const std::vector<size_t>& idx, const ImageGeom& g,
                                      const BranchGeom<Real>& bg,
                                      const std::vector<TargetKind>& kinds,
                                      const TargetConfig& tcfg, double mask_ratio,
                                      bool loss_on_all, Rng& rng) {
  if (idx.empty()) throw ContractError("prepare_image_batch: empty batch");
  BranchBatch<Real> batch;
  std::vector<Tensor<Real>> vis_mats;
  std::vector<std::vector<Tensor<Real>>> per_tap(kinds.size());
  for (size_t i : idx) {
    if (i >= images.size()) throw ContractError("prepare_image_batch: sample index out of range");
    std::vector<Real> px(images[i].begin(), images[i].end());
    auto grid = patchify_image(px, g);
    MaskSpec mask = sample_random_mask(bg.n_tokens, mask_ratio, rng);
    vis_mats.push_back(gather_visible(grid, mask));
    auto tms = build_image_targets(px, g, kinds, tcfg);
    detail::append_sample_targets(tms, mask, loss_on_all, per_tap);
    batch.masks.push_back(std::move(mask));
  }
  batch.visible = detail::stack_mats(vis_mats);
  batch.pos = detail::gather_pos_rows(bg.enc_pos, batch.masks);
  for (auto& mats : per_tap) batch.tap_targets.push_back(detail::stack_mats(mats));
  return batch;
}

// Builds a dorsal minibatch from clips; masks are temporally consistent tubes.
template <class Real>
BranchBatch<Real> prepare_clip_batch(const std::vector<std::vector<float>>& clips,
                                     const std::vector<size_t>& idx, const ClipGeom& g,
                                     const BranchGeom<Real>& bg,
                                     const std::vector<TargetKind>& kinds,
                                     const TargetConfig& tcfg, double mask_ratio,
                                     bool loss_on_all, Rng& rng) {
  if (idx.empty()) throw ContractError("prepare_clip_batch: empty batch");
  BranchBatch<Real> batch;
  std::vector<Tensor<Real>> vis_mats;
  std::vector<std::vector<Tensor<Real>>> per_tap(kinds.size());
  for (size_t i : idx) {
    if (i >= clips.size()) throw ContractError("prepare_clip_batch: sample index out of range");
    std::vector<Real> px(clips[i].begin(), clips[i].end());
    auto grid = cubify_clip(px, g);
    MaskSpec mask = sample_tube_mask(bg.spatial_tokens, bg.temporal_tokens, mask_ratio, rng);
    vis_mats.push_back(gather_visible(grid, mask));
    auto tms = build_clip_targets(px, g, kinds, tcfg);
    detail::append_sample_targets(tms, mask, loss_on_all, per_tap);
    batch.masks.push_back(std::move(mask));
  }
  batch.visible = detail::stack_mats(vis_mats);
  batch.pos = detail::gather_pos_rows(bg.enc_pos, batch.masks);
  for (auto& mats : per_tap) batch.tap_targets.push_back(detail::stack_mats(mats));
  return batch;
}

// ---------------------------------------------------------------------------
// Losses. One branch's loss is the tap-weighted sum of per-tap reconstruction
// errors; taps with zero weight are skipped entirely.
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> branch_loss(ParamStore<Real>& store, const std::string& prefix,
                         const EncoderConfig& cfg, const BranchBatch<Real>& batch,
                         const Tensor<Real>& dec_pos, const std::vector<double>& tap_weights,
                         bool loss_on_all, std::vector<double>* tap_losses = nullptr) {
  if (tap_weights.size() != cfg.n_taps()) {
    throw ContractError("branch_loss: need one tap weight per tap");
  }
  if (batch.tap_targets.size() != cfg.n_taps()) {
    throw ContractError("branch_loss: need one target tensor per tap");
  }
  auto taps = encoder_forward_with_taps(store, prefix, cfg, batch.visible, &batch.pos);
  if (tap_losses) tap_losses->assign(cfg.n_taps(), 0.0);
  Tensor<Real> total;
  bool first = true;
  for (size_t t = 0; t < cfg.n_taps(); ++t) {
    if (tap_weights[t] == 0.0) continue;
    auto pred = decoder_forward(store, prefix, t, cfg, taps[t], batch.masks, dec_pos,
                                !loss_on_all);
    auto l = mse_loss(pred, batch.tap_targets[t]);
    if (tap_losses) (*tap_losses)[t] = static_cast<double>(l.item());
    auto weighted = tap_weights[t] == 1.0 ? l : mul_scalar(l, Real(tap_weights[t]));
    total = first ? weighted : add(total, weighted);
    first = false;
  }
  // all weights zero: the loss is the empty sum, constant and gradient-free
  if (first) return Tensor<Real>::scalar(Real(0));
  return total;
}

// ---------------------------------------------------------------------------
// Pretraining. Stage one trains the ventral branch alone on still images;
// stage two trains both branches jointly, the ventral side seeing one random
// frame per clip. Step s draws all its randomness from child stream s, so a
// run's data order is independent of logging or evaluation.
// ---------------------------------------------------------------------------
namespace detail {

inline std::vector<size_t> draw_batch(size_t n, size_t batch, Rng& rng) {
  if (batch >= n) {
    std::vector<size_t> all(n);
    for (size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  return rng.sample_without_replacement(n, batch);
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

template <class Real>
void require_finite_loss(const Tensor<Real>& loss, size_t step) {
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("training loss is not finite at step " + std::to_string(step));
  }
}

}  // namespace detail

template <class Real>
void pretrain_ventral(ParamStore<Real>& store, OptimState<Real>& opt, const TrainConfig& tc,
                      const ImageDataset& ds, size_t steps, const StepCallback& cb = {}) {
  tc.validate();
  if (ds.size() == 0) throw DataError("pretrain_ventral: empty dataset");
  auto bg = make_branch_geom<Real>(ds.geom, tc.encoder);
  Rng root(tc.seed);
  for (size_t step = 0; step < steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    Rng srng = root.child(step);
    auto idx = detail::draw_batch(ds.size(), tc.batch_images, srng);
    auto batch = prepare_image_batch(ds.images, idx, ds.geom, bg, tc.ventral_kinds, tc.targets,
                                     tc.image_mask_ratio, tc.loss_on_all, srng);
    store.zero_grad();
    StepReport rep;
    auto loss = branch_loss(store, "ventral", tc.encoder, batch, bg.dec_pos, tc.tap_weights,
                            tc.loss_on_all, &rep.taps_v);
    detail::require_finite_loss(loss, step);
    backward(loss);
    double lr = lr_at_step(tc.schedule, step);
    if (lr > 0.0) adamw_step(store, opt, Real(lr), tc.adamw);
    if (cb) {
      rep.step = step;
      rep.lr = lr;
      rep.loss = rep.loss_v = static_cast<double>(loss.item());
      if (tc.log_wall_ms) rep.wall_ms = detail::elapsed_ms(t0);
      cb(rep);
    }
  }
}

template <class Real>
void pretrain_joint(ParamStore<Real>& store, OptimState<Real>& opt, const TrainConfig& tc,
                    const ClipDataset& ds, size_t steps, const StepCallback& cb = {}) {
  tc.validate();
  if (ds.size() == 0) throw DataError("pretrain_joint: empty dataset");
  ImageGeom frame_geom = ds.geom.frame_geom();
  auto vbg = make_branch_geom<Real>(frame_geom, tc.encoder);
  auto dbg = make_branch_geom<Real>(ds.geom, tc.encoder);
  size_t frame_size = ds.geom.h * ds.geom.w * ds.geom.c;
  Rng root(tc.seed);
  for (size_t step = 0; step < steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    Rng srng = root.child(step);
    auto cidx = detail::draw_batch(ds.size(), tc.batch_clips, srng);

    // ventral sees randomly chosen frames of each sampled clip
    std::vector<std::vector<float>> frames;
    frames.reserve(cidx.size() * tc.frames_per_clip);
    for (size_t i : cidx) {
      for (size_t k = 0; k < tc.frames_per_clip; ++k) {
        size_t f = static_cast<size_t>(srng.uniform_int(ds.geom.t));
        frames.emplace_back(ds.clips[i].begin() + f * frame_size,
                            ds.clips[i].begin() + (f + 1) * frame_size);
      }
    }
    std::vector<size_t> fidx(frames.size());
    for (size_t i = 0; i < fidx.size(); ++i) fidx[i] = i;

    auto vbatch = prepare_image_batch(frames, fidx, frame_geom, vbg, tc.ventral_kinds, tc.targets,
                                      tc.image_mask_ratio, tc.loss_on_all, srng);
    auto dbatch = prepare_clip_batch(ds.clips, cidx, ds.geom, dbg, tc.dorsal_kinds, tc.targets,
                                     tc.clip_mask_ratio, tc.loss_on_all, srng);

    store.zero_grad();
    StepReport rep;
    auto lv = branch_loss(store, "ventral", tc.encoder, vbatch, vbg.dec_pos, tc.tap_weights,
                          tc.loss_on_all, &rep.taps_v);
    auto ld = branch_loss(store, "dorsal", tc.encoder, dbatch, dbg.dec_pos, tc.tap_weights,
                          tc.loss_on_all, &rep.taps_d);
    auto loss = add(lv, mul_scalar(ld, Real(tc.lambda)));
    detail::require_finite_loss(loss, step);
    backward(loss);
    double lr = lr_at_step(tc.schedule, step);
    if (lr > 0.0) adamw_step(store, opt, Real(lr), tc.adamw);
    if (cb) {
      rep.step = step;
      rep.lr = lr;
      rep.loss = static_cast<double>(loss.item());
      rep.loss_v = static_cast<double>(lv.item());
      rep.loss_d = static_cast<double>(ld.item());
      if (tc.log_wall_ms) rep.wall_ms = detail::elapsed_ms(t0);
      cb(rep);
    }
  }
}

// ---------------------------------------------------------------------------
// Classification. Finetuning updates the branch encoder and classifier head;
// probing trains the head on frozen pooled features.
// ---------------------------------------------------------------------------
struct FitConfig {
  size_t epochs = 10;
  size_t batch = 16;
  LrSchedule schedule;
  AdamWConfig adamw{0.9, 0.999, 1e-8, 0.05};
  HeadPool pool = HeadPool::mean;
  uint64_t seed = 0;

  void validate() const {
    schedule.validate();
    if (epochs == 0 || batch == 0) throw ConfigError("FitConfig: zero epochs or batch");
  }
};

struct FitReport {
  size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = -1.0;  // -1 when no held-out set was given
};

using FitCallback = std::function<void(const FitReport&)>;

inline void check_labels(const std::vector<int>& labels, size_t n_classes,
                         const std::string& where) {
  for (int l : labels) {
    if (l < 0 || static_cast<size_t>(l) >= n_classes) {
      throw DataError(where + ": label " + std::to_string(l) + " outside [0, " +
                      std::to_string(n_classes) + ")");
    }
  }
}

// The parameters a classification pass can reach: embedding, encoder blocks,
// final norm, classifier head, and the class token when one is pooled.
template <class Real>
ParamStore<Real> classifier_params(ParamStore<Real>& store, const std::string& prefix,
                                   const EncoderConfig& cfg, HeadPool pool) {
  ParamStore<Real> sub;
  auto take = [&](const std::string& name) { sub.add(name, store.at(name)); };
  take(prefix + ".embed.weight");
  take(prefix + ".embed.bias");
  for (size_t b = 1; b <= cfg.depth; ++b) {
    for (const auto& suffix : block_param_suffixes()) {
      take(block_name(prefix, b) + "." + suffix);
    }
  }
  take(prefix + ".norm.gamma");
  take(prefix + ".norm.beta");
  if (pool == HeadPool::class_token) take(prefix + ".cls_token");
  take(prefix + ".cls_head.weight");
  take(prefix + ".cls_head.bias");
  return sub;
}

namespace detail {

// tokens for one clip, as a (1, N, D) batch
template <class Real>
Tensor<Real> clip_tokens(const std::vector<float>& clip, const ClipGeom& g) {
  std::vector<Real> px(clip.begin(), clip.end());
  auto grid = cubify_clip(px, g);
  size_t N = grid.tokens.dim(0), D = grid.tokens.dim(1);
  Tensor<Real> out({size_t{1}, N, D});
  std::copy(grid.tokens.data(), grid.tokens.data() + N * D, out.data());
  return out;
}

template <class Real>
Tensor<Real> batch_clip_tokens(const ClipDataset& ds, const std::vector<size_t>& idx) {
  std::vector<Real> px(ds.clips[idx[0]].begin(), ds.clips[idx[0]].end());
  auto first = cubify_clip(px, ds.geom);
  size_t N = first.tokens.dim(0), D = first.tokens.dim(1);
  Tensor<Real> out({idx.size(), N, D});
  std::copy(first.tokens.data(), first.tokens.data() + N * D, out.data());
  for (size_t b = 1; b < idx.size(); ++b) {
    px.assign(ds.clips[idx[b]].begin(), ds.clips[idx[b]].end());
    auto grid = cubify_clip(px, ds.geom);
    std::copy(grid.tokens.data(), grid.tokens.data() + N * D, out.data() + b * N * D);
  }
  return out;
}

}  // namespace detail

// Logits for a batch of clips through one branch's encoder and head.
template <class Real>
Tensor<Real> classify_clips(ParamStore<Real>& store, const std::string& prefix,
                            const EncoderConfig& cfg, const ClipDataset& ds,
                            const std::vector<size_t>& idx, const BranchGeom<Real>& bg,
                            HeadPool pool) {
  auto tokens = detail::batch_clip_tokens<Real>(ds, idx);
  const Tensor<Real>* cls = nullptr;
  Tensor<Real> cls_tok;
  if (pool == HeadPool::class_token) {
    cls_tok = store.at(prefix + ".cls_token");
    cls = &cls_tok;
  }
  auto taps = encoder_forward_with_taps(store, prefix, cfg, tokens, &bg.enc_pos, cls);
  return head_forward(store, prefix, cfg, taps.back(), pool);
}

template <class Real>
double accuracy(const Tensor<Real>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("accuracy: logits must be (B, C) with one label per row");
  }
  size_t B = logits.dim(0), C = logits.dim(1);
  size_t hits = 0;
  for (size_t b = 0; b < B; ++b) {
    const Real* row = logits.data() + b * C;
    size_t best = 0;
    for (size_t j = 1; j < C; ++j)
      if (row[j] > row[best]) best = j;
    if (static_cast<int>(best) == labels[b]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(B);
}

template <class Real>
double evaluate_clips(ParamStore<Real>& store, const std::string& prefix, const EncoderConfig& cfg,
                      const ClipDataset& ds, const BranchGeom<Real>& bg, HeadPool pool,
                      size_t batch = 32) {
  NoGrad ng;
  size_t hits = 0;
  for (size_t start = 0; start < ds.size(); start += batch) {
    size_t stop = std::min(ds.size(), start + batch);
    std::vector<size_t> idx;
    std::vector<int> labels;
    for (size_t i = start; i < stop; ++i) {
      idx.push_back(i);
      labels.push_back(ds.labels[i]);
    }
    auto logits = classify_clips(store, prefix, cfg, ds, idx, bg, pool);
    hits += static_cast<size_t>(accuracy(logits, labels) * static_cast<double>(idx.size()) + 0.5);
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// Supervised finetuning of one branch on labeled clips.
template <class Real>
void finetune_clips(ParamStore<Real>& store, const std::string& prefix, const EncoderConfig& cfg,
                    const FitConfig& fc, const ClipDataset& ds, const FitCallback& cb = {},
                    const ClipDataset* eval_ds = nullptr) {
  fc.validate();
  cfg.validate();
  if (ds.size() == 0) throw DataError("finetune_clips: empty dataset");
  if (ds.n_classes < 2) throw DataError("finetune_clips: need at least two classes");
  check_labels(ds.labels, ds.n_classes, "finetune_clips");
  auto bg = make_branch_geom<Real>(ds.geom, cfg);
  auto sub = classifier_params(store, prefix, cfg, fc.pool);
  OptimState<Real> opt;
  Rng root(fc.seed);
  size_t step = 0;
  for (size_t epoch = 0; epoch < fc.epochs; ++epoch) {
    Rng erng = root.child(epoch);
    std::vector<size_t> order(ds.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    erng.shuffle(order);
    double loss_sum = 0.0, acc_sum = 0.0;
    size_t batches = 0;
    double lr = 0.0;
    for (size_t start = 0; start < order.size(); start += fc.batch) {
      size_t stop = std::min(order.size(), start + fc.batch);
      std::vector<size_t> idx(order.begin() + start, order.begin() + stop);
      std::vector<int> labels;
      for (size_t i : idx) labels.push_back(ds.labels[i]);
      sub.zero_grad();
      auto logits = classify_clips(store, prefix, cfg, ds, idx, bg, fc.pool);
      auto loss = cross_entropy_loss(logits, labels);
      detail::require_finite_loss(loss, step);
      backward(loss);
      lr = lr_at_step(fc.schedule, step);
      if (lr > 0.0) adamw_step(sub, opt, Real(lr), fc.adamw);
      ++step;
      loss_sum += static_cast<double>(loss.item());
      acc_sum += accuracy(logits, labels);
      ++batches;
    }
    if (cb) {
      FitReport rep;
      rep.epoch = epoch;
      rep.lr = lr;
      rep.loss = loss_sum / static_cast<double>(batches);
      rep.train_acc = acc_sum / static_cast<double>(batches);
      if (eval_ds) rep.eval_acc = evaluate_clips(store, prefix, cfg, *eval_ds, bg, fc.pool);
      cb(rep);
    }
  }
}

// Linear probe: pooled features are computed once with the encoder frozen,
// then only the classifier head is fitted.
template <class Real>
void probe_clips(ParamStore<Real>& store, const std::string& prefix, const EncoderConfig& cfg,
                 const FitConfig& fc, const ClipDataset& ds, const FitCallback& cb = {},
                 const ClipDataset* eval_ds = nullptr) {
  fc.validate();
  cfg.validate();
  if (ds.size() == 0) throw DataError("probe_clips: empty dataset");
  if (ds.n_classes < 2) throw DataError("probe_clips: need at least two classes");
  check_labels(ds.labels, ds.n_classes, "probe_clips");
  auto bg = make_branch_geom<Real>(ds.geom, cfg);

  Tensor<Real> feats({ds.size(), cfg.d_model});
  {
    NoGrad ng;
    size_t batch = 32;
    for (size_t start = 0; start < ds.size(); start += batch) {
      size_t stop = std::min(ds.size(), start + batch);
      std::vector<size_t> idx;
      for (size_t i = start; i < stop; ++i) idx.push_back(i);
      auto tokens = detail::batch_clip_tokens<Real>(ds, idx);
      const Tensor<Real>* cls = nullptr;
      Tensor<Real> cls_tok;
      if (fc.pool == HeadPool::class_token) {
        cls_tok = store.at(prefix + ".cls_token");
        cls = &cls_tok;
      }
      auto taps = encoder_forward_with_taps(store, prefix, cfg, tokens, &bg.enc_pos, cls);
      auto normed = layer_norm(taps.back(), store.at(prefix + ".norm.gamma"),
                               store.at(prefix + ".norm.beta"));
      Tensor<Real> pooled =
          fc.pool == HeadPool::mean ? mean_rows(normed) : take_row(normed, 0);
      std::copy(pooled.data(), pooled.data() + pooled.size(), feats.data() + start * cfg.d_model);
    }
  }

  ParamStore<Real> sub;
  sub.add(prefix + ".cls_head.weight", store.at(prefix + ".cls_head.weight"));
  sub.add(prefix + ".cls_head.bias", store.at(prefix + ".cls_head.bias"));
  OptimState<Real> opt;
  Rng root(fc.seed);
  size_t step = 0;
  for (size_t epoch = 0; epoch < fc.epochs; ++epoch) {
    Rng erng = root.child(epoch);
    std::vector<size_t> order(ds.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    erng.shuffle(order);
    double loss_sum = 0.0, acc_sum = 0.0;
    size_t batches = 0;
    double lr = 0.0;
    for (size_t start = 0; start < order.size(); start += fc.batch) {
      size_t stop = std::min(order.size(), start + fc.batch);
      size_t B = stop - start;
      Tensor<Real> x({B, cfg.d_model});
      std::vector<int> labels;
      for (size_t b = 0; b < B; ++b) {
        size_t i = order[start + b];
        std::copy(feats.data() + i * cfg.d_model, feats.data() + (i + 1) * cfg.d_model,
                  x.data() + b * cfg.d_model);
        labels.push_back(ds.labels[i]);
      }
      sub.zero_grad();
      auto logits = linear(x, store.at(prefix + ".cls_head.weight"),
                           store.at(prefix + ".cls_head.bias"));
      auto loss = cross_entropy_loss(logits, labels);
      detail::require_finite_loss(loss, step);
      backward(loss);
      lr = lr_at_step(fc.schedule, step);
      if (lr > 0.0) adamw_step(sub, opt, Real(lr), fc.adamw);
      ++step;
      loss_sum += static_cast<double>(loss.item());
      acc_sum += accuracy(logits, labels);
      ++batches;
    }
    if (cb) {
      FitReport rep;
      rep.epoch = epoch;
      rep.lr = lr;
      rep.loss = loss_sum / static_cast<double>(batches);
      rep.train_acc = acc_sum / static_cast<double>(batches);
      if (eval_ds) rep.eval_acc = evaluate_clips(store, prefix, cfg, *eval_ds, bg, fc.pool);
      cb(rep);
    }
  }
}

}  // namespace bimm
