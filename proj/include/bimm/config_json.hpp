#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "bimm/data.hpp"
#include "bimm/train.hpp"

namespace bimm {

// ---------------------------------------------------------------------------
// JSON (de)serialization for run configuration. Parsing is strict: unknown
// keys raise ConfigError so a typo cannot silently fall back to a default.
// Absent keys keep the struct defaults, so configs only spell out deviations.
// The schema is documented in docs/config.md.
// ---------------------------------------------------------------------------

namespace cfgjson {

inline void require_object(const nlohmann::json& j, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& field) {
  auto it = j.find(key);
  if (it != j.end()) it->get_to(field);
}

// nlohmann reports type mismatches via its own exception hierarchy; fold
// those into ConfigError so callers have a single failure type.
template <class Fn>
auto as_config_error(const char* where, Fn&& fn) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + ": " + e.what());
  }
}

}  // namespace cfgjson

// --- encoder ---------------------------------------------------------------

inline nlohmann::json encoder_to_json(const EncoderConfig& c) {
  return {{"d_model", c.d_model},   {"heads", c.heads},
          {"depth", c.depth},       {"mlp_ratio", c.mlp_ratio},
          {"separation", c.separation}, {"dec_dim", c.dec_dim},
          {"dec_depth", c.dec_depth},   {"dec_heads", c.dec_heads}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j,
                                              EncoderConfig c = EncoderConfig{}) {
  return cfgjson::as_config_error("encoder", [&] {
    cfgjson::require_object(j, "encoder");
    cfgjson::check_keys(j,
                        {"d_model", "heads", "depth", "mlp_ratio", "separation", "dec_dim",
                         "dec_depth", "dec_heads"},
                        "encoder");
    cfgjson::maybe(j, "d_model", c.d_model);
    cfgjson::maybe(j, "heads", c.heads);
    cfgjson::maybe(j, "depth", c.depth);
    cfgjson::maybe(j, "mlp_ratio", c.mlp_ratio);
    cfgjson::maybe(j, "separation", c.separation);
    cfgjson::maybe(j, "dec_dim", c.dec_dim);
    cfgjson::maybe(j, "dec_depth", c.dec_depth);
    cfgjson::maybe(j, "dec_heads", c.dec_heads);
    return c;
  });
}

// --- schedule / optimizer ---------------------------------------------------

inline nlohmann::json schedule_to_json(const LrSchedule& s) {
  return {{"base_lr", s.base_lr},
          {"min_lr", s.min_lr},
          {"warmup_steps", s.warmup_steps},
          {"total_steps", s.total_steps}};
}

inline LrSchedule schedule_from_json(const nlohmann::json& j, LrSchedule s = LrSchedule{}) {
  return cfgjson::as_config_error("schedule", [&] {
    cfgjson::require_object(j, "schedule");
    cfgjson::check_keys(j, {"base_lr", "min_lr", "warmup_steps", "total_steps"}, "schedule");
    cfgjson::maybe(j, "base_lr", s.base_lr);
    cfgjson::maybe(j, "min_lr", s.min_lr);
    cfgjson::maybe(j, "warmup_steps", s.warmup_steps);
    cfgjson::maybe(j, "total_steps", s.total_steps);
    return s;
  });
}

inline nlohmann::json adamw_to_json(const AdamWConfig& a) {
  return {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps},
          {"weight_decay", a.weight_decay}};
}

inline AdamWConfig adamw_from_json(const nlohmann::json& j, AdamWConfig a = AdamWConfig{}) {
  return cfgjson::as_config_error("adamw", [&] {
    cfgjson::require_object(j, "adamw");
    cfgjson::check_keys(j, {"beta1", "beta2", "eps", "weight_decay"}, "adamw");
    cfgjson::maybe(j, "beta1", a.beta1);
    cfgjson::maybe(j, "beta2", a.beta2);
    cfgjson::maybe(j, "eps", a.eps);
    cfgjson::maybe(j, "weight_decay", a.weight_decay);
    return a;
  });
}

// --- targets ----------------------------------------------------------------

inline nlohmann::json gabor_to_json(const GaborConfig& g) {
  return {{"orientations", g.orientations}, {"wavelengths", g.wavelengths},
          {"sigma_factor", g.sigma_factor}, {"gamma", g.gamma},
          {"psi", g.psi},                   {"ksize", g.ksize}};
}

inline GaborConfig gabor_from_json(const nlohmann::json& j, GaborConfig g = GaborConfig{}) {
  return cfgjson::as_config_error("targets.gabor", [&] {
    cfgjson::require_object(j, "targets.gabor");
    cfgjson::check_keys(
        j, {"orientations", "wavelengths", "sigma_factor", "gamma", "psi", "ksize"},
        "targets.gabor");
    cfgjson::maybe(j, "orientations", g.orientations);
    cfgjson::maybe(j, "wavelengths", g.wavelengths);
    cfgjson::maybe(j, "sigma_factor", g.sigma_factor);
    cfgjson::maybe(j, "gamma", g.gamma);
    cfgjson::maybe(j, "psi", g.psi);
    cfgjson::maybe(j, "ksize", g.ksize);
    return g;
  });
}

inline nlohmann::json targets_to_json(const TargetConfig& t) {
  return {{"gabor", gabor_to_json(t.gabor)}, {"rgb_normalize", t.rgb_normalize}};
}

inline TargetConfig targets_from_json(const nlohmann::json& j, TargetConfig t = TargetConfig{}) {
  return cfgjson::as_config_error("targets", [&] {
    cfgjson::require_object(j, "targets");
    cfgjson::check_keys(j, {"gabor", "rgb_normalize"}, "targets");
    if (j.contains("gabor")) t.gabor = gabor_from_json(j.at("gabor"), t.gabor);
    cfgjson::maybe(j, "rgb_normalize", t.rgb_normalize);
    return t;
  });
}

inline nlohmann::json kinds_to_json(const std::vector<TargetKind>& kinds) {
  nlohmann::json a = nlohmann::json::array();
  for (TargetKind k : kinds) a.push_back(target_kind_name(k));
  return a;
}

inline std::vector<TargetKind> kinds_from_json(const nlohmann::json& a, const char* where) {
  if (!a.is_array()) throw ConfigError(std::string(where) + ": expected an array of kind names");
  std::vector<TargetKind> kinds;
  kinds.reserve(a.size());
  for (const auto& e : a) kinds.push_back(target_kind_from_name(e.get<std::string>()));
  return kinds;
}

// --- training ---------------------------------------------------------------

inline nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"encoder", encoder_to_json(t.encoder)},
          {"targets", targets_to_json(t.targets)},
          {"ventral_kinds", kinds_to_json(t.ventral_kinds)},
          {"dorsal_kinds", kinds_to_json(t.dorsal_kinds)},
          {"tap_weights", t.tap_weights},
          {"lambda", t.lambda},
          {"sharing", sharing_name(t.sharing)},
          {"shared_prefix", t.shared_prefix},
          {"image_mask_ratio", t.image_mask_ratio},
          {"clip_mask_ratio", t.clip_mask_ratio},
          {"frames_per_clip", t.frames_per_clip},
          {"loss_on_all", t.loss_on_all},
          {"pool", pool_name(t.pool)},
          {"schedule", schedule_to_json(t.schedule)},
          {"adamw", adamw_to_json(t.adamw)},
          {"batch_images", t.batch_images},
          {"batch_clips", t.batch_clips},
          {"seed", t.seed},
          {"log_wall_ms", t.log_wall_ms}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j,
                                          TrainConfig t = TrainConfig{}) {
  return cfgjson::as_config_error("train", [&] {
    cfgjson::require_object(j, "train");
    cfgjson::check_keys(j,
                        {"encoder", "targets", "ventral_kinds", "dorsal_kinds", "tap_weights",
                         "lambda", "sharing", "shared_prefix", "image_mask_ratio",
                         "clip_mask_ratio", "frames_per_clip", "loss_on_all", "pool", "schedule",
                         "adamw", "batch_images", "batch_clips", "seed", "log_wall_ms"},
                        "train");
    if (j.contains("encoder")) t.encoder = encoder_config_from_json(j.at("encoder"), t.encoder);
    if (j.contains("targets")) t.targets = targets_from_json(j.at("targets"), t.targets);
    if (j.contains("ventral_kinds")) {
      t.ventral_kinds = kinds_from_json(j.at("ventral_kinds"), "train.ventral_kinds");
    }
    if (j.contains("dorsal_kinds")) {
      t.dorsal_kinds = kinds_from_json(j.at("dorsal_kinds"), "train.dorsal_kinds");
    }
    cfgjson::maybe(j, "tap_weights", t.tap_weights);
    cfgjson::maybe(j, "lambda", t.lambda);
    if (j.contains("sharing")) t.sharing = sharing_from_name(j.at("sharing").get<std::string>());
    cfgjson::maybe(j, "shared_prefix", t.shared_prefix);
    cfgjson::maybe(j, "image_mask_ratio", t.image_mask_ratio);
    cfgjson::maybe(j, "clip_mask_ratio", t.clip_mask_ratio);
    cfgjson::maybe(j, "frames_per_clip", t.frames_per_clip);
    cfgjson::maybe(j, "loss_on_all", t.loss_on_all);
    if (j.contains("pool")) t.pool = pool_from_name(j.at("pool").get<std::string>());
    if (j.contains("schedule")) t.schedule = schedule_from_json(j.at("schedule"), t.schedule);
    if (j.contains("adamw")) t.adamw = adamw_from_json(j.at("adamw"), t.adamw);
    cfgjson::maybe(j, "batch_images", t.batch_images);
    cfgjson::maybe(j, "batch_clips", t.batch_clips);
    cfgjson::maybe(j, "seed", t.seed);
    cfgjson::maybe(j, "log_wall_ms", t.log_wall_ms);
    return t;
  });
}

// --- classifier fit ----------------------------------------------------------

inline nlohmann::json fit_to_json(const FitConfig& f) {
  return {{"epochs", f.epochs},
          {"batch", f.batch},
          {"schedule", schedule_to_json(f.schedule)},
          {"adamw", adamw_to_json(f.adamw)},
          {"pool", pool_name(f.pool)},
          {"seed", f.seed}};
}

inline FitConfig fit_config_from_json(const nlohmann::json& j, FitConfig f = FitConfig{}) {
  return cfgjson::as_config_error("fit", [&] {
    cfgjson::require_object(j, "fit");
    cfgjson::check_keys(j, {"epochs", "batch", "schedule", "adamw", "pool", "seed"}, "fit");
    cfgjson::maybe(j, "epochs", f.epochs);
    cfgjson::maybe(j, "batch", f.batch);
    if (j.contains("schedule")) f.schedule = schedule_from_json(j.at("schedule"), f.schedule);
    if (j.contains("adamw")) f.adamw = adamw_from_json(j.at("adamw"), f.adamw);
    if (j.contains("pool")) f.pool = pool_from_name(j.at("pool").get<std::string>());
    cfgjson::maybe(j, "seed", f.seed);
    return f;
  });
}

// --- data --------------------------------------------------------------------

// Dataset selection for CLI runs. `kind` picks the source; only the fields of
// the matching source apply. `train_fraction` drives the train/eval split of
// classification runs (prefix split; synthetic labels cycle round-robin so the
// prefix stays class-balanced whenever the split sizes divide by n_classes).
struct DataConfig {
  std::string kind = "synthetic_motion";  // synthetic_motion | synthetic_shapes | frames_dir
  SynthMotionSpec motion;
  SynthShapesSpec shapes;
  std::string path;  // frames_dir root
  size_t t_window = 16;
  size_t frame_stride = 2;
  size_t patch = 4;
  size_t ct = 2;
  double train_fraction = 0.8;
  uint64_t seed = 1;

  void validate() const {
    if (kind != "synthetic_motion" && kind != "synthetic_shapes" && kind != "frames_dir") {
      throw ConfigError("data: unknown kind '" + kind + "'");
    }
    if (kind == "frames_dir" && path.empty()) {
      throw ConfigError("data: frames_dir needs a path");
    }
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
      throw ConfigError("data: train_fraction must lie in (0, 1]");
    }
  }
};

inline nlohmann::json motion_spec_to_json(const SynthMotionSpec& m) {
  return {{"n_clips", m.n_clips},   {"t_raw", m.t_raw},       {"stride", m.stride},
          {"h", m.h},               {"w", m.w},               {"c", m.c},
          {"min_side", m.min_side}, {"max_side", m.max_side}, {"speed", m.speed},
          {"bg_max", m.bg_max},     {"fg_min", m.fg_min}};
}

inline SynthMotionSpec motion_spec_from_json(const nlohmann::json& j,
                                             SynthMotionSpec m = SynthMotionSpec{}) {
  return cfgjson::as_config_error("data.motion", [&] {
    cfgjson::require_object(j, "data.motion");
    cfgjson::check_keys(j,
                        {"n_clips", "t_raw", "stride", "h", "w", "c", "min_side", "max_side",
                         "speed", "bg_max", "fg_min"},
                        "data.motion");
    cfgjson::maybe(j, "n_clips", m.n_clips);
    cfgjson::maybe(j, "t_raw", m.t_raw);
    cfgjson::maybe(j, "stride", m.stride);
    cfgjson::maybe(j, "h", m.h);
    cfgjson::maybe(j, "w", m.w);
    cfgjson::maybe(j, "c", m.c);
    cfgjson::maybe(j, "min_side", m.min_side);
    cfgjson::maybe(j, "max_side", m.max_side);
    cfgjson::maybe(j, "speed", m.speed);
    cfgjson::maybe(j, "bg_max", m.bg_max);
    cfgjson::maybe(j, "fg_min", m.fg_min);
    return m;
  });
}

inline nlohmann::json shapes_spec_to_json(const SynthShapesSpec& s) {
  return {{"n_images", s.n_images}, {"h", s.h},           {"w", s.w},
          {"c", s.c},               {"bg_max", s.bg_max}, {"fg_min", s.fg_min}};
}

inline SynthShapesSpec shapes_spec_from_json(const nlohmann::json& j,
                                             SynthShapesSpec s = SynthShapesSpec{}) {
  return cfgjson::as_config_error("data.shapes", [&] {
    cfgjson::require_object(j, "data.shapes");
    cfgjson::check_keys(j, {"n_images", "h", "w", "c", "bg_max", "fg_min"}, "data.shapes");
    cfgjson::maybe(j, "n_images", s.n_images);
    cfgjson::maybe(j, "h", s.h);
    cfgjson::maybe(j, "w", s.w);
    cfgjson::maybe(j, "c", s.c);
    cfgjson::maybe(j, "bg_max", s.bg_max);
    cfgjson::maybe(j, "fg_min", s.fg_min);
    return s;
  });
}

inline nlohmann::json data_to_json(const DataConfig& d) {
  return {{"kind", d.kind},
          {"motion", motion_spec_to_json(d.motion)},
          {"shapes", shapes_spec_to_json(d.shapes)},
          {"path", d.path},
          {"t_window", d.t_window},
          {"frame_stride", d.frame_stride},
          {"patch", d.patch},
          {"ct", d.ct},
          {"train_fraction", d.train_fraction},
          {"seed", d.seed}};
}

inline DataConfig data_config_from_json(const nlohmann::json& j, DataConfig d = DataConfig{}) {
  return cfgjson::as_config_error("data", [&] {
    cfgjson::require_object(j, "data");
    cfgjson::check_keys(j,
                        {"kind", "motion", "shapes", "path", "t_window", "frame_stride", "patch",
                         "ct", "train_fraction", "seed"},
                        "data");
    cfgjson::maybe(j, "kind", d.kind);
    if (j.contains("motion")) d.motion = motion_spec_from_json(j.at("motion"), d.motion);
    if (j.contains("shapes")) d.shapes = shapes_spec_from_json(j.at("shapes"), d.shapes);
    cfgjson::maybe(j, "path", d.path);
    cfgjson::maybe(j, "t_window", d.t_window);
    cfgjson::maybe(j, "frame_stride", d.frame_stride);
    cfgjson::maybe(j, "patch", d.patch);
    cfgjson::maybe(j, "ct", d.ct);
    cfgjson::maybe(j, "train_fraction", d.train_fraction);
    cfgjson::maybe(j, "seed", d.seed);
    return d;
  });
}

// --- whole run ----------------------------------------------------------------

struct RunConfig {
  TrainConfig train;
  FitConfig fit;
  DataConfig data;
  size_t checkpoint_every = 0;  // steps between intermediate checkpoints; 0 = final only

  void validate() const {
    train.validate();
    fit.validate();
    data.validate();
  }
};

inline nlohmann::json run_to_json(const RunConfig& r) {
  return {{"train", train_to_json(r.train)},
          {"fit", fit_to_json(r.fit)},
          {"data", data_to_json(r.data)},
          {"checkpoint_every", r.checkpoint_every}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig r = RunConfig{}) {
  return cfgjson::as_config_error("run", [&] {
    cfgjson::require_object(j, "config");
    cfgjson::check_keys(j, {"train", "fit", "data", "checkpoint_every"}, "config");
    if (j.contains("train")) r.train = train_config_from_json(j.at("train"), r.train);
    if (j.contains("fit")) r.fit = fit_config_from_json(j.at("fit"), r.fit);
    if (j.contains("data")) r.data = data_config_from_json(j.at("data"), r.data);
    cfgjson::maybe(j, "checkpoint_every", r.checkpoint_every);
    return r;
  });
}

// --- dataset construction ------------------------------------------------------

inline ImageDataset build_image_dataset(const DataConfig& d) {
  d.validate();
  if (d.kind == "synthetic_shapes") {
    ImageDataset ds = gen_synthetic_shapes(d.shapes, d.seed);
    ds.geom.p = d.patch;
    ds.geom.validate();
    return ds;
  }
  throw DataError("data kind '" + d.kind + "' does not provide images");
}

inline ClipDataset build_clip_dataset(const DataConfig& d) {
  d.validate();
  if (d.kind == "synthetic_motion") {
    ClipDataset ds = gen_synthetic_motion(d.motion, d.seed);
    ds.geom.p = d.patch;
    ds.geom.ct = d.ct;
    ds.geom.validate();
    return ds;
  }
  if (d.kind == "frames_dir") {
    return load_frames_dataset(d.path, d.t_window, d.frame_stride, d.ct, d.patch, d.seed);
  }
  throw DataError("data kind '" + d.kind + "' does not provide clips");
}

// Prefix split used by finetune/probe runs.
inline std::pair<ClipDataset, ClipDataset> split_clip_dataset(const ClipDataset& ds,
                                                              double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw ConfigError("split: train_fraction must lie in (0, 1]");
  }
  size_t n_train = static_cast<size_t>(train_fraction * static_cast<double>(ds.size()));
  if (n_train == 0 || n_train > ds.size()) n_train = ds.size();
  ClipDataset train, eval;
  train.geom = eval.geom = ds.geom;
  train.n_classes = eval.n_classes = ds.n_classes;
  for (size_t i = 0; i < ds.size(); ++i) {
    ClipDataset& dst = i < n_train ? train : eval;
    dst.clips.push_back(ds.clips[i]);
    dst.labels.push_back(ds.labels[i]);
  }
  return {std::move(train), std::move(eval)};
}

}  // namespace bimm
