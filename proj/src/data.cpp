#include "bimm/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>

#include "bimm/image_io.hpp"
#include "bimm/rng.hpp"
#include "bimm/targets.hpp"

namespace fs = std::filesystem;

namespace bimm {

std::vector<float> apply_temporal_stride(const std::vector<float>& frames, size_t t_raw,
                                         size_t frame_size, size_t stride) {
  if (stride == 0) throw ConfigError("apply_temporal_stride: stride must be positive");
  if (t_raw % stride != 0) {
    throw ConfigError("apply_temporal_stride: frame count not divisible by stride");
  }
  if (frames.size() != t_raw * frame_size) {
    throw ShapeError("apply_temporal_stride: buffer size mismatch");
  }
  size_t t_out = t_raw / stride;
  std::vector<float> out(t_out * frame_size);
  for (size_t i = 0; i < t_out; ++i) {
    const float* src = frames.data() + i * stride * frame_size;
    std::copy(src, src + frame_size, out.data() + i * frame_size);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Moving-square clips.
// ---------------------------------------------------------------------------
namespace {

void render_square(std::vector<float>& frame, size_t h, size_t w, size_t c, long x0, long y0,
                   size_t side, float fg) {
  for (long y = y0; y < y0 + static_cast<long>(side); ++y) {
    if (y < 0 || y >= static_cast<long>(h)) continue;
    for (long x = x0; x < x0 + static_cast<long>(side); ++x) {
      if (x < 0 || x >= static_cast<long>(w)) continue;
      for (size_t ch = 0; ch < c; ++ch) frame[(y * w + x) * c + ch] = fg;
    }
  }
}

}  // namespace

ClipDataset gen_synthetic_motion(const SynthMotionSpec& spec, uint64_t seed) {
  if (spec.n_clips == 0) throw ConfigError("gen_synthetic_motion: need at least one clip");
  if (spec.min_side > spec.max_side || spec.max_side >= std::min(spec.h, spec.w)) {
    throw ConfigError("gen_synthetic_motion: bad square side range");
  }
  size_t travel = spec.speed * (spec.t_raw - 1);
  if (spec.max_side + travel >= std::min(spec.h, spec.w)) {
    throw ConfigError("gen_synthetic_motion: square cannot stay in frame over the clip");
  }

  ClipDataset ds;
  ds.geom = ClipGeom{spec.t_raw / spec.stride, spec.h, spec.w, spec.c, 2, 4};
  ds.n_classes = 4;
  ds.clips.reserve(spec.n_clips);
  ds.labels.reserve(spec.n_clips);

  static const long dir_dx[4] = {1, -1, 0, 0};
  static const long dir_dy[4] = {0, 0, -1, 1};

  Rng root(seed);
  size_t frame_size = spec.h * spec.w * spec.c;
  for (size_t i = 0; i < spec.n_clips; ++i) {
    Rng rng = root.child(i);
    int label = static_cast<int>(i % 4);
    size_t side =
        spec.min_side + static_cast<size_t>(rng.uniform_int(spec.max_side - spec.min_side + 1));
    float bg = static_cast<float>(rng.uniform(0.0, spec.bg_max));
    float fg = static_cast<float>(rng.uniform(spec.fg_min, 1.0));
    long dx = dir_dx[label] * static_cast<long>(spec.speed);
    long dy = dir_dy[label] * static_cast<long>(spec.speed);

    // start so the square stays inside the frame for the whole clip
    long x_lo = std::max<long>(0, -dx * static_cast<long>(spec.t_raw - 1));
    long x_hi = static_cast<long>(spec.w - side) -
                std::max<long>(0, dx * static_cast<long>(spec.t_raw - 1));
    long y_lo = std::max<long>(0, -dy * static_cast<long>(spec.t_raw - 1));
    long y_hi = static_cast<long>(spec.h - side) -
                std::max<long>(0, dy * static_cast<long>(spec.t_raw - 1));
    long x0 = x_lo + static_cast<long>(rng.uniform_int(static_cast<uint64_t>(x_hi - x_lo + 1)));
    long y0 = y_lo + static_cast<long>(rng.uniform_int(static_cast<uint64_t>(y_hi - y_lo + 1)));

    std::vector<float> raw(spec.t_raw * frame_size, bg);
    std::vector<float> frame(frame_size);
    for (size_t f = 0; f < spec.t_raw; ++f) {
      std::fill(frame.begin(), frame.end(), bg);
      render_square(frame, spec.h, spec.w, spec.c, x0 + dx * static_cast<long>(f),
                    y0 + dy * static_cast<long>(f), side, fg);
      std::copy(frame.begin(), frame.end(), raw.begin() + f * frame_size);
    }
    ds.clips.push_back(apply_temporal_stride(raw, spec.t_raw, frame_size, spec.stride));
    ds.labels.push_back(label);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Static shapes.
// ---------------------------------------------------------------------------
ImageDataset gen_synthetic_shapes(const SynthShapesSpec& spec, uint64_t seed) {
  if (spec.n_images == 0) throw ConfigError("gen_synthetic_shapes: need at least one image");
  ImageDataset ds;
  ds.geom = ImageGeom{spec.h, spec.w, spec.c, 4};
  ds.n_classes = 4;
  ds.images.reserve(spec.n_images);
  ds.labels.reserve(spec.n_images);

  GaborConfig bank_cfg;  // stripe parameters mirror the filter bank
  Rng root(seed);
  for (size_t i = 0; i < spec.n_images; ++i) {
    Rng rng = root.child(i);
    int label = static_cast<int>(i % 4);
    float bg = static_cast<float>(rng.uniform(0.0, spec.bg_max));
    float fg = static_cast<float>(rng.uniform(spec.fg_min, 1.0));
    std::vector<float> img(spec.h * spec.w * spec.c, bg);

    auto set_px = [&](long x, long y, float v) {
      if (x < 0 || y < 0 || x >= static_cast<long>(spec.w) || y >= static_cast<long>(spec.h)) {
        return;
      }
      for (size_t ch = 0; ch < spec.c; ++ch) img[(y * spec.w + x) * spec.c + ch] = v;
    };

    if (label == 0 || label == 1 || label == 2) {
      size_t half_min = 4, half_max = std::min(spec.h, spec.w) / 4;
      long r = static_cast<long>(half_min + rng.uniform_int(half_max - half_min + 1));
      long cx = r + static_cast<long>(rng.uniform_int(spec.w - 2 * r));
      long cy = r + static_cast<long>(rng.uniform_int(spec.h - 2 * r));
      for (long y = cy - r; y <= cy + r; ++y) {
        for (long x = cx - r; x <= cx + r; ++x) {
          bool inside = false;
          if (label == 0) {
            inside = true;  // filled square
          } else if (label == 1) {
            inside = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;  // disk
          } else {
            long bar = std::max<long>(1, r / 3);  // plus sign
            inside = std::abs(x - cx) <= bar || std::abs(y - cy) <= bar;
          }
          if (inside) set_px(x, y, fg);
        }
      }
    } else {
      size_t oi = static_cast<size_t>(rng.uniform_int(bank_cfg.orientations.size()));
      size_t li = static_cast<size_t>(rng.uniform_int(bank_cfg.wavelengths.size()));
      double theta = bank_cfg.orientations[oi];
      double lambda = bank_cfg.wavelengths[li];
      double phase = rng.uniform(0.0, 2.0 * M_PI);
      double ct = std::cos(theta), st = std::sin(theta);
      for (size_t y = 0; y < spec.h; ++y) {
        for (size_t x = 0; x < spec.w; ++x) {
          double proj = static_cast<double>(x) * ct + static_cast<double>(y) * st;
          double s = 0.5 * (1.0 + std::sin(2.0 * M_PI * proj / lambda + phase));
          float v = bg + static_cast<float>(s) * (fg - bg);
          for (size_t ch = 0; ch < spec.c; ++ch) img[(y * spec.w + x) * spec.c + ch] = v;
        }
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Frame directories.
// ---------------------------------------------------------------------------
namespace {

// trailing integer in a filename stem, -1 if none
long trailing_number(const std::string& stem) {
  size_t end = stem.size();
  while (end > 0 && std::isdigit(static_cast<unsigned char>(stem[end - 1]))) --end;
  if (end == stem.size()) return -1;
  return std::stol(stem.substr(end));
}

int label_from_dirname(const std::string& name) {
  size_t pos = name.rfind("_label");
  if (pos == std::string::npos) return 0;
  try {
    return std::stoi(name.substr(pos + 6));
  } catch (const std::exception&) {
    return 0;
  }
}

}  // namespace

std::vector<float> load_clip_frames(const std::string& dir, size_t& t_out, size_t& h_out,
                                    size_t& w_out) {
  if (!fs::is_directory(dir)) throw DataError("load_clip_frames: not a directory: " + dir);
  std::vector<std::pair<long, fs::path>> entries;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".ppm") continue;
    long n = trailing_number(e.path().stem().string());
    if (n < 0) throw DataError("load_clip_frames: frame name has no trailing number: " +
                               e.path().string());
    entries.emplace_back(n, e.path());
  }
  if (entries.empty()) throw DataError("load_clip_frames: no .ppm frames in " + dir);
  std::sort(entries.begin(), entries.end());

  std::vector<float> frames;
  size_t h = 0, w = 0;
  for (const auto& [num, path] : entries) {
    ImageU8 img = read_ppm(path.string());
    if (h == 0) {
      h = img.h;
      w = img.w;
    } else if (img.h != h || img.w != w) {
      throw DataError("load_clip_frames: frame size mismatch at " + path.string());
    }
    auto px = image_to_float(img);
    frames.insert(frames.end(), px.begin(), px.end());
  }
  t_out = entries.size();
  h_out = h;
  w_out = w;
  return frames;
}

ClipDataset load_frames_dataset(const std::string& root, size_t t_window, size_t stride,
                                size_t ct, size_t patch, uint64_t seed) {
  if (!fs::is_directory(root)) throw DataError("load_frames_dataset: not a directory: " + root);
  if (t_window == 0 || stride == 0 || t_window % stride != 0) {
    throw ConfigError("load_frames_dataset: window " + std::to_string(t_window) +
                      " not divisible by stride " + std::to_string(stride));
  }
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  if (dirs.empty()) throw DataError("load_frames_dataset: no clip directories in " + root);
  std::sort(dirs.begin(), dirs.end());

  ClipDataset ds;
  Rng root_rng(seed);
  int max_label = 0;
  for (size_t i = 0; i < dirs.size(); ++i) {
    const fs::path& dir = dirs[i];
    size_t t_raw = 0, h = 0, w = 0;
    auto frames = load_clip_frames(dir.string(), t_raw, h, w);
    if (t_raw < t_window) {
      throw DataError("load_frames_dataset: clip " + dir.string() + " has " +
                      std::to_string(t_raw) + " frames, window needs " +
                      std::to_string(t_window));
    }
    size_t frame_size = h * w * 3;
    Rng rng = root_rng.child(i);
    size_t start = static_cast<size_t>(rng.uniform_int(t_raw - t_window + 1));
    std::vector<float> window(frames.begin() + start * frame_size,
                              frames.begin() + (start + t_window) * frame_size);
    auto strided = apply_temporal_stride(window, t_window, frame_size, stride);

    size_t t = t_window / stride;
    if (ds.clips.empty()) {
      ds.geom = ClipGeom{t, h, w, 3, ct, patch};
      ds.geom.validate();
    } else if (h != ds.geom.h || w != ds.geom.w) {
      throw DataError("load_frames_dataset: clip geometry mismatch at " + dir.string());
    }
    ds.clips.push_back(std::move(strided));
    int label = label_from_dirname(dir.filename().string());
    ds.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  ds.n_classes = static_cast<size_t>(max_label) + 1;
  return ds;
}

void write_frames_dataset(const std::string& root, const ClipDataset& ds) {
  fs::create_directories(root);
  size_t frame_size = ds.geom.h * ds.geom.w * ds.geom.c;
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "clip%05zu_label%d", i, ds.labels.empty() ? 0 : ds.labels[i]);
    fs::path dir = fs::path(root) / name;
    fs::create_directories(dir);
    for (size_t f = 0; f < ds.geom.t; ++f) {
      std::vector<float> frame(ds.clips[i].begin() + f * frame_size,
                               ds.clips[i].begin() + (f + 1) * frame_size);
      char fname[32];
      std::snprintf(fname, sizeof(fname), "frame_%04zu.ppm", f);
      write_ppm((dir / fname).string(),
                image_from_float(frame, ds.geom.h, ds.geom.w, ds.geom.c));
    }
  }
}

}  // namespace bimm
