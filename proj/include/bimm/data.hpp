#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bimm/patching.hpp"

namespace bimm {

// ---------------------------------------------------------------------------
// In-memory datasets. Clips are stored model-ready: temporal striding is
// applied when a dataset is built, so geom.t is the frame count the encoder
// sees.
// ---------------------------------------------------------------------------
struct ImageDataset {
  ImageGeom geom;
  std::vector<std::vector<float>> images;  // each h*w*c
  std::vector<int> labels;
  size_t n_classes = 0;

  size_t size() const { return images.size(); }
};

struct ClipDataset {
  ClipGeom geom;
  std::vector<std::vector<float>> clips;  // each geom.t*h*w*c
  std::vector<int> labels;
  size_t n_classes = 0;

  size_t size() const { return clips.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic data. Both generators are deterministic in (spec, seed): every
// sample derives its own child stream, so the dataset is independent of
// generation order.
// ---------------------------------------------------------------------------

// Moving bright square on a dark background, one direction per class:
// 0 right, 1 left, 2 up, 3 down. Labels cycle round-robin.
struct SynthMotionSpec {
  size_t n_clips = 400;
  size_t t_raw = 16;
  size_t stride = 2;
  size_t h = 32, w = 32, c = 3;
  size_t min_side = 6, max_side = 10;
  size_t speed = 1;  // px per raw frame
  double bg_max = 0.3;
  double fg_min = 0.6;
};

ClipDataset gen_synthetic_motion(const SynthMotionSpec& spec, uint64_t seed);

// Static shape per image: 0 square, 1 disk, 2 cross, 3 sinusoidal stripes.
// Stripe parameters are drawn from the default oriented-filter bank's
// orientations and wavelengths.
struct SynthShapesSpec {
  size_t n_images = 2000;
  size_t h = 32, w = 32, c = 3;
  double bg_max = 0.3;
  double fg_min = 0.5;
};

ImageDataset gen_synthetic_shapes(const SynthShapesSpec& spec, uint64_t seed);

// ---------------------------------------------------------------------------
// Frame-directory I/O. A clip directory holds numerically ordered PPM frames
// ("frame_0000.ppm", "7.ppm", ...: the trailing integer in the stem decides
// the order). A dataset directory holds one subdirectory per clip; a label
// can be encoded as a "_label<k>" suffix on the clip directory name.
// ---------------------------------------------------------------------------

// Every frame of one clip directory, in trailing-number order.
std::vector<float> load_clip_frames(const std::string& dir, size_t& t_out, size_t& h_out,
                                    size_t& w_out);

// Loads each clip as t_window consecutive frames from a seed-deterministic
// random start, then keeps every stride-th frame, giving t_window / stride
// model frames. A clip with fewer than t_window frames is a data error.
ClipDataset load_frames_dataset(const std::string& root, size_t t_window, size_t stride,
                                size_t ct, size_t patch, uint64_t seed);

// Writes clips as frame directories under root (inverse of the loader,
// stride 1). Labels become "_label<k>" suffixes.
void write_frames_dataset(const std::string& root, const ClipDataset& ds);

// Keep every stride-th frame starting at frame 0. t_raw must be divisible.
std::vector<float> apply_temporal_stride(const std::vector<float>& frames, size_t t_raw,
                                         size_t frame_size, size_t stride);

}  // namespace bimm
