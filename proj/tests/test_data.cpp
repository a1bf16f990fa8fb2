#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "bimm/data.hpp"
#include "bimm/image_io.hpp"
#include "bimm/schedule.hpp"
#include "bimm/targets.hpp"
#include "doctest.h"

using namespace bimm;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// brightness-above-background centroid of one frame
std::pair<double, double> centroid(const std::vector<float>& clip, size_t f, size_t h, size_t w,
                                   size_t c, float bg) {
  const float* frame = clip.data() + f * h * w * c;
  double sx = 0, sy = 0, m = 0;
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      double v = frame[(y * w + x) * c] - bg;
      sx += v * static_cast<double>(x);
      sy += v * static_cast<double>(y);
      m += v;
    }
  }
  return {sx / m, sy / m};
}

}  // namespace

TEST_CASE("lr schedule ramps, decays, and clamps") {
  LrSchedule s;
  s.base_lr = 1e-3;
  s.min_lr = 1e-5;
  s.warmup_steps = 40;
  s.total_steps = 1000;

  CHECK(lr_at_step(s, 0) == 0.0);
  CHECK(lr_at_step(s, 20) == doctest::Approx(1e-3 * 20 / 40).epsilon(1e-12));
  CHECK(lr_at_step(s, 40) == doctest::Approx(1e-3).epsilon(1e-12));

  double prev = lr_at_step(s, 40);
  for (size_t step = 41; step < 1000; ++step) {
    double cur = lr_at_step(s, step);
    CHECK(cur < prev);
    CHECK(cur >= s.min_lr - 1e-15);
    prev = cur;
  }
  CHECK(lr_at_step(s, 1000) == 1e-5);
  CHECK(lr_at_step(s, 100000) == 1e-5);

  // halfway through the cosine span the rate is the midpoint of base and min
  LrSchedule even{1e-3, 1e-5, 100, 300};
  CHECK(lr_at_step(even, 200) == doctest::Approx(0.5 * (1e-3 + 1e-5)).epsilon(1e-9));

  LrSchedule bad = s;
  bad.base_lr = 0.0;
  CHECK_THROWS_AS(lr_at_step(bad, 0), ConfigError);
  bad = s;
  bad.min_lr = 2e-3;
  CHECK_THROWS_AS(lr_at_step(bad, 0), ConfigError);
  bad = s;
  bad.warmup_steps = 1000;
  CHECK_THROWS_AS(lr_at_step(bad, 0), ConfigError);
}

TEST_CASE("temporal stride keeps every stride-th frame") {
  std::vector<float> frames = {0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5};  // 6 frames of size 2
  auto s2 = apply_temporal_stride(frames, 6, 2, 2);
  CHECK(s2 == std::vector<float>{0, 0, 2, 2, 4, 4});
  auto s3 = apply_temporal_stride(frames, 6, 2, 3);
  CHECK(s3 == std::vector<float>{0, 0, 3, 3});
  auto s1 = apply_temporal_stride(frames, 6, 2, 1);
  CHECK(s1 == frames);

  CHECK_THROWS_AS(apply_temporal_stride(frames, 6, 2, 0), ConfigError);
  CHECK_THROWS_AS(apply_temporal_stride(frames, 6, 2, 4), ConfigError);
  CHECK_THROWS_AS(apply_temporal_stride(frames, 5, 2, 1), ShapeError);
}

TEST_CASE("motion clips move a square in the labeled direction") {
  SynthMotionSpec spec;
  spec.n_clips = 8;
  auto ds = gen_synthetic_motion(spec, 7);

  CHECK(ds.size() == 8);
  CHECK(ds.n_classes == 4);
  CHECK(ds.geom.t == 8);
  CHECK(ds.geom.h == 32);
  CHECK(ds.geom.ct == 2);
  ds.geom.validate();
  REQUIRE(ds.labels == std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3});

  size_t fsz = ds.geom.h * ds.geom.w * ds.geom.c;
  for (size_t i = 0; i < ds.size(); ++i) {
    const auto& clip = ds.clips[i];
    REQUIRE(clip.size() == ds.geom.t * fsz);
    float lo = 1.0f, hi = 0.0f;
    for (float v : clip) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(lo <= 0.3f);   // background
    CHECK(hi >= 0.6f);   // square
    CHECK(hi - lo > 0.1f);

    // centroid displacement between first and last model frame: the square
    // moves 1 px per raw frame and the clip keeps every 2nd frame
    auto [x0, y0] = centroid(clip, 0, ds.geom.h, ds.geom.w, ds.geom.c, lo);
    auto [x1, y1] = centroid(clip, ds.geom.t - 1, ds.geom.h, ds.geom.w, ds.geom.c, lo);
    double expect = 2.0 * static_cast<double>(ds.geom.t - 1);
    double dx = x1 - x0, dy = y1 - y0;
    switch (ds.labels[i]) {
      case 0: CHECK(dx == doctest::Approx(expect).epsilon(1e-6)); CHECK(std::abs(dy) < 1e-6); break;
      case 1: CHECK(dx == doctest::Approx(-expect).epsilon(1e-6)); CHECK(std::abs(dy) < 1e-6); break;
      case 2: CHECK(dy == doctest::Approx(-expect).epsilon(1e-6)); CHECK(std::abs(dx) < 1e-6); break;
      case 3: CHECK(dy == doctest::Approx(expect).epsilon(1e-6)); CHECK(std::abs(dx) < 1e-6); break;
    }
  }
}

TEST_CASE("synthetic generators are deterministic in the seed") {
  SynthMotionSpec mspec;
  mspec.n_clips = 6;
  auto m1 = gen_synthetic_motion(mspec, 11);
  auto m2 = gen_synthetic_motion(mspec, 11);
  auto m3 = gen_synthetic_motion(mspec, 12);
  CHECK(m1.clips == m2.clips);
  CHECK(m1.labels == m2.labels);
  CHECK(m1.clips != m3.clips);

  SynthShapesSpec sspec;
  sspec.n_images = 6;
  auto s1 = gen_synthetic_shapes(sspec, 11);
  auto s2 = gen_synthetic_shapes(sspec, 11);
  auto s3 = gen_synthetic_shapes(sspec, 12);
  CHECK(s1.images == s2.images);
  CHECK(s1.labels == s2.labels);
  CHECK(s1.images != s3.images);
  CHECK(s1.labels == std::vector<int>{0, 1, 2, 3, 0, 1});
  for (const auto& img : s1.images) {
    for (float v : img) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("stripe images carry dominant oriented energy") {
  GaborConfig cfg;
  auto bank = build_gabor_bank<double>(cfg);

  // hand-built grating matched to bank kernel 1: theta 0, wavelength 8
  size_t h = 32, w = 32;
  std::vector<double> grating(h * w);
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      grating[y * w + x] = 0.5 * (1.0 + std::sin(2.0 * M_PI * static_cast<double>(x) / 8.0));
  std::vector<double> energy(bank.size());
  for (size_t k = 0; k < bank.size(); ++k) {
    auto resp = filter2d_reflect(grating, h, w, bank[k], cfg.ksize);
    double e = 0;
    for (double r : resp) e += r * r;
    energy[k] = e;
  }
  size_t best = 0;
  for (size_t k = 1; k < bank.size(); ++k)
    if (energy[k] > energy[best]) best = k;
  CHECK(best == 1);

  // generated stripes are oriented too: max kernel energy dwarfs the min
  SynthShapesSpec spec;
  spec.n_images = 8;
  auto ds = gen_synthetic_shapes(spec, 3);
  for (size_t i = 3; i < ds.size(); i += 4) {
    std::vector<double> px(ds.images[i].begin(), ds.images[i].end());
    auto gray = to_grayscale(px, ds.geom.h, ds.geom.w, ds.geom.c);
    double emin = 1e300, emax = 0;
    for (const auto& ker : bank) {
      auto resp = filter2d_reflect(gray, ds.geom.h, ds.geom.w, ker, cfg.ksize);
      double e = 0;
      for (double r : resp) e += r * r;
      emin = std::min(emin, e);
      emax = std::max(emax, e);
    }
    CHECK(emax > 3.0 * emin);
  }
}

TEST_CASE("frame directory round trip preserves clips and labels") {
  SynthMotionSpec spec;
  spec.n_clips = 4;
  spec.t_raw = 8;
  spec.h = spec.w = 16;
  spec.min_side = 3;
  spec.max_side = 4;
  auto ds = gen_synthetic_motion(spec, 5);

  auto root = fresh_dir("bimm_test_frames");
  write_frames_dataset(root.string(), ds);
  // window equals the clip length, so the start is forced to frame 0
  auto back = load_frames_dataset(root.string(), ds.geom.t, 1, ds.geom.ct, ds.geom.p, 0);

  REQUIRE(back.size() == ds.size());
  CHECK(back.labels == ds.labels);
  CHECK(back.n_classes == 4);
  CHECK(back.geom.t == ds.geom.t);
  CHECK(back.geom.h == ds.geom.h);
  CHECK(back.geom.w == ds.geom.w);
  for (size_t i = 0; i < ds.size(); ++i) {
    REQUIRE(back.clips[i].size() == ds.clips[i].size());
    for (size_t j = 0; j < ds.clips[i].size(); ++j) {
      CHECK(std::abs(back.clips[i][j] - ds.clips[i][j]) <= 0.5f / 255.0f + 1e-6f);
    }
  }

  // a stride of 2 over the full window keeps frames 0, 2, ...
  auto strided = load_frames_dataset(root.string(), ds.geom.t, 2, ds.geom.ct, ds.geom.p, 0);
  CHECK(strided.geom.t == ds.geom.t / 2);
  size_t fsz = ds.geom.h * ds.geom.w * ds.geom.c;
  for (size_t j = 0; j < fsz; ++j) {
    CHECK(strided.clips[0][fsz + j] == back.clips[0][2 * fsz + j]);
  }

  // a shorter window starts at a seed-deterministic offset
  auto w1 = load_frames_dataset(root.string(), 2, 1, ds.geom.ct, ds.geom.p, 9);
  auto w2 = load_frames_dataset(root.string(), 2, 1, ds.geom.ct, ds.geom.p, 9);
  CHECK(w1.clips == w2.clips);
  CHECK(w1.geom.t == 2);
  fs::remove_all(root);
}

TEST_CASE("frame order follows the trailing number in the name") {
  auto dir = fresh_dir("bimm_test_order");
  auto solid = [&](const std::string& name, uint8_t v) {
    ImageU8 img;
    img.h = img.w = 4;
    img.c = 3;
    img.pixels.assign(4 * 4 * 3, v);
    write_ppm((dir / name).string(), img);
  };
  solid("b_12.ppm", 30);
  solid("a3.ppm", 10);
  solid("f7.ppm", 20);

  size_t t = 0, h = 0, w = 0;
  auto frames = load_clip_frames(dir.string(), t, h, w);
  REQUIRE(t == 3);
  REQUIRE(h == 4);
  REQUIRE(w == 4);
  CHECK(frames[0] == doctest::Approx(10.0 / 255.0));
  CHECK(frames[h * w * 3] == doctest::Approx(20.0 / 255.0));
  CHECK(frames[2 * h * w * 3] == doctest::Approx(30.0 / 255.0));

  solid("nonumber.ppm", 1);
  CHECK_THROWS_AS(load_clip_frames(dir.string(), t, h, w), DataError);
  fs::remove_all(dir);
}

TEST_CASE("frame loaders reject bad input") {
  size_t t, h, w;
  CHECK_THROWS_AS(load_clip_frames("/nonexistent/bimm/dir", t, h, w), DataError);
  CHECK_THROWS_AS(load_frames_dataset("/nonexistent/bimm/dir", 4, 1, 2, 4, 0), DataError);

  auto empty = fresh_dir("bimm_test_empty");
  CHECK_THROWS_AS(load_clip_frames(empty.string(), t, h, w), DataError);
  CHECK_THROWS_AS(load_frames_dataset(empty.string(), 4, 1, 2, 4, 0), DataError);

  auto root = fresh_dir("bimm_test_badclips");
  auto dir = root / "clip00000_label0";
  fs::create_directories(dir);
  for (int i = 0; i < 3; ++i) {
    ImageU8 img;
    img.h = img.w = 4;
    img.c = 3;
    img.pixels.assign(4 * 4 * 3, 100);
    write_ppm((dir / ("f" + std::to_string(i) + ".ppm")).string(), img);
  }
  // window longer than the clip names the offending directory
  try {
    load_frames_dataset(root.string(), 4, 1, 2, 4, 0);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("clip00000_label0") != std::string::npos);
  }
  // window not divisible by stride
  CHECK_THROWS_AS(load_frames_dataset(root.string(), 3, 2, 2, 4, 0), ConfigError);

  ImageU8 odd;
  odd.h = odd.w = 8;
  odd.c = 3;
  odd.pixels.assign(8 * 8 * 3, 100);
  write_ppm((dir / "f3.ppm").string(), odd);
  CHECK_THROWS_AS(load_clip_frames(dir.string(), t, h, w), DataError);

  fs::remove_all(empty);
  fs::remove_all(root);

  SynthMotionSpec bad;
  bad.max_side = 40;
  CHECK_THROWS_AS(gen_synthetic_motion(bad, 1), ConfigError);
  bad = SynthMotionSpec{};
  bad.speed = 4;  // square would leave the frame
  CHECK_THROWS_AS(gen_synthetic_motion(bad, 1), ConfigError);
}
