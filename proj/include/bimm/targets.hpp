#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bimm/patching.hpp"
#include "bimm/tensor.hpp"

namespace bimm {

// ---------------------------------------------------------------------------
// Regression target construction. Targets are computed on full frames first
// (grayscale where applicable, reflect padding at borders) and patchified
// afterwards, so patch boundaries never truncate filter support.
// ---------------------------------------------------------------------------

enum class TargetKind { gabor, contour, rgb, motion };

inline std::string target_kind_name(TargetKind k) {
  switch (k) {
    case TargetKind::gabor: return "gabor";
    case TargetKind::contour: return "contour";
    case TargetKind::rgb: return "rgb";
    case TargetKind::motion: return "motion";
  }
  return "?";
}

inline TargetKind target_kind_from_name(const std::string& s) {
  if (s == "gabor") return TargetKind::gabor;
  if (s == "contour") return TargetKind::contour;
  if (s == "rgb") return TargetKind::rgb;
  if (s == "motion") return TargetKind::motion;
  throw ConfigError("unknown target kind: " + s);
}

struct GaborConfig {
  std::vector<double> orientations = {0.0, M_PI / 4.0, M_PI / 2.0, 3.0 * M_PI / 4.0};
  std::vector<double> wavelengths = {4.0, 8.0};
  double sigma_factor = 0.5;  // sigma = factor * wavelength
  double gamma = 0.5;         // spatial aspect ratio
  double psi = 0.0;           // phase offset
  size_t ksize = 7;

  size_t n_kernels() const { return orientations.size() * wavelengths.size(); }
  void validate() const {
    if (orientations.empty() || wavelengths.empty()) {
      throw ConfigError("GaborConfig: need at least one orientation and wavelength");
    }
    if (ksize % 2 == 0 || ksize == 0) throw ConfigError("GaborConfig: kernel size must be odd");
    for (double l : wavelengths)
      if (!(l > 0)) throw ConfigError("GaborConfig: wavelengths must be positive");
    if (!(sigma_factor > 0)) throw ConfigError("GaborConfig: sigma factor must be positive");
  }
};

struct TargetConfig {
  GaborConfig gabor;
  bool rgb_normalize = true;
};

// Kernels are orientation-major: bank[o * n_wavelengths + l]. Each kernel is
// mean-subtracted so constant inputs map to zero response.
template <class Real>
std::vector<std::vector<Real>> build_gabor_bank(const GaborConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<Real>> bank;
  bank.reserve(cfg.n_kernels());
  long half = static_cast<long>(cfg.ksize / 2);
  for (double theta : cfg.orientations) {
    for (double lambda : cfg.wavelengths) {
      double sigma = cfg.sigma_factor * lambda;
      std::vector<Real> k(cfg.ksize * cfg.ksize);
      double ct = std::cos(theta), st = std::sin(theta);
      double mean = 0.0;
      for (long y = -half; y <= half; ++y) {
        for (long x = -half; x <= half; ++x) {
          double xp = x * ct + y * st;
          double yp = -x * st + y * ct;
          double env = std::exp(-(xp * xp + cfg.gamma * cfg.gamma * yp * yp) /
                                (2.0 * sigma * sigma));
          double v = env * std::cos(2.0 * M_PI * xp / lambda + cfg.psi);
          k[(y + half) * cfg.ksize + (x + half)] = static_cast<Real>(v);
          mean += v;
        }
      }
      mean /= static_cast<double>(cfg.ksize * cfg.ksize);
      for (auto& v : k) v -= static_cast<Real>(mean);
      bank.push_back(std::move(k));
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Filtering primitives.
// ---------------------------------------------------------------------------
namespace detail {
// Mirror indexing without edge duplication: -1 -> 1, n -> n-2.
inline size_t mirror_index(long i, long n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return static_cast<size_t>(i);
}
}  // namespace detail

// Channel mean.
template <class Real>
std::vector<Real> to_grayscale(const std::vector<Real>& pixels, size_t h, size_t w, size_t c) {
  if (pixels.size() != h * w * c) throw ShapeError("to_grayscale: buffer size mismatch");
  std::vector<Real> out(h * w);
  Real inv = Real(1) / Real(c);
  for (size_t i = 0; i < h * w; ++i) {
    Real s = 0;
    for (size_t ch = 0; ch < c; ++ch) s += pixels[i * c + ch];
    out[i] = s * inv;
  }
  return out;
}

// Correlation (no kernel flip) with mirrored borders, same-size output.
template <class Real>
std::vector<Real> filter2d_reflect(const std::vector<Real>& img, size_t h, size_t w,
                                   const std::vector<Real>& kernel, size_t k) {
  if (img.size() != h * w) throw ShapeError("filter2d_reflect: image size mismatch");
  if (kernel.size() != k * k || k % 2 == 0) throw ContractError("filter2d_reflect: bad kernel");
  long half = static_cast<long>(k / 2);
  std::vector<Real> out(h * w);
  for (long y = 0; y < static_cast<long>(h); ++y) {
    for (long x = 0; x < static_cast<long>(w); ++x) {
      Real s = 0;
      for (long ky = -half; ky <= half; ++ky) {
        size_t yy = detail::mirror_index(y + ky, static_cast<long>(h));
        for (long kx = -half; kx <= half; ++kx) {
          size_t xx = detail::mirror_index(x + kx, static_cast<long>(w));
          s += img[yy * w + xx] * kernel[(ky + half) * k + (kx + half)];
        }
      }
      out[y * w + x] = s;
    }
  }
  return out;
}

// Sobel gradient magnitude of the grayscale image.
template <class Real>
std::vector<Real> sobel_magnitude(const std::vector<Real>& gray, size_t h, size_t w) {
  static const std::vector<Real> gx = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const std::vector<Real> gy = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  auto dx = filter2d_reflect(gray, h, w, gx, 3);
  auto dy = filter2d_reflect(gray, h, w, gy, 3);
  std::vector<Real> out(h * w);
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(dx[i] * dx[i] + dy[i] * dy[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Target matrices. Standardized targets carry per-token mean and std so
// predictions can be mapped back to raw values.
// ---------------------------------------------------------------------------
template <class Real>
struct TargetMatrix {
  TargetKind kind = TargetKind::rgb;
  Tensor<Real> values;  // (N, D)
  std::vector<Real> mean;
  std::vector<Real> stddev;

  size_t n_tokens() const { return values.dim(0); }
  size_t dim() const { return values.dim(1); }
};

namespace detail {
// In-place per-row standardization with population variance.
template <class Real>
void standardize_rows(TargetMatrix<Real>& tm) {
  size_t n = tm.values.dim(0), d = tm.values.dim(1);
  tm.mean.resize(n);
  tm.stddev.resize(n);
  Real* p = tm.values.data();
  for (size_t i = 0; i < n; ++i) {
    Real* row = p + i * d;
    Real mu = 0;
    for (size_t j = 0; j < d; ++j) mu += row[j];
    mu /= Real(d);
    Real var = 0;
    for (size_t j = 0; j < d; ++j) {
      Real q = row[j] - mu;
      var += q * q;
    }
    var /= Real(d);
    Real sd = std::sqrt(var + Real(1e-6));
    tm.mean[i] = mu;
    tm.stddev[i] = sd;
    Real inv = Real(1) / sd;
    for (size_t j = 0; j < d; ++j) row[j] = (row[j] - mu) * inv;
  }
}

// Per-frame feature maps stacked kernel-major, patchified, then concatenated
// frame-major per cube token.
template <class Real>
Tensor<Real> stack_map_tokens(const std::vector<std::vector<Real>>& maps_per_frame,
                              size_t maps_per_image, const ClipGeom& g) {
  size_t n = g.n_tokens();
  size_t per_frame_dim = maps_per_image * g.p * g.p;
  Tensor<Real> out({n, g.ct * per_frame_dim});
  ImageGeom fg{g.h, g.w, 1, g.p};
  for (size_t gt = 0; gt < g.grid_t(); ++gt) {
    for (size_t f = 0; f < g.ct; ++f) {
      size_t frame = gt * g.ct + f;
      for (size_t m = 0; m < maps_per_image; ++m) {
        const std::vector<Real>& map = maps_per_frame[frame * maps_per_image + m];
        auto grid = patchify_image(map, fg);
        for (size_t s = 0; s < g.spatial_tokens(); ++s) {
          size_t tok = gt * g.spatial_tokens() + s;
          Real* dst = out.data() + tok * out.dim(1) + f * per_frame_dim + m * g.p * g.p;
          const Real* src = grid.tokens.data() + s * g.p * g.p;
          std::copy(src, src + g.p * g.p, dst);
        }
      }
    }
  }
  return out;
}
}  // namespace detail

// Oriented-energy target: K Gabor responses of the grayscale image, each
// patchified, concatenated kernel-major per token. D = p*p*K.
template <class Real>
TargetMatrix<Real> gabor_target_image(const std::vector<Real>& pixels, const ImageGeom& g,
                                      const GaborConfig& cfg) {
  g.validate();
  auto bank = build_gabor_bank<Real>(cfg);
  auto gray = to_grayscale(pixels, g.h, g.w, g.c);
  TargetMatrix<Real> tm;
  tm.kind = TargetKind::gabor;
  size_t pp = g.p * g.p;
  tm.values = Tensor<Real>({g.n_tokens(), pp * bank.size()});
  ImageGeom mono{g.h, g.w, 1, g.p};
  for (size_t k = 0; k < bank.size(); ++k) {
    auto map = filter2d_reflect(gray, g.h, g.w, bank[k], cfg.ksize);
    auto grid = patchify_image(map, mono);
    for (size_t t = 0; t < g.n_tokens(); ++t) {
      std::copy(grid.tokens.data() + t * pp, grid.tokens.data() + (t + 1) * pp,
                tm.values.data() + t * tm.values.dim(1) + k * pp);
    }
  }
  return tm;
}

template <class Real>
TargetMatrix<Real> gabor_target_clip(const std::vector<Real>& frames, const ClipGeom& g,
                                     const GaborConfig& cfg) {
  g.validate();
  if (frames.size() != g.t * g.h * g.w * g.c) throw ShapeError("gabor_target_clip: size mismatch");
  auto bank = build_gabor_bank<Real>(cfg);
  size_t frame_sz = g.h * g.w * g.c;
  std::vector<std::vector<Real>> maps;
  maps.reserve(g.t * bank.size());
  for (size_t f = 0; f < g.t; ++f) {
    std::vector<Real> frame(frames.begin() + f * frame_sz, frames.begin() + (f + 1) * frame_sz);
    auto gray = to_grayscale(frame, g.h, g.w, g.c);
    for (const auto& kernel : bank) {
      maps.push_back(filter2d_reflect(gray, g.h, g.w, kernel, cfg.ksize));
    }
  }
  TargetMatrix<Real> tm;
  tm.kind = TargetKind::gabor;
  tm.values = detail::stack_map_tokens(maps, bank.size(), g);
  return tm;
}

// Edge-magnitude target (Sobel). D = p*p for images, ct*p*p for clips.
template <class Real>
TargetMatrix<Real> contour_target_image(const std::vector<Real>& pixels, const ImageGeom& g) {
  g.validate();
  auto gray = to_grayscale(pixels, g.h, g.w, g.c);
  auto mag = sobel_magnitude(gray, g.h, g.w);
  TargetMatrix<Real> tm;
  tm.kind = TargetKind::contour;
  tm.values = patchify_image(mag, ImageGeom{g.h, g.w, 1, g.p}).tokens;
  return tm;
}

template <class Real>
TargetMatrix<Real> contour_target_clip(const std::vector<Real>& frames, const ClipGeom& g) {
  g.validate();
  if (frames.size() != g.t * g.h * g.w * g.c) {
    throw ShapeError("contour_target_clip: size mismatch");
  }
  size_t frame_sz = g.h * g.w * g.c;
  std::vector<std::vector<Real>> maps;
  maps.reserve(g.t);
  for (size_t f = 0; f < g.t; ++f) {
    std::vector<Real> frame(frames.begin() + f * frame_sz, frames.begin() + (f + 1) * frame_sz);
    auto gray = to_grayscale(frame, g.h, g.w, g.c);
    maps.push_back(sobel_magnitude(gray, g.h, g.w));
  }
  TargetMatrix<Real> tm;
  tm.kind = TargetKind::contour;
  tm.values = detail::stack_map_tokens(maps, 1, g);
  return tm;
}

// Raw appearance target: the patch pixels themselves, optionally
// standardized per token. D = p*p*C (images) or ct*p*p*C (clips).
template <class Real>
TargetMatrix<Real> rgb_target_image(const std::vector<Real>& pixels, const ImageGeom& g,
                                    bool normalize) {
  g.validate();
  TargetMatrix<Real> tm;
  tm.kind = TargetKind::rgb;
  tm.values = patchify_image(pixels, g).tokens;
  if (normalize) detail::standardize_rows(tm);
  return tm;
}

template <class Real>
TargetMatrix<Real> rgb_target_clip(const std::vector<Real>& frames, const ClipGeom& g,
                                   bool normalize) {
  g.validate();
  TargetMatrix<Real> tm;
  tm.kind = TargetKind::rgb;
  tm.values = cubify_clip(frames, g).tokens;
  if (normalize) detail::standardize_rows(tm);
  return tm;
}

// Temporal-difference target: |frame1 - frame0| inside each two-frame cube,
// flattened like an image patch. Only defined for cube depth 2.
template <class Real>
TargetMatrix<Real> motion_target_clip(const std::vector<Real>& frames, const ClipGeom& g,
                                      bool normalize = false) {
  g.validate();
  if (g.ct != 2) {
    throw ConfigError("motion_target_clip: cube depth must be 2, got " + std::to_string(g.ct));
  }
  if (frames.size() != g.t * g.h * g.w * g.c) throw ShapeError("motion_target_clip: size mismatch");
  size_t frame_sz = g.h * g.w * g.c;
  TargetMatrix<Real> tm;
  tm.kind = TargetKind::motion;
  tm.values = Tensor<Real>({g.n_tokens(), g.p * g.p * g.c});
  ImageGeom fg = g.frame_geom();
  std::vector<Real> diff(frame_sz);
  for (size_t gt = 0; gt < g.grid_t(); ++gt) {
    const Real* f0 = frames.data() + (gt * 2) * frame_sz;
    const Real* f1 = frames.data() + (gt * 2 + 1) * frame_sz;
    for (size_t i = 0; i < frame_sz; ++i) diff[i] = std::abs(f1[i] - f0[i]);
    auto grid = patchify_image(diff, fg);
    for (size_t s = 0; s < g.spatial_tokens(); ++s) {
      std::copy(grid.tokens.data() + s * grid.token_dim(),
                grid.tokens.data() + (s + 1) * grid.token_dim(),
                tm.values.data() + (gt * g.spatial_tokens() + s) * tm.values.dim(1));
    }
  }
  if (normalize) detail::standardize_rows(tm);
  return tm;
}

// ---------------------------------------------------------------------------
// Per-branch target sets, ordered shallow to deep.
// ---------------------------------------------------------------------------
inline std::vector<TargetKind> default_ventral_kinds() {
  return {TargetKind::gabor, TargetKind::contour, TargetKind::rgb};
}
inline std::vector<TargetKind> default_dorsal_kinds() {
  return {TargetKind::gabor, TargetKind::contour, TargetKind::motion};
}

inline size_t target_dim(TargetKind kind, const ImageGeom& g, const TargetConfig& cfg) {
  switch (kind) {
    case TargetKind::gabor: return g.p * g.p * cfg.gabor.n_kernels();
    case TargetKind::contour: return g.p * g.p;
    case TargetKind::rgb: return g.p * g.p * g.c;
    case TargetKind::motion:
      throw ConfigError("target_dim: motion target is undefined for still images");
  }
  throw ConfigError("target_dim: bad kind");
}

inline size_t target_dim(TargetKind kind, const ClipGeom& g, const TargetConfig& cfg) {
  switch (kind) {
    case TargetKind::gabor: return g.ct * cfg.gabor.n_kernels() * g.p * g.p;
    case TargetKind::contour: return g.ct * g.p * g.p;
    case TargetKind::rgb: return g.ct * g.p * g.p * g.c;
    case TargetKind::motion:
      if (g.ct != 2) throw ConfigError("target_dim: motion target requires cube depth 2");
      return g.p * g.p * g.c;
  }
  throw ConfigError("target_dim: bad kind");
}

template <class Real>
std::vector<TargetMatrix<Real>> build_image_targets(const std::vector<Real>& pixels,
                                                    const ImageGeom& g,
                                                    const std::vector<TargetKind>& kinds,
                                                    const TargetConfig& cfg) {
  std::vector<TargetMatrix<Real>> out;
  out.reserve(kinds.size());
  for (TargetKind k : kinds) {
    switch (k) {
      case TargetKind::gabor: out.push_back(gabor_target_image(pixels, g, cfg.gabor)); break;
      case TargetKind::contour: out.push_back(contour_target_image(pixels, g)); break;
      case TargetKind::rgb: out.push_back(rgb_target_image(pixels, g, cfg.rgb_normalize)); break;
      case TargetKind::motion:
        throw ConfigError("build_image_targets: motion target is undefined for still images");
    }
  }
  return out;
}

template <class Real>
std::vector<TargetMatrix<Real>> build_clip_targets(const std::vector<Real>& frames,
                                                   const ClipGeom& g,
                                                   const std::vector<TargetKind>& kinds,
                                                   const TargetConfig& cfg) {
  std::vector<TargetMatrix<Real>> out;
  out.reserve(kinds.size());
  for (TargetKind k : kinds) {
    switch (k) {
      case TargetKind::gabor: out.push_back(gabor_target_clip(frames, g, cfg.gabor)); break;
      case TargetKind::contour: out.push_back(contour_target_clip(frames, g)); break;
      case TargetKind::rgb: out.push_back(rgb_target_clip(frames, g, cfg.rgb_normalize)); break;
      case TargetKind::motion: out.push_back(motion_target_clip(frames, g)); break;
    }
  }
  return out;
}

// Rows of the target matrix at the masked positions, ascending.
template <class Real>
Tensor<Real> gather_masked_rows(const TargetMatrix<Real>& tm, const MaskSpec& mask) {
  if (mask.n_tokens != tm.n_tokens()) {
    throw ShapeError("gather_masked_rows: mask does not match target matrix");
  }
  size_t d = tm.dim();
  Tensor<Real> out({mask.n_masked(), d});
  for (size_t i = 0; i < mask.n_masked(); ++i) {
    const Real* src = tm.values.data() + mask.masked_idx[i] * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  return out;
}

}  // namespace bimm
