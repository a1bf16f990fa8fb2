#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "bimm/mask.hpp"
#include "bimm/rng.hpp"
#include "bimm/tensor.hpp"

namespace bimm {

// ---------------------------------------------------------------------------
// Geometry. Images are H x W x C channel-last; clips add a leading frame
// axis. Tokens raster over the grid time-major, then row-major; a token's
// feature vector flattens (row, column, channel) within a patch, and cube
// tokens concatenate their frames front to back.
// ---------------------------------------------------------------------------
struct ImageGeom {
  size_t h = 32, w = 32, c = 3, p = 4;

  size_t grid_h() const { return h / p; }
  size_t grid_w() const { return w / p; }
  size_t n_tokens() const { return grid_h() * grid_w(); }
  size_t token_dim() const { return p * p * c; }
  void validate() const {
    if (h == 0 || w == 0 || c == 0 || p == 0) throw ConfigError("ImageGeom: zero dimension");
    if (h % p != 0 || w % p != 0) {
      throw ConfigError("ImageGeom: image " + std::to_string(h) + "x" + std::to_string(w) +
                        " not divisible by patch " + std::to_string(p));
    }
  }
};

struct ClipGeom {
  size_t t = 8, h = 32, w = 32, c = 3, ct = 2, p = 4;

  size_t grid_t() const { return t / ct; }
  size_t grid_h() const { return h / p; }
  size_t grid_w() const { return w / p; }
  size_t spatial_tokens() const { return grid_h() * grid_w(); }
  size_t n_tokens() const { return grid_t() * spatial_tokens(); }
  size_t token_dim() const { return ct * p * p * c; }
  ImageGeom frame_geom() const { return ImageGeom{h, w, c, p}; }
  void validate() const {
    if (t == 0 || h == 0 || w == 0 || c == 0 || ct == 0 || p == 0) {
      throw ConfigError("ClipGeom: zero dimension");
    }
    if (t % ct != 0) throw ConfigError("ClipGeom: frame count not divisible by cube depth");
    if (h % p != 0 || w % p != 0) throw ConfigError("ClipGeom: frame not divisible by patch");
  }
};

template <class Real>
struct TokenGrid {
  Tensor<Real> tokens;        // (N, D_raw)
  std::vector<size_t> grid;   // (gh, gw) or (gt, gh, gw)
  std::vector<size_t> patch;  // (p, p) or (ct, p, p)
  size_t channels = 1;

  size_t n_tokens() const { return tokens.dim(0); }
  size_t token_dim() const { return tokens.dim(1); }
};

// ---------------------------------------------------------------------------
// Patchify / cubify and their inverses.
// ---------------------------------------------------------------------------
template <class Real>
TokenGrid<Real> patchify_image(const std::vector<Real>& pixels, const ImageGeom& g) {
  g.validate();
  if (pixels.size() != g.h * g.w * g.c) {
    throw ShapeError("patchify_image: pixel buffer does not match geometry");
  }
  TokenGrid<Real> out;
  out.grid = {g.grid_h(), g.grid_w()};
  out.patch = {g.p, g.p};
  out.channels = g.c;
  out.tokens = Tensor<Real>({g.n_tokens(), g.token_dim()});
  Real* pt = out.tokens.data();
  size_t d = g.token_dim();
  for (size_t gr = 0; gr < g.grid_h(); ++gr) {
    for (size_t gc = 0; gc < g.grid_w(); ++gc) {
      Real* tok = pt + (gr * g.grid_w() + gc) * d;
      size_t k = 0;
      for (size_t pr = 0; pr < g.p; ++pr) {
        for (size_t pc = 0; pc < g.p; ++pc) {
          const Real* px = pixels.data() + ((gr * g.p + pr) * g.w + gc * g.p + pc) * g.c;
          for (size_t ch = 0; ch < g.c; ++ch) tok[k++] = px[ch];
        }
      }
    }
  }
  return out;
}

template <class Real>
std::vector<Real> unpatchify_image(const Tensor<Real>& tokens, const ImageGeom& g) {
  g.validate();
  if (tokens.ndim() != 2 || tokens.dim(0) != g.n_tokens() || tokens.dim(1) != g.token_dim()) {
    throw ShapeError("unpatchify_image: token matrix does not match geometry");
  }
  std::vector<Real> pixels(g.h * g.w * g.c);
  const Real* pt = tokens.data();
  size_t d = g.token_dim();
  for (size_t gr = 0; gr < g.grid_h(); ++gr) {
    for (size_t gc = 0; gc < g.grid_w(); ++gc) {
      const Real* tok = pt + (gr * g.grid_w() + gc) * d;
      size_t k = 0;
      for (size_t pr = 0; pr < g.p; ++pr) {
        for (size_t pc = 0; pc < g.p; ++pc) {
          Real* px = pixels.data() + ((gr * g.p + pr) * g.w + gc * g.p + pc) * g.c;
          for (size_t ch = 0; ch < g.c; ++ch) px[ch] = tok[k++];
        }
      }
    }
  }
  return pixels;
}

// frames: T * H * W * C, frame-major.
template <class Real>
TokenGrid<Real> cubify_clip(const std::vector<Real>& frames, const ClipGeom& g) {
  g.validate();
  if (frames.size() != g.t * g.h * g.w * g.c) {
    throw ShapeError("cubify_clip: frame buffer does not match geometry");
  }
  TokenGrid<Real> out;
  out.grid = {g.grid_t(), g.grid_h(), g.grid_w()};
  out.patch = {g.ct, g.p, g.p};
  out.channels = g.c;
  out.tokens = Tensor<Real>({g.n_tokens(), g.token_dim()});
  Real* pt = out.tokens.data();
  size_t d = g.token_dim();
  size_t frame_sz = g.h * g.w * g.c;
  for (size_t gt = 0; gt < g.grid_t(); ++gt) {
    for (size_t gr = 0; gr < g.grid_h(); ++gr) {
      for (size_t gc = 0; gc < g.grid_w(); ++gc) {
        Real* tok = pt + ((gt * g.grid_h() + gr) * g.grid_w() + gc) * d;
        size_t k = 0;
        for (size_t f = 0; f < g.ct; ++f) {
          const Real* frame = frames.data() + (gt * g.ct + f) * frame_sz;
          for (size_t pr = 0; pr < g.p; ++pr) {
            for (size_t pc = 0; pc < g.p; ++pc) {
              const Real* px = frame + ((gr * g.p + pr) * g.w + gc * g.p + pc) * g.c;
              for (size_t ch = 0; ch < g.c; ++ch) tok[k++] = px[ch];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class Real>
std::vector<Real> uncubify_clip(const Tensor<Real>& tokens, const ClipGeom& g) {
  g.validate();
  if (tokens.ndim() != 2 || tokens.dim(0) != g.n_tokens() || tokens.dim(1) != g.token_dim()) {
    throw ShapeError("uncubify_clip: token matrix does not match geometry");
  }
  std::vector<Real> frames(g.t * g.h * g.w * g.c);
  const Real* pt = tokens.data();
  size_t d = g.token_dim();
  size_t frame_sz = g.h * g.w * g.c;
  for (size_t gt = 0; gt < g.grid_t(); ++gt) {
    for (size_t gr = 0; gr < g.grid_h(); ++gr) {
      for (size_t gc = 0; gc < g.grid_w(); ++gc) {
        const Real* tok = pt + ((gt * g.grid_h() + gr) * g.grid_w() + gc) * d;
        size_t k = 0;
        for (size_t f = 0; f < g.ct; ++f) {
          Real* frame = frames.data() + (gt * g.ct + f) * frame_sz;
          for (size_t pr = 0; pr < g.p; ++pr) {
            for (size_t pc = 0; pc < g.p; ++pc) {
              Real* px = frame + ((gr * g.p + pr) * g.w + gc * g.p + pc) * g.c;
              for (size_t ch = 0; ch < g.c; ++ch) px[ch] = tok[k++];
            }
          }
        }
      }
    }
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Mask sampling. Counts use round-half-up on ratio * N.
// ---------------------------------------------------------------------------
namespace detail {
inline MaskSpec mask_from_flags(const std::vector<char>& masked) {
  MaskSpec m;
  m.n_tokens = masked.size();
  for (size_t i = 0; i < masked.size(); ++i) {
    (masked[i] ? m.masked_idx : m.visible_idx).push_back(i);
  }
  return m;
}
}  // namespace detail

inline MaskSpec sample_random_mask(size_t n_tokens, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("sample_random_mask: ratio outside [0, 1]");
  if (n_tokens == 0) throw ConfigError("sample_random_mask: empty token set");
  size_t n_masked = round_half_up(ratio * static_cast<double>(n_tokens));
  std::vector<char> flags(n_tokens, 0);
  for (size_t i : rng.sample_without_replacement(n_tokens, n_masked)) flags[i] = 1;
  return detail::mask_from_flags(flags);
}

// Space-only sampling applied at every temporal index: a masked spatial site
// is hidden in all temporal slices, so no temporal neighbor leaks through.
inline MaskSpec sample_tube_mask(size_t spatial_tokens, size_t temporal_tokens, double ratio,
                                 Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("sample_tube_mask: ratio outside [0, 1]");
  if (spatial_tokens == 0 || temporal_tokens == 0) {
    throw ConfigError("sample_tube_mask: empty token grid");
  }
  size_t n_masked_spatial = round_half_up(ratio * static_cast<double>(spatial_tokens));
  std::vector<char> spatial_flags(spatial_tokens, 0);
  for (size_t i : rng.sample_without_replacement(spatial_tokens, n_masked_spatial)) {
    spatial_flags[i] = 1;
  }
  std::vector<char> flags(spatial_tokens * temporal_tokens, 0);
  for (size_t t = 0; t < temporal_tokens; ++t) {
    for (size_t s = 0; s < spatial_tokens; ++s) flags[t * spatial_tokens + s] = spatial_flags[s];
  }
  return detail::mask_from_flags(flags);
}

template <class Real>
Tensor<Real> gather_visible(const TokenGrid<Real>& grid, const MaskSpec& mask) {
  if (mask.n_tokens != grid.n_tokens()) {
    throw ShapeError("gather_visible: mask does not match token grid");
  }
  size_t d = grid.token_dim();
  Tensor<Real> out({mask.n_visible(), d});
  for (size_t j = 0; j < mask.n_visible(); ++j) {
    const Real* src = grid.tokens.data() + mask.visible_idx[j] * d;
    std::copy(src, src + d, out.data() + j * d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixed sinusoidal position embeddings. The embedding width is split evenly
// across grid axes; each axis contributes [sin bands | cos bands] with
// frequencies 10000^(-i / (d_axis / 2)).
// ---------------------------------------------------------------------------
template <class Real>
Tensor<Real> sincos_pos_embed(const std::vector<size_t>& grid, size_t dim) {
  if (grid.empty()) throw ConfigError("sincos_pos_embed: empty grid");
  size_t axes = grid.size();
  if (dim == 0 || dim % (2 * axes) != 0) {
    throw ConfigError("sincos_pos_embed: dim " + std::to_string(dim) +
                      " not divisible by 2 * axes (" + std::to_string(2 * axes) + ")");
  }
  size_t d_axis = dim / axes;
  size_t bands = d_axis / 2;
  size_t n = 1;
  for (size_t g : grid) n *= g;

  std::vector<double> omega(bands);
  for (size_t i = 0; i < bands; ++i) {
    omega[i] = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(bands));
  }

  Tensor<Real> out({n, dim});
  Real* po = out.data();
  std::vector<size_t> coord(axes, 0);
  for (size_t idx = 0; idx < n; ++idx) {
    size_t rem = idx;
    for (size_t a = axes; a-- > 0;) {
      coord[a] = rem % grid[a];
      rem /= grid[a];
    }
    Real* row = po + idx * dim;
    for (size_t a = 0; a < axes; ++a) {
      double x = static_cast<double>(coord[a]);
      Real* seg = row + a * d_axis;
      for (size_t i = 0; i < bands; ++i) {
        seg[i] = static_cast<Real>(std::sin(omega[i] * x));
        seg[bands + i] = static_cast<Real>(std::cos(omega[i] * x));
      }
    }
  }
  return out;
}

}  // namespace bimm
