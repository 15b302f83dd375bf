#pragma once

#include <algorithm>
#include <vector>

#include "acmil/rng.hpp"
#include "acmil/synthdata.hpp"

namespace acmil {

struct Patch {
  int slice_index = 0;
  int row = 0, col = 0;  // origin in pixels
  int size = 0;
  std::vector<float> pixels;  // size x size, row-major
};

/// One training sample: N slices x K patches plus the volume-level labels.
/// Patches are stored slice-major; no patch- or slice-level labels exist.
struct SubBag {
  int volume_id = 0;
  std::vector<int> slices;     // N selected slice indices
  int patches_per_slice = 0;   // K
  int patch_size = 0;          // p
  std::vector<Patch> patches;  // N*K, slice-major
  int y_vol = 0;
  ConceptGrades grades;
};

/// The ordered slice indices containing the blood-pool surrogate; the bag
/// size M is the length of this list.
inline std::vector<int> la_slices(const PhantomVolume& vol) {
  check(vol.la_begin >= 0 && vol.la_end >= vol.la_begin,
        "volume has an empty LA slice range");
  std::vector<int> out;
  out.reserve(vol.la_len());
  for (int z = vol.la_begin; z <= vol.la_end; ++z) out.push_back(z);
  return out;
}

inline Patch extract_patch(const PhantomVolume& vol, int slice, int row, int col, int p) {
  Patch patch;
  patch.slice_index = slice;
  patch.row = row;
  patch.col = col;
  patch.size = p;
  patch.pixels.resize(size_t(p) * p);
  for (int y = 0; y < p; ++y)
    for (int x = 0; x < p; ++x)
      patch.pixels[size_t(y) * p + x] = vol.at(slice, row + y, col + x);
  return patch;
}

/// Sample the fixed-shape training hierarchy: N slices uniformly without
/// replacement (with replacement when fewer than N are available) and K
/// uniform patch origins per selected slice.
inline SubBag sample_subbag(const PhantomVolume& vol, int n_slices, int k_patches,
                            int p, Rng& rng) {
  check(n_slices >= 1 && k_patches >= 1, "sub-bag shape must be positive");
  check(p <= vol.height && p <= vol.width,
        "patch size exceeds slice dimensions");
  std::vector<int> la = la_slices(vol);
  const int m = static_cast<int>(la.size());

  SubBag bag;
  bag.volume_id = vol.id;
  bag.patches_per_slice = k_patches;
  bag.patch_size = p;
  bag.y_vol = vol.y_vol;
  bag.grades = vol.grades;

  if (m >= n_slices) {
    // partial Fisher-Yates draw, then restore slice order
    for (int i = 0; i < n_slices; ++i) {
      int j = rng.uniform_int(i, m - 1);
      std::swap(la[i], la[j]);
    }
    bag.slices.assign(la.begin(), la.begin() + n_slices);
    std::sort(bag.slices.begin(), bag.slices.end());
  } else {
    for (int i = 0; i < n_slices; ++i)
      bag.slices.push_back(la[rng.uniform_int(0, m - 1)]);
    std::sort(bag.slices.begin(), bag.slices.end());
  }

  bag.patches.reserve(size_t(n_slices) * k_patches);
  for (int s : bag.slices)
    for (int k = 0; k < k_patches; ++k) {
      const int row = rng.uniform_int(0, vol.height - p);
      const int col = rng.uniform_int(0, vol.width - p);
      bag.patches.push_back(extract_patch(vol, s, row, col, p));
    }
  return bag;
}

/// Dense tile origins along one axis: stride p*(1-overlap), with a final
/// tile clamped to the edge so coverage is complete.
inline std::vector<int> tile_origins(int dim, int p, double overlap) {
  check(p >= 1 && p <= dim, "tile size exceeds dimension");
  check(overlap >= 0.0 && overlap < 1.0, "overlap must lie in [0, 1)");
  const int stride = std::max(1, static_cast<int>(std::lround(p * (1.0 - overlap))));
  std::vector<int> origins;
  for (int o = 0; o + p <= dim; o += stride) origins.push_back(o);
  if (origins.back() + p < dim) origins.push_back(dim - p);
  return origins;
}

/// Dense sliding-window tiles over one slice, row-major order.
inline std::vector<Patch> tile_dense(const PhantomVolume& vol, int slice, int p = 64,
                                     double overlap = 0.5) {
  const auto rows = tile_origins(vol.height, p, overlap);
  const auto cols = tile_origins(vol.width, p, overlap);
  std::vector<Patch> tiles;
  tiles.reserve(rows.size() * cols.size());
  for (int r : rows)
    for (int c : cols) tiles.push_back(extract_patch(vol, slice, r, c, p));
  return tiles;
}

}  // namespace acmil
