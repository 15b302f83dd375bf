#pragma once

#include <utility>
#include <vector>

#include "acmil/bagging.hpp"
#include "acmil/losses.hpp"
#include "acmil/model.hpp"

namespace acmil {

/// Everything a dense sliding-window pass exposes for metrics and probes:
/// per-slice per-concept attention over the tile grid, the slice-level
/// concept vectors, the tier-2 weights, and the task prediction.
template <class S>
struct InferenceResult {
  std::vector<int> slices;                    // the M LA slices
  std::vector<std::pair<int, int>> origins;   // tile origins, shared per slice
  int patch_size = 0;
  std::array<std::vector<Vec<S>>, 4> alpha;   // [concept][slice] -> tiles
  std::array<std::vector<Vec<S>>, 4> z;       // [concept][slice] -> subspace
  Vec<S> beta;                                // M
  Vec<S> v_vol;
  Vec<S> task_logits;
  int rank = 0;
};

/// Dense inference over all LA slices with 50% tile overlap by default.
template <class S>
InferenceResult<S> infer_dense(const ParamSet<S>& params, const PhantomVolume& vol,
                               double overlap = 0.5) {
  check(params.cfg.patch <= vol.height && params.cfg.patch <= vol.width,
        "infer_dense: model patch size exceeds volume slice size");
  const auto slices = la_slices(vol);
  std::vector<Patch> patches;
  std::vector<std::pair<int, int>> origins;
  for (size_t m = 0; m < slices.size(); ++m) {
    auto tiles = tile_dense(vol, slices[m], params.cfg.patch, overlap);
    if (m == 0) {
      origins.reserve(tiles.size());
      for (const auto& t : tiles) origins.emplace_back(t.row, t.col);
    }
    for (auto& t : tiles) patches.push_back(std::move(t));
  }
  const int n = static_cast<int>(slices.size());
  const int k = static_cast<int>(origins.size());

  Tape<S> tape;
  ForwardOptions<S> opts;
  opts.build_adversary = false;
  auto g = forward_hierarchy(tape, params, pack_patches<S>(patches), n, k, opts);

  InferenceResult<S> r;
  r.slices = slices;
  r.origins = std::move(origins);
  r.patch_size = params.cfg.patch;
  for (int c = 0; c < 4; ++c) {
    r.alpha[c].reserve(n);
    r.z[c].reserve(n);
    for (int m = 0; m < n; ++m) {
      r.alpha[c].push_back(tape.value(g.alpha[c][m]).col(0));
      r.z[c].push_back(tape.value(g.z_all[c]).col(m));
    }
  }
  r.beta = tape.value(g.beta).col(0);
  r.v_vol = tape.value(g.v_vol).col(0);
  r.task_logits = tape.value(g.task_logits).col(0);
  r.rank = corn_rank(Vec<S>(r.task_logits));
  return r;
}

/// Predicted labels for a set of volumes.
template <class S>
std::vector<int> predict_ranks(const ParamSet<S>& params, const Dataset& ds,
                               const std::vector<int>& indices,
                               double overlap = 0.5) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices)
    out.push_back(infer_dense(params, ds.volumes[i], overlap).rank);
  return out;
}

}  // namespace acmil
