#include "catch_amalgamated.hpp"

#include <set>

#include "acmil/bagging.hpp"

using namespace acmil;

namespace {

PhantomVolume flat_volume(int depth, int h, int w, int la_begin, int la_end) {
  PhantomVolume v;
  v.depth = depth;
  v.height = h;
  v.width = w;
  v.intensities.assign(v.voxels(), 0.5f);
  v.la_begin = la_begin;
  v.la_end = la_end;
  v.y_vol = 2;
  v.grades = {1, 2, 3};
  return v;
}

}  // namespace

TEST_CASE("la_slices returns the stored range") {
  PhantomVolume v = flat_volume(24, 64, 64, 5, 16);
  auto s = la_slices(v);
  REQUIRE(s.size() == 12);
  REQUIRE(s.front() == 5);
  REQUIRE(s.back() == 16);

  PhantomVolume full = flat_volume(24, 64, 64, 0, 23);
  REQUIRE(la_slices(full).size() == 24);

  PhantomVolume empty = flat_volume(8, 64, 64, 0, -1);
  REQUIRE_THROWS_AS(la_slices(empty), ValidationError);
}

TEST_CASE("la slices of generated volumes intersect the blood pool") {
  PhantomSpec spec;
  spec.depth = 12;
  spec.height = 64;
  spec.width = 64;
  spec.grades = {2, 2, 2};
  spec.noise_level = 0;
  spec.seed = 3;
  PhantomVolume v = generate_volume(spec);
  for (int z : la_slices(v)) {
    bool any = false;
    for (int y = 0; y < v.height && !any; ++y)
      for (int x = 0; x < v.width && !any; ++x)
        any = v.mask_at(kMaskBlood, z, y, x);
    REQUIRE(any);
  }
}

TEST_CASE("sub-bag sampling draws slices without replacement when possible") {
  PhantomVolume v = flat_volume(24, 96, 96, 5, 16);  // M = 12
  Rng rng(7);
  SubBag bag = sample_subbag(v, 8, 4, 64, rng);
  REQUIRE(bag.slices.size() == 8);
  std::set<int> uniq(bag.slices.begin(), bag.slices.end());
  REQUIRE(uniq.size() == 8);
  for (int s : bag.slices) {
    REQUIRE(s >= 5);
    REQUIRE(s <= 16);
  }
  REQUIRE(bag.patches.size() == 8 * 4);
  REQUIRE(bag.y_vol == v.y_vol);
  REQUIRE(bag.grades == v.grades);
}

TEST_CASE("short bags fall back to sampling with replacement") {
  PhantomVolume v = flat_volume(24, 96, 96, 10, 14);  // M = 5 < N = 8
  Rng rng(8);
  SubBag bag = sample_subbag(v, 8, 3, 64, rng);
  REQUIRE(bag.slices.size() == 8);
  for (int s : bag.slices) {
    REQUIRE(s >= 10);
    REQUIRE(s <= 14);
  }
}

TEST_CASE("sampling is deterministic given the rng state") {
  PhantomVolume v = flat_volume(16, 96, 96, 2, 13);
  Rng a(99), b(99);
  SubBag ba = sample_subbag(v, 4, 6, 64, a);
  SubBag bb = sample_subbag(v, 4, 6, 64, b);
  REQUIRE(ba.slices == bb.slices);
  for (size_t i = 0; i < ba.patches.size(); ++i) {
    REQUIRE(ba.patches[i].row == bb.patches[i].row);
    REQUIRE(ba.patches[i].col == bb.patches[i].col);
  }
}

TEST_CASE("oversized patches are rejected") {
  PhantomVolume v = flat_volume(8, 64, 64, 0, 7);
  Rng rng(1);
  REQUIRE_THROWS_AS(sample_subbag(v, 2, 2, 65, rng), ValidationError);
}

TEST_CASE("patch origins are uniform over the valid region") {
  PhantomVolume v = flat_volume(8, 192, 192, 0, 7);
  Rng rng(123);
  // valid origins are the integers [0, 128] on each axis
  const int n = 10000, bins = 8, span = 129;
  std::vector<int> counts(bins * bins, 0);
  SubBag bag = sample_subbag(v, 1, n, 64, rng);
  for (const Patch& p : bag.patches) {
    REQUIRE(p.row >= 0);
    REQUIRE(p.row <= 128);
    REQUIRE(p.col >= 0);
    REQUIRE(p.col <= 128);
    counts[(p.row * bins / span) * bins + (p.col * bins / span)]++;
  }
  double chi2 = 0;
  for (int by = 0; by < bins; ++by)
    for (int bx = 0; bx < bins; ++bx) {
      auto width = [&](int b) {
        int lo = (b * span + bins - 1) / bins;
        int hi = ((b + 1) * span + bins - 1) / bins;
        return hi - lo;
      };
      const double expect = double(n) * width(by) * width(bx) / (span * span);
      const double diff = counts[by * bins + bx] - expect;
      chi2 += diff * diff / expect;
    }
  REQUIRE(chi2 < 120.0);  // 63 dof; far beyond any plausible uniform draw
}

TEST_CASE("dense tiling covers every pixel") {
  REQUIRE(tile_origins(192, 64, 0.5) == std::vector<int>{0, 32, 64, 96, 128});
  REQUIRE(tile_origins(64, 64, 0.5) == std::vector<int>{0});
  REQUIRE(tile_origins(100, 64, 0.5) == std::vector<int>{0, 32, 36});

  for (int dim : {64, 70, 100, 128, 192}) {
    auto origins = tile_origins(dim, 64, 0.5);
    std::vector<bool> covered(dim, false);
    for (int o : origins)
      for (int i = o; i < o + 64; ++i) covered[i] = true;
    for (int i = 0; i < dim; ++i) REQUIRE(covered[i]);
  }
}

TEST_CASE("tile_dense emits a row-major clamped grid") {
  PhantomVolume v = flat_volume(8, 100, 192, 0, 7);
  auto tiles = tile_dense(v, 3, 64, 0.5);
  REQUIRE(tiles.size() == 3 * 5);
  REQUIRE(tiles[0].row == 0);
  REQUIRE(tiles[0].col == 0);
  REQUIRE(tiles[1].col == 32);  // columns advance fastest
  REQUIRE(tiles[5].row == 32);
  REQUIRE(tiles.back().row == 36);
  REQUIRE(tiles.back().col == 128);
  for (const auto& t : tiles) REQUIRE(t.slice_index == 3);
}
