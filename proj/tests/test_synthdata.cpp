#include "catch_amalgamated.hpp"

#include <filesystem>
#include <fstream>

#include "acmil/synthdata.hpp"

using namespace acmil;
namespace fs = std::filesystem;

namespace {

PhantomSpec small_spec(ConceptGrades g, int noise, uint64_t seed = 11) {
  PhantomSpec s;
  s.depth = 8;
  s.height = 64;
  s.width = 64;
  s.grades = g;
  s.noise_level = noise;
  s.seed = seed;
  return s;
}

double mask_mean(const PhantomVolume& v, int plane) {
  double acc = 0;
  size_t n = 0;
  for (int z = 0; z < v.depth; ++z)
    for (int y = 0; y < v.height; ++y)
      for (int x = 0; x < v.width; ++x)
        if (v.mask_at(plane, z, y, x)) {
          acc += v.at(z, y, x);
          ++n;
        }
  return n ? acc / n : 0.0;
}

}  // namespace

TEST_CASE("render parameters follow the grade maps") {
  RenderParams best = grade_to_render_params({3, 3, 3}, 0);
  REQUIRE(best.blur_sigma == 0.0);
  REQUIRE_THAT(best.null_ratio, Catch::Matchers::WithinAbs(0.15, 1e-12));
  REQUIRE_THAT(best.aorta_contrast, Catch::Matchers::WithinAbs(0.4, 1e-12));
  REQUIRE(best.noise_std == 0.0);

  RenderParams worst = grade_to_render_params({0, 0, 0}, 3);
  REQUIRE_THAT(worst.blur_sigma, Catch::Matchers::WithinAbs(3.0, 1e-12));
  REQUIRE_THAT(worst.null_ratio, Catch::Matchers::WithinAbs(0.81, 1e-12));
  REQUIRE_THAT(worst.aorta_contrast, Catch::Matchers::WithinAbs(0.1, 1e-12));
  REQUIRE_THAT(worst.noise_std, Catch::Matchers::WithinAbs(0.06, 1e-12));

  RenderParams mid = grade_to_render_params({2, 1, 3}, 1);
  REQUIRE_THAT(mid.blur_sigma, Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(mid.null_ratio, Catch::Matchers::WithinAbs(0.59, 1e-12));
  REQUIRE_THAT(mid.aorta_contrast, Catch::Matchers::WithinAbs(0.4, 1e-12));
  REQUIRE_THAT(mid.noise_std, Catch::Matchers::WithinAbs(0.02, 1e-12));

  REQUIRE_THROWS_AS(grade_to_render_params({4, 0, 0}, 0), ValidationError);
  REQUIRE_THROWS_AS(grade_to_render_params({0, 0, 0}, 5), ValidationError);
}

TEST_CASE("grade maps are monotone over the full grid") {
  for (int other = 0; other <= 3; ++other) {
    double prev_blur = 1e9, prev_null = 1e9;
    for (int g = 0; g <= 3; ++g) {
      RenderParams sharp = grade_to_render_params({g, other, other}, 0);
      REQUIRE(sharp.blur_sigma <= prev_blur);
      prev_blur = sharp.blur_sigma;
      RenderParams null = grade_to_render_params({other, g, other}, 0);
      REQUIRE(null.null_ratio <= prev_null);
      prev_null = null.null_ratio;
    }
  }
}

TEST_CASE("global quality rule") {
  REQUIRE(derive_global_quality({3, 3, 3}, 0) == 3);
  REQUIRE(derive_global_quality({3, 3, 3}, 3) == 2);
  REQUIRE(derive_global_quality({2, 1, 2}, 2) == 1);

  SECTION("surjective onto all four grades") {
    std::array<int, 4> seen{};
    for (int a = 0; a <= 3; ++a)
      for (int b = 0; b <= 3; ++b)
        for (int c = 0; c <= 3; ++c)
          for (int r = 0; r <= 3; ++r) {
            int y = derive_global_quality({a, b, c}, r);
            REQUIRE(y >= 0);
            REQUIRE(y <= 3);
            seen[y]++;
          }
    for (int k = 0; k < 4; ++k) REQUIRE(seen[k] > 0);
  }
}

TEST_CASE("generated volumes order tissue intensities correctly") {
  PhantomVolume v = generate_volume(small_spec({3, 2, 3}, 0));
  REQUIRE(mask_mean(v, kMaskBlood) > mask_mean(v, kMaskMyocardium));
  REQUIRE(v.y_vol == derive_global_quality(v.grades, v.noise_level));
  for (float x : v.intensities) {
    REQUIRE(x >= 0.f);
    REQUIRE(x <= 1.f);
  }
}

TEST_CASE("generation is a pure function of the spec") {
  PhantomSpec s = small_spec({1, 2, 0}, 2, 77);
  PhantomVolume a = generate_volume(s);
  PhantomVolume b = generate_volume(s);
  REQUIRE(a.intensities == b.intensities);
  REQUIRE(a.masks == b.masks);
  REQUIRE(a.la_begin == b.la_begin);
  REQUIRE(a.la_end == b.la_end);
}

TEST_CASE("worse nulling brightens the myocardium") {
  PhantomVolume bad = generate_volume(small_spec({3, 0, 3}, 0, 5));
  PhantomVolume good = generate_volume(small_spec({3, 3, 3}, 0, 5));
  REQUIRE(mask_mean(bad, kMaskMyocardium) > mask_mean(good, kMaskMyocardium));
}

TEST_CASE("masks are disjoint, in-bounds, and span the LA range") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
    PhantomSpec s = small_spec({2, 2, 2}, 1, seed);
    PhantomVolume v = generate_volume(s);
    const size_t plane = v.voxels();
    for (size_t i = 0; i < plane; ++i) {
      int hits = v.masks[i] + v.masks[plane + i] + v.masks[2 * plane + i];
      REQUIRE(hits <= 1);
    }
    REQUIRE(v.la_begin >= 0);
    REQUIRE(v.la_end < v.depth);
    REQUIRE(v.la_len() >= 1);
    for (int z = v.la_begin; z <= v.la_end; ++z) {
      bool blood_here = false;
      for (int y = 0; y < v.height && !blood_here; ++y)
        for (int x = 0; x < v.width && !blood_here; ++x)
          blood_here = v.mask_at(kMaskBlood, z, y, x);
      REQUIRE(blood_here);
    }
  }
}

TEST_CASE("invalid specs are rejected") {
  PhantomSpec s = small_spec({0, 0, 0}, 0);
  s.depth = 4;
  REQUIRE_THROWS_AS(generate_volume(s), ValidationError);
  PhantomSpec s2 = small_spec({0, 0, 0}, 0);
  s2.width = 32;
  REQUIRE_THROWS_AS(generate_volume(s2), ValidationError);
}

TEST_CASE("balanced sampling fills every class exactly") {
  auto specs = balanced_specs(120, 8, 64, 64, 42);
  REQUIRE(specs.size() == 120);
  std::array<int, 4> counts{};
  for (const auto& s : specs)
    counts[derive_global_quality(s.grades, s.noise_level)]++;
  for (int c = 0; c < 4; ++c) REQUIRE(counts[c] == 30);

  auto again = balanced_specs(120, 8, 64, 64, 42);
  for (size_t i = 0; i < specs.size(); ++i) {
    REQUIRE(specs[i].grades == again[i].grades);
    REQUIRE(specs[i].seed == again[i].seed);
  }

  REQUIRE_THROWS_AS(balanced_specs(7, 8, 64, 64, 1), ValidationError);
  REQUIRE_THROWS_AS(balanced_specs(0, 8, 64, 64, 1), ValidationError);
}

TEST_CASE("dataset writes round-trip bit-exactly") {
  const fs::path dir = fs::temp_directory_path() / "acmil_ds_test";
  fs::remove_all(dir);
  Dataset ds = generate_dataset(8, 8, 64, 64, 99);
  write_dataset(ds, dir);
  Dataset back = read_dataset(dir);
  REQUIRE(back.volumes.size() == 8);
  for (size_t i = 0; i < 8; ++i) {
    REQUIRE(back.volumes[i].intensities == ds.volumes[i].intensities);
    REQUIRE(back.volumes[i].masks == ds.volumes[i].masks);
    REQUIRE(back.volumes[i].grades == ds.volumes[i].grades);
    REQUIRE(back.volumes[i].noise_level == ds.volumes[i].noise_level);
    REQUIRE(back.volumes[i].y_vol == ds.volumes[i].y_vol);
    REQUIRE(back.volumes[i].la_begin == ds.volumes[i].la_begin);
    REQUIRE(back.volumes[i].la_end == ds.volumes[i].la_end);
  }

  SECTION("truncated intensity files are reported, not zero-filled") {
    fs::resize_file(dir / "vol_0003.f32", 100);
    try {
      read_dataset(dir);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      REQUIRE(std::string(e.what()).find("vol_0003") != std::string::npos);
    }
  }

  SECTION("missing masks fail strict loads but pass optional loads") {
    fs::remove(dir / "vol_0002.masks.u8");
    REQUIRE_THROWS_AS(read_dataset(dir, MaskPolicy::kRequire), IoError);
    Dataset loose = read_dataset(dir, MaskPolicy::kOptional);
    REQUIRE_FALSE(loose.volumes[2].has_masks());
    REQUIRE(loose.volumes[3].has_masks());
  }

  SECTION("corrupt manifest is rejected") {
    std::ofstream mf(dir / "meta.json");
    mf << "{not json";
    mf.close();
    REQUIRE_THROWS_AS(read_dataset(dir), IoError);
  }
}
