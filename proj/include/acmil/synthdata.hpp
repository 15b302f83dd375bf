#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmil/core.hpp"
#include "acmil/rng.hpp"

namespace acmil {

using json = nlohmann::json;

constexpr int kNumGrades = 4;  // ordinal grades 0..3, 3 = best

struct ConceptGrades {
  int sharpness = 3;
  int nulling = 3;
  int aorta = 3;

  int get(int c) const {
    switch (c) {
      case kSharpness: return sharpness;
      case kNulling: return nulling;
      case kAorta: return aorta;
    }
    throw ValidationError("ConceptGrades: no label for the residual branch");
  }
  void validate() const {
    check(sharpness >= 0 && sharpness <= 3 && nulling >= 0 && nulling <= 3 &&
              aorta >= 0 && aorta <= 3,
          "concept grades must lie in [0, 3]");
  }
  bool operator==(const ConceptGrades&) const = default;
};

struct PhantomSpec {
  int depth = 24;
  int height = 192;
  int width = 192;
  ConceptGrades grades;
  int noise_level = 0;  // hidden residual factor, never exposed as a concept
  uint64_t seed = 0;

  void validate() const {
    grades.validate();
    check(noise_level >= 0 && noise_level <= 3, "noise_level must lie in [0, 3]");
    check(depth >= 8, "depth must be >= 8");
    check(height >= 64 && width >= 64, "height and width must be >= 64");
  }
};

struct RenderParams {
  double blur_sigma = 0;      // px
  double null_ratio = 0;      // myocardium / blood-pool intensity
  double aorta_contrast = 0;  // wall minus lumen intensity
  double noise_std = 0;
};

inline RenderParams grade_to_render_params(const ConceptGrades& g, int noise_level) {
  g.validate();
  check(noise_level >= 0 && noise_level <= 3, "noise_level must lie in [0, 3]");
  RenderParams p;
  p.blur_sigma = 1.0 * (3 - g.sharpness);
  p.null_ratio = 0.15 + 0.22 * (3 - g.nulling);
  p.aorta_contrast = 0.1 + 0.3 * g.aorta / 3.0;
  p.noise_std = 0.02 * noise_level;
  return p;
}

/// Volume-level quality grade: mean concept grade, rounded, with a one-grade
/// penalty when the hidden noise factor is high.
inline int derive_global_quality(const ConceptGrades& g, int noise_level) {
  g.validate();
  check(noise_level >= 0 && noise_level <= 3, "noise_level must lie in [0, 3]");
  int y = static_cast<int>(std::llround((g.sharpness + g.nulling + g.aorta) / 3.0));
  if (noise_level >= 2) y -= 1;
  return std::clamp(y, 0, 3);
}

enum MaskPlane : int { kMaskBlood = 0, kMaskMyocardium = 1, kMaskAorta = 2 };

struct PhantomVolume {
  int depth = 0, height = 0, width = 0;
  std::vector<float> intensities;  // depth*height*width, C order
  std::vector<uint8_t> masks;      // 3 stacked planes, same layout
  ConceptGrades grades;
  int noise_level = 0;
  int y_vol = 0;
  int la_begin = 0, la_end = -1;  // inclusive slice range
  int id = 0;

  size_t voxels() const { return size_t(depth) * height * width; }
  float& at(int z, int y, int x) {
    return intensities[(size_t(z) * height + y) * width + x];
  }
  float at(int z, int y, int x) const {
    return intensities[(size_t(z) * height + y) * width + x];
  }
  uint8_t mask_at(int plane, int z, int y, int x) const {
    return masks[plane * voxels() + (size_t(z) * height + y) * width + x];
  }
  bool has_masks() const { return !masks.empty(); }
  int la_len() const { return la_end - la_begin + 1; }
};

namespace detail {

inline void blur_slice(float* img, int h, int w, double sigma, std::vector<float>& tmp) {
  if (sigma <= 0) return;
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<float> k(2 * rad + 1);
  double sum = 0;
  for (int i = -rad; i <= rad; ++i) {
    k[i + rad] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    sum += k[i + rad];
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  tmp.assign(size_t(h) * w, 0.f);
  // horizontal, replicated borders
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int i = -rad; i <= rad; ++i)
        acc += k[i + rad] * img[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  for (int x = 0; x < w; ++x)
    for (int y = 0; y < h; ++y) {
      float acc = 0;
      for (int i = -rad; i <= rad; ++i)
        acc += k[i + rad] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      img[y * w + x] = acc;
    }
}

struct PhantomGeometry {
  double cy, cx;          // blood-pool centre (pixels)
  double ay, ax, az;      // blood-pool semi-axes
  double zc;              // blood-pool centre slice
  double shell = 1.22;    // outer normalized radius of the myocardium
  int aorta_y, aorta_x;   // tube centre
  int aorta_r, aorta_wall;
};

inline PhantomGeometry make_geometry(const PhantomSpec& spec, Rng& rng, bool jitter) {
  const double s = std::min(spec.height, spec.width);
  const int j = jitter ? std::max(1, static_cast<int>(std::lround(0.015 * s))) : 0;
  PhantomGeometry g;
  g.cy = spec.height / 2.0 + (j ? rng.uniform_int(-j, j) : 0);
  g.cx = spec.width / 2.0 + (j ? rng.uniform_int(-j, j) : 0);
  const double wobble_y = jitter ? 1.0 + 0.04 * (2 * rng.uniform() - 1) : 1.0;
  const double wobble_x = jitter ? 1.0 + 0.04 * (2 * rng.uniform() - 1) : 1.0;
  g.ay = 0.16 * s * wobble_y;
  g.ax = 0.19 * s * wobble_x;
  int la_len = static_cast<int>(std::lround(0.6 * spec.depth)) +
               (jitter ? rng.uniform_int(-1, 1) : 0);
  la_len = std::clamp(la_len, 3, spec.depth);
  g.zc = spec.depth / 2.0 + (jitter ? rng.uniform_int(-1, 1) : 0);
  g.az = la_len / 2.0 + 0.1;
  const int ja = jitter ? (s >= 96 ? 2 : 1) : 0;
  g.aorta_y = static_cast<int>(std::lround(0.25 * spec.height)) +
              (ja ? rng.uniform_int(-ja, ja) : 0);
  g.aorta_x = static_cast<int>(std::lround(0.75 * spec.width)) +
              (ja ? rng.uniform_int(-ja, ja) : 0);
  g.aorta_r = std::max(4, static_cast<int>(std::lround(0.045 * s)));
  g.aorta_wall = std::max(2, static_cast<int>(std::lround(0.02 * s)));
  return g;
}

}  // namespace detail

/// Render one phantom. Anatomy: a bright blood-pool ellipsoid spanning the
/// LA slice range, a myocardium shell around it whose brightness tracks
/// null_ratio, and an aorta tube in the opposite image corner whose
/// wall/lumen step equals aorta_contrast. Masks are rasterized before blur
/// and noise are applied. Deterministic for a fixed spec.
inline PhantomVolume generate_volume(const PhantomSpec& spec) {
  spec.validate();
  const RenderParams rp = grade_to_render_params(spec.grades, spec.noise_level);

  PhantomVolume vol;
  vol.depth = spec.depth;
  vol.height = spec.height;
  vol.width = spec.width;
  vol.grades = spec.grades;
  vol.noise_level = spec.noise_level;
  vol.y_vol = derive_global_quality(spec.grades, spec.noise_level);

  Rng rng(derive_seed(spec.seed, 0x9e0));

  const float background = 0.12f;
  const float blood = 0.85f;
  const float myo = static_cast<float>(rp.null_ratio) * blood;
  const float lumen = 0.45f;
  const float wall = lumen + static_cast<float>(rp.aorta_contrast);

  // jittered geometry; falls back to the collision-free base layout
  detail::PhantomGeometry geo{};
  vol.intensities.assign(vol.voxels(), background);
  vol.masks.assign(3 * vol.voxels(), 0);
  bool placed = false;
  for (int attempt = 0; attempt < 4 && !placed; ++attempt) {
    geo = detail::make_geometry(spec, rng, attempt < 3);
    // overlap test on the midplane circle vs. the shell's outer ellipse
    const double dy = geo.aorta_y - geo.cy, dx = geo.aorta_x - geo.cx;
    const double dist = std::sqrt(dy * dy + dx * dx);
    const double outer = std::max(geo.ay, geo.ax) * geo.shell;
    placed = dist > outer + geo.aorta_r + 1.0;
  }

  const size_t plane = vol.voxels();
  for (int z = 0; z < vol.depth; ++z) {
    const double nz = (z - geo.zc) / geo.az;
    for (int y = 0; y < vol.height; ++y) {
      for (int x = 0; x < vol.width; ++x) {
        const size_t idx = (size_t(z) * vol.height + y) * vol.width + x;
        const double ny = (y - geo.cy) / geo.ay;
        const double nx = (x - geo.cx) / geo.ax;
        const double q = std::sqrt(nz * nz + ny * ny + nx * nx);
        if (q <= 1.0) {
          vol.intensities[idx] = blood;
          vol.masks[kMaskBlood * plane + idx] = 1;
        } else if (q <= geo.shell) {
          vol.intensities[idx] = myo;
          vol.masks[kMaskMyocardium * plane + idx] = 1;
        }
        const double ady = y - geo.aorta_y, adx = x - geo.aorta_x;
        const double ad = std::sqrt(ady * ady + adx * adx);
        if (ad <= geo.aorta_r) {
          vol.intensities[idx] = ad <= geo.aorta_r - geo.aorta_wall ? lumen : wall;
          vol.masks[kMaskAorta * plane + idx] = 1;
        }
      }
    }
  }

  // LA range from actual blood-pool occupancy
  vol.la_begin = -1;
  for (int z = 0; z < vol.depth; ++z) {
    bool any = false;
    for (size_t i = size_t(z) * vol.height * vol.width;
         i < size_t(z + 1) * vol.height * vol.width && !any; ++i)
      any = vol.masks[kMaskBlood * plane + i] != 0;
    if (any) {
      if (vol.la_begin < 0) vol.la_begin = z;
      vol.la_end = z;
    }
  }
  check(vol.la_begin >= 0 && vol.la_end >= vol.la_begin,
        "generated blood pool is empty");

  std::vector<float> tmp;
  if (rp.blur_sigma > 0)
    for (int z = 0; z < vol.depth; ++z)
      detail::blur_slice(&vol.intensities[size_t(z) * vol.height * vol.width],
                         vol.height, vol.width, rp.blur_sigma, tmp);
  if (rp.noise_std > 0)
    for (auto& v : vol.intensities)
      v += static_cast<float>(rng.normal() * rp.noise_std);
  for (auto& v : vol.intensities) v = std::clamp(v, 0.f, 1.f);
  return vol;
}

// ---------------------------------------------------------------------------
// dataset assembly and persistence

struct Dataset {
  int depth = 0, height = 0, width = 0;
  uint64_t seed = 0;
  std::string version = kVersion;
  std::vector<PhantomVolume> volumes;

  std::vector<int> labels() const {
    std::vector<int> y;
    y.reserve(volumes.size());
    for (const auto& v : volumes) y.push_back(v.y_vol);
    return y;
  }
};

/// Sample specs with uniform independent grades, rejection-balanced so every
/// global class receives exactly count/4 volumes.
inline std::vector<PhantomSpec> balanced_specs(int count, int depth, int height,
                                               int width, uint64_t seed) {
  check(count > 0 && count % kNumGrades == 0,
        "count must be a positive multiple of 4 so classes balance within +/-1");
  const int quota = count / kNumGrades;
  std::array<int, kNumGrades> used{};
  Rng rng(derive_seed(seed, 0xba1a));
  std::vector<PhantomSpec> specs;
  while (static_cast<int>(specs.size()) < count) {
    ConceptGrades g{rng.uniform_int(0, 3), rng.uniform_int(0, 3), rng.uniform_int(0, 3)};
    int r = rng.uniform_int(0, 3);
    int y = derive_global_quality(g, r);
    if (used[y] >= quota) continue;
    used[y]++;
    PhantomSpec s;
    s.depth = depth;
    s.height = height;
    s.width = width;
    s.grades = g;
    s.noise_level = r;
    s.seed = derive_seed(seed, 0x700000ULL + specs.size());
    specs.push_back(s);
  }
  return specs;
}

inline Dataset generate_dataset(int count, int depth, int height, int width,
                                uint64_t seed) {
  Dataset ds;
  ds.depth = depth;
  ds.height = height;
  ds.width = width;
  ds.seed = seed;
  auto specs = balanced_specs(count, depth, height, width, seed);
  ds.volumes.reserve(specs.size());
  for (size_t i = 0; i < specs.size(); ++i) {
    ds.volumes.push_back(generate_volume(specs[i]));
    ds.volumes.back().id = static_cast<int>(i);
  }
  return ds;
}

namespace detail {

inline std::string vol_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vol_%04d", id);
  return buf;
}

template <class T>
void write_raw(const std::filesystem::path& p, const std::vector<T>& data) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + p.string());
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!f) throw IoError("write failed: " + p.string());
}

template <class T>
void read_raw(const std::filesystem::path& p, std::vector<T>& data, size_t expect) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("missing file: " + p.string());
  const auto bytes = static_cast<size_t>(f.tellg());
  if (bytes != expect * sizeof(T))
    throw IoError("size mismatch in " + p.string() + ": expected " +
                  std::to_string(expect * sizeof(T)) + " bytes, found " +
                  std::to_string(bytes));
  data.resize(expect);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(bytes));
  if (!f) throw IoError("read failed: " + p.string());
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json meta;
  meta["count"] = ds.volumes.size();
  meta["depth"] = ds.depth;
  meta["height"] = ds.height;
  meta["width"] = ds.width;
  meta["seed"] = ds.seed;
  meta["version"] = ds.version;
  std::ofstream mf(dir / "meta.json");
  mf << meta.dump(2) << "\n";

  for (const auto& v : ds.volumes) {
    const std::string stem = detail::vol_stem(v.id);
    detail::write_raw(dir / (stem + ".f32"), v.intensities);
    detail::write_raw(dir / (stem + ".masks.u8"), v.masks);
    json lab;
    lab["grades"] = {{"sharpness", v.grades.sharpness},
                     {"nulling", v.grades.nulling},
                     {"aorta", v.grades.aorta}};
    lab["noise_level"] = v.noise_level;
    lab["y_vol"] = v.y_vol;
    lab["la_slice_range"] = {v.la_begin, v.la_end};
    std::ofstream lf(dir / (stem + ".json"));
    lf << lab.dump(2) << "\n";
  }
}

enum class MaskPolicy { kRequire, kOptional };

inline Dataset read_dataset(const std::filesystem::path& dir,
                            MaskPolicy masks = MaskPolicy::kRequire) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw IoError("missing dataset manifest: " + (dir / "meta.json").string());
  json meta;
  try {
    mf >> meta;
  } catch (const json::exception& e) {
    throw IoError("corrupt dataset manifest " + (dir / "meta.json").string() +
                  ": " + e.what());
  }
  Dataset ds;
  ds.depth = meta.at("depth").get<int>();
  ds.height = meta.at("height").get<int>();
  ds.width = meta.at("width").get<int>();
  ds.seed = meta.at("seed").get<uint64_t>();
  ds.version = meta.value("version", "");
  const int count = meta.at("count").get<int>();

  for (int id = 0; id < count; ++id) {
    const std::string stem = detail::vol_stem(id);
    PhantomVolume v;
    v.id = id;
    v.depth = ds.depth;
    v.height = ds.height;
    v.width = ds.width;
    try {
      detail::read_raw(dir / (stem + ".f32"), v.intensities, v.voxels());
      if (masks == MaskPolicy::kRequire || fs::exists(dir / (stem + ".masks.u8")))
        detail::read_raw(dir / (stem + ".masks.u8"), v.masks, 3 * v.voxels());
      std::ifstream lf(dir / (stem + ".json"));
      if (!lf) throw IoError("missing label file: " + (dir / (stem + ".json")).string());
      json lab;
      lf >> lab;
      v.grades.sharpness = lab.at("grades").at("sharpness").get<int>();
      v.grades.nulling = lab.at("grades").at("nulling").get<int>();
      v.grades.aorta = lab.at("grades").at("aorta").get<int>();
      v.noise_level = lab.at("noise_level").get<int>();
      v.y_vol = lab.at("y_vol").get<int>();
      v.la_begin = lab.at("la_slice_range").at(0).get<int>();
      v.la_end = lab.at("la_slice_range").at(1).get<int>();
    } catch (const json::exception& e) {
      throw IoError("corrupt labels for " + stem + ": " + e.what());
    } catch (const IoError& e) {
      throw IoError("while loading " + stem + ": " + e.what());
    }
    check(v.la_begin >= 0 && v.la_end >= v.la_begin && v.la_end < v.depth,
          "invalid la_slice_range in " + stem);
    ds.volumes.push_back(std::move(v));
  }
  return ds;
}

}  // namespace acmil
