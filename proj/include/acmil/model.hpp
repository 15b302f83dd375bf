#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmil/autodiff.hpp"
#include "acmil/bagging.hpp"
#include "acmil/conv.hpp"
#include "acmil/rng.hpp"

namespace acmil {

/// Architecture hyperparameters. Four equal-width concept subspaces hang off
/// one shared patch extractor; each has its own gated attention head.
struct ModelConfig {
  int d = 256;           // shared embedding width
  int subspace = 64;     // per-concept width (L)
  int attn_hidden = 128; // gated-attention hidden width
  int num_classes = 4;
  int patch = 64;
  int proj_hidden = 0;   // 0 -> d
  int adv_hidden = 0;    // 0 -> subspace
  std::array<int, 4> conv_channels = {0, 0, 0, 0};  // zeros -> derived from d

  void resolve() {
    if (proj_hidden <= 0) proj_hidden = d;
    if (adv_hidden <= 0) adv_hidden = subspace;
    if (conv_channels[3] <= 0)
      conv_channels = {std::max(2, d / 16), std::max(4, d / 8),
                       std::max(8, d / 4), d};
  }
  void validate() const {
    check(d >= 4 && subspace >= 2 && attn_hidden >= 2, "model dims too small");
    check(num_classes >= 2, "num_classes must be >= 2");
    check(patch >= 16 && patch % 16 == 0,
          "patch size must be a positive multiple of 16");
    check(conv_channels[3] == d, "last conv width must equal d");
  }
  int fused_width() const { return 4 * subspace; }
  int rank_logits() const { return num_classes - 1; }

  json to_json() const {
    return json{{"d", d},
                {"subspace", subspace},
                {"attn_hidden", attn_hidden},
                {"num_classes", num_classes},
                {"patch", patch},
                {"proj_hidden", proj_hidden},
                {"adv_hidden", adv_hidden},
                {"conv_channels", conv_channels}};
  }
  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.d = j.at("d").get<int>();
    c.subspace = j.at("subspace").get<int>();
    c.attn_hidden = j.at("attn_hidden").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.patch = j.at("patch").get<int>();
    c.proj_hidden = j.value("proj_hidden", 0);
    c.adv_hidden = j.value("adv_hidden", 0);
    if (j.contains("conv_channels"))
      for (int i = 0; i < 4; ++i) c.conv_channels[i] = j["conv_channels"][i].get<int>();
    c.resolve();
    c.validate();
    return c;
  }
};

/// All learnable parameters as a flat named list with a fixed order.
/// Group prefixes ("proj.sh", "attn1.nu", ...) drive the gradient-flow
/// checks and optimizer diagnostics.
template <class S>
struct ParamSet {
  ModelConfig cfg;
  std::vector<std::pair<std::string, Mat<S>>> items;

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < items.size(); ++i)
      if (items[i].first == name) return static_cast<int>(i);
    throw ValidationError("unknown parameter: " + name);
  }
  Mat<S>& at(const std::string& name) { return items[index_of(name)].second; }
  const Mat<S>& at(const std::string& name) const {
    return items[index_of(name)].second;
  }
  size_t size() const { return items.size(); }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& [k, m] : items) n += m.size();
    return n;
  }

  static std::string group_of(const std::string& name) {
    auto pos = name.rfind('.');
    return pos == std::string::npos ? name : name.substr(0, pos);
  }

  /// Declare every parameter with its shape, zero-filled.
  static ParamSet zeros(ModelConfig cfg) {
    cfg.resolve();
    cfg.validate();
    ParamSet p;
    p.cfg = cfg;
    auto add = [&p](const std::string& n, int r, int c) {
      p.items.emplace_back(n, Mat<S>::Zero(r, c));
    };
    int cin = 1;
    for (int l = 0; l < 4; ++l) {
      const int cout = cfg.conv_channels[l];
      add("phi.conv" + std::to_string(l) + ".w", cout, 9 * cin);
      add("phi.conv" + std::to_string(l) + ".b", cout, 1);
      cin = cout;
    }
    for (int c = 0; c < 4; ++c) {
      const std::string base = std::string("proj.") + concept_name(c);
      add(base + ".w0", cfg.proj_hidden, cfg.d);
      add(base + ".b0", cfg.proj_hidden, 1);
      add(base + ".w1", cfg.subspace, cfg.proj_hidden);
      add(base + ".b1", cfg.subspace, 1);
    }
    for (int c = 0; c < 4; ++c) {
      const std::string base = std::string("attn1.") + concept_name(c);
      add(base + ".V", cfg.attn_hidden, cfg.subspace);
      add(base + ".U", cfg.attn_hidden, cfg.subspace);
      add(base + ".w", cfg.attn_hidden, 1);
    }
    add("attn2.V", cfg.attn_hidden, cfg.fused_width());
    add("attn2.U", cfg.attn_hidden, cfg.fused_width());
    add("attn2.w", cfg.attn_hidden, 1);
    add("task.w", cfg.rank_logits(), cfg.fused_width());
    add("task.b", cfg.rank_logits(), 1);
    for (int c = 0; c < 3; ++c) {
      const std::string base = std::string("head.") + concept_name(c);
      add(base + ".w", cfg.rank_logits(), cfg.subspace);
      add(base + ".b", cfg.rank_logits(), 1);
    }
    for (int c = 0; c < 3; ++c) {
      const std::string base = std::string("adv.") + concept_name(c);
      add(base + ".w0", cfg.adv_hidden, cfg.subspace);
      add(base + ".b0", cfg.adv_hidden, 1);
      add(base + ".w1", cfg.rank_logits(), cfg.adv_hidden);
      add(base + ".b1", cfg.rank_logits(), 1);
    }
    return p;
  }

  static ParamSet init(const ModelConfig& cfg, Rng& rng) {
    ParamSet p = zeros(cfg);
    for (auto& [name, m] : p.items) {
      if (name.ends_with(".b") || name.ends_with(".b0") || name.ends_with(".b1"))
        continue;
      const bool relu_fan = name.starts_with("phi.") || name.ends_with(".w0");
      const double fan_in = static_cast<double>(m.cols());
      const double stddev = std::sqrt((relu_fan ? 2.0 : 1.0) / fan_in);
      for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = static_cast<S>(rng.normal() * stddev);
    }
    return p;
  }
};

template <class S>
struct ForwardOptions {
  bool stop_gradient = true;  // asymmetric fusion on the predefined branches
  bool grl_enabled = true;    // gradient reversal ahead of the adversaries
  S grl_lambda = S(0.5);
  bool build_adversary = true;
};

/// Handles into one forward pass over an N x K patch hierarchy.
template <class S>
struct ForwardGraph {
  std::vector<Var> leaves;  // parallels ParamSet::items
  Var embeddings;           // d x N*K
  std::array<Var, 4> h_c;   // subspace x N*K
  std::array<std::vector<Var>, 4> alpha;  // [concept][slice] -> K x 1
  std::array<Var, 4> z_all;               // subspace x N
  Var v_m;                                // 4L x N
  Var beta;                               // N x 1
  Var v_vol;                              // 4L x 1
  Var task_logits;                        // (num_classes-1) x 1
  std::array<Var, 3> concept_logits;      // per predefined concept
  std::array<Var, 3> adv_logits;
  int n_slices = 0;
  int k_per_slice = 0;
};

/// Pack patches into the conv input layout: a (1, B*p*p) row whose column
/// b*p*p + y*p + x is pixel (y, x) of patch b.
template <class S>
Mat<S> pack_patches(const std::vector<Patch>& patches) {
  check(!patches.empty(), "no patches to pack");
  const int p = patches[0].size;
  Mat<S> x(1, static_cast<Eigen::Index>(patches.size()) * p * p);
  for (size_t b = 0; b < patches.size(); ++b) {
    check(patches[b].size == p, "mixed patch sizes");
    for (int i = 0; i < p * p; ++i)
      x(0, static_cast<Eigen::Index>(b) * p * p + i) =
          static_cast<S>(patches[b].pixels[i]);
  }
  return x;
}

/// Shared extractor: four stride-2 conv/relu blocks and a global average
/// pool, mapping (1, B*p*p) pixels to (d, B) embeddings.
template <class S>
Var embed_patches(Tape<S>& tape, const std::vector<Var>& leaves,
                  const ParamSet<S>& params, Var x, int batch) {
  const ModelConfig& cfg = params.cfg;
  check(tape.value(x).cols() ==
            static_cast<Eigen::Index>(batch) * cfg.patch * cfg.patch,
        "embed_patches: input shape mismatch");
  int h = cfg.patch, cin = 1;
  Var cur = x;
  for (int l = 0; l < 4; ++l) {
    ConvGeom g;
    g.batch = batch;
    g.in_h = h;
    g.in_w = h;
    g.in_c = cin;
    g.out_c = cfg.conv_channels[l];
    cur = tape.relu(conv2d(tape, cur,
                           leaves[params.index_of("phi.conv" + std::to_string(l) + ".w")],
                           leaves[params.index_of("phi.conv" + std::to_string(l) + ".b")],
                           g));
    h = g.out_h();
    cin = g.out_c;
  }
  return global_avg_pool(tape, cur, batch, h, h);
}

/// Gated attention over the columns of a (L x K) block: softmax of
/// w'(tanh(V h) * sigmoid(U h)) across the K instances.
template <class S>
Var gated_attention(Tape<S>& tape, Var v, Var u, Var w, Var h_block) {
  check(tape.value(h_block).cols() >= 1, "gated_attention: empty instance set");
  Var t = tape.tanh_(tape.matmul(v, h_block));
  Var s = tape.sigmoid_(tape.matmul(u, h_block));
  Var scores = tape.tdot(w, tape.hadamard(t, s));
  return tape.softmax_col(scores);
}

template <class S>
std::vector<Var> make_leaves(Tape<S>& tape, const ParamSet<S>& params) {
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& [name, m] : params.items) leaves.push_back(tape.leaf(m));
  return leaves;
}

/// Full two-tier forward pass. Tier 1 projects the shared embeddings into
/// the four concept subspaces and pools patches per slice with
/// concept-specific attention; tier 2 fuses the slice vectors (predefined
/// branches behind a stop-gradient) and pools slices for the task head.
template <class S>
ForwardGraph<S> forward_hierarchy(Tape<S>& tape, const ParamSet<S>& params,
                                  const Mat<S>& patch_matrix, int n_slices,
                                  int k_per_slice,
                                  const ForwardOptions<S>& opts = {}) {
  const ModelConfig& cfg = params.cfg;
  check(n_slices >= 1 && k_per_slice >= 1, "empty hierarchy");
  const int batch = n_slices * k_per_slice;

  ForwardGraph<S> g;
  g.n_slices = n_slices;
  g.k_per_slice = k_per_slice;
  g.leaves = make_leaves(tape, params);
  Var x = tape.constant(patch_matrix);
  g.embeddings = embed_patches(tape, g.leaves, params, x, batch);

  auto leaf = [&](const std::string& n) { return g.leaves[params.index_of(n)]; };

  for (int c = 0; c < 4; ++c) {
    const std::string base = std::string("proj.") + concept_name(c);
    Var hidden = tape.relu(
        tape.linear(leaf(base + ".w0"), leaf(base + ".b0"), g.embeddings));
    g.h_c[c] = tape.linear(leaf(base + ".w1"), leaf(base + ".b1"), hidden);

    const std::string attn = std::string("attn1.") + concept_name(c);
    std::vector<Var> z_slices;
    for (int m = 0; m < n_slices; ++m) {
      Var block = tape.cols(g.h_c[c], m * k_per_slice, k_per_slice);
      Var a = gated_attention(tape, leaf(attn + ".V"), leaf(attn + ".U"),
                              leaf(attn + ".w"), block);
      g.alpha[c].push_back(a);
      z_slices.push_back(tape.matmul(block, a));
    }
    g.z_all[c] = tape.hcat(z_slices);
  }

  std::vector<Var> segments;
  for (int c = 0; c < 4; ++c) {
    const bool sg = opts.stop_gradient && c != kResidual;
    segments.push_back(sg ? tape.stop_gradient(g.z_all[c]) : g.z_all[c]);
  }
  g.v_m = tape.vcat(segments);
  g.beta = gated_attention(tape, leaf("attn2.V"), leaf("attn2.U"),
                           leaf("attn2.w"), g.v_m);
  g.v_vol = tape.matmul(g.v_m, g.beta);
  g.task_logits = tape.linear(leaf("task.w"), leaf("task.b"), g.v_vol);

  for (int c = 0; c < 3; ++c) {
    const std::string base = std::string("head.") + concept_name(c);
    g.concept_logits[c] = tape.meancols(
        tape.linear(leaf(base + ".w"), leaf(base + ".b"), g.z_all[c]));
  }

  if (opts.build_adversary) {
    Var z_in = opts.grl_enabled ? tape.grl(g.z_all[kResidual], opts.grl_lambda)
                                : g.z_all[kResidual];
    for (int c = 0; c < 3; ++c) {
      const std::string base = std::string("adv.") + concept_name(c);
      Var hidden =
          tape.relu(tape.linear(leaf(base + ".w0"), leaf(base + ".b0"), z_in));
      g.adv_logits[c] = tape.meancols(
          tape.linear(leaf(base + ".w1"), leaf(base + ".b1"), hidden));
    }
  }
  return g;
}

template <class S>
ForwardGraph<S> forward_subbag(Tape<S>& tape, const ParamSet<S>& params,
                               const SubBag& bag,
                               const ForwardOptions<S>& opts = {}) {
  check(bag.patch_size == params.cfg.patch, "sub-bag patch size mismatch");
  return forward_hierarchy(tape, params, pack_patches<S>(bag.patches),
                           static_cast<int>(bag.slices.size()),
                           bag.patches_per_slice, opts);
}

// ---------------------------------------------------------------------------
// checkpoints: JSON header + shape-tagged float32 payload

constexpr char kCheckpointMagic[8] = {'A', 'C', 'M', 'I', 'L', 'C', 'K', '1'};

struct CheckpointMeta {
  int64_t step = 0;
  std::string rng_state;
};

inline void save_checkpoint(const std::filesystem::path& path,
                            const ParamSet<float>& params,
                            const CheckpointMeta& meta = {}) {
  json header;
  header["version"] = kVersion;
  header["config"] = params.cfg.to_json();
  header["step"] = meta.step;
  header["rng_state"] = meta.rng_state;
  json plist = json::array();
  for (const auto& [name, m] : params.items)
    plist.push_back(json{{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  header["params"] = plist;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path.string());
  f.write(kCheckpointMagic, 8);
  uint64_t len = hs.size();
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, m] : params.items)
    f.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * m.size()));
  if (!f) throw IoError("checkpoint write failed: " + path.string());
}

inline std::pair<ParamSet<float>, CheckpointMeta> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  std::string hs(len, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(len));
  if (!f) throw IoError("truncated checkpoint header: " + path.string());
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header: " + std::string(e.what()));
  }

  ModelConfig cfg = ModelConfig::from_json(header.at("config"));
  ParamSet<float> params = ParamSet<float>::zeros(cfg);
  const json& plist = header.at("params");
  if (plist.size() != params.size())
    throw IoError("checkpoint parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    auto& [name, m] = params.items[i];
    const json& e = plist[i];
    if (e.at("name").get<std::string>() != name ||
        e.at("rows").get<Eigen::Index>() != m.rows() ||
        e.at("cols").get<Eigen::Index>() != m.cols())
      throw IoError("checkpoint shape mismatch for parameter '" + name + "'");
    f.read(reinterpret_cast<char*>(m.data()),
           static_cast<std::streamsize>(sizeof(float) * m.size()));
    if (!f) throw IoError("truncated checkpoint payload at '" + name + "'");
  }
  CheckpointMeta meta;
  meta.step = header.value("step", int64_t(0));
  meta.rng_state = header.value("rng_state", "");
  return {std::move(params), std::move(meta)};
}

}  // namespace acmil
