#pragma once

// The two-track molecular network: atom/pair embeddings, N blocks of
// pair-biased attention + outer-product + triangular updates, a masked-token
// head and a coordinate-denoising position head. Templated on the scalar
// type so 64-bit finite-difference checks share the training code path.

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "tinymol/errors.hpp"
#include "tinymol/kabsch.hpp"
#include "tinymol/molgraph.hpp"
#include "tinymol/rng.hpp"
#include "tinymol/tensor.hpp"

namespace tinymol::model {

using diff::Shape;
using diff::Tensor;

inline constexpr int kTokenClasses = vocab::kAtomToken;  // the prediction head's vocabulary
inline constexpr int kPairTypeTable = vocab::kTokenTableSize * vocab::kTokenTableSize;

struct ModelConfig {
  int layers = 2;
  int embed_dim = 16;
  int heads = 2;
  int pair_dim = 8;
  int pair_hidden = 4;
  int ffn_dim = 16;
  int gaussian_kernels = 16;
  int spd_vocab = kSpdVocab;
  int token_vocab = vocab::kTokenTableSize;
  // Training defaults carried with the architecture presets.
  double peak_lr = 1e-4;
  int batch_size = 1024;

  int head_dim() const { return embed_dim / heads; }

  void check() const {
    if (layers < 1 || embed_dim < 1 || heads < 1 || pair_dim < 1 || pair_hidden < 1 ||
        ffn_dim < 1 || gaussian_kernels < 1)
      throw Error(ErrorCode::config_error, "model dimensions must be >= 1");
    if (embed_dim % heads != 0)
      throw Error(ErrorCode::config_error,
                  "embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
};

// Named size presets plus a desk-scale "tiny" config for tests.
inline ModelConfig preset(const std::string& name) {
  ModelConfig c;
  auto set = [&](int layers, int d, int h, int dp, int dt, int df) {
    c.layers = layers;
    c.embed_dim = d;
    c.heads = h;
    c.pair_dim = dp;
    c.pair_hidden = dt;
    c.ffn_dim = df;
  };
  if (name == "tiny")
    set(2, 16, 2, 8, 4, 16);
  else if (name == "42M")
    set(6, 768, 48, 512, 64, 768);
  else if (name == "84M")
    set(12, 768, 48, 512, 64, 768);
  else if (name == "164M")
    set(24, 768, 48, 512, 64, 768);
  else if (name == "310M")
    set(32, 1024, 64, 512, 64, 1024);
  else if (name == "570M")
    set(32, 1536, 96, 512, 64, 1536);
  else if (name == "1.1B")
    set(64, 1536, 96, 512, 64, 1536);
  else
    throw Error(ErrorCode::config_error, "unknown preset " + name);
  c.check();
  return c;
}

// ---------------------------------------------------------------------------
// Parameter manifest

struct ParamSpec {
  enum class Init { zeros, ones, normal, linspace };
  std::string name;
  Shape shape;
  Init init = Init::zeros;
  double scale = 0.0;  // stddev for normal; end value for linspace

  int64_t numel() const { return diff::numel(shape); }
};

// Single source of truth for every learnable tensor: name, shape and
// initialization. Checkpoints and the optimizer follow this order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  using Init = ParamSpec::Init;
  const int64_t d = cfg.embed_dim, dp = cfg.pair_dim, dt = cfg.pair_hidden, df = cfg.ffn_dim,
                h = cfg.heads, K = cfg.gaussian_kernels;
  std::vector<ParamSpec> specs;
  auto emb = [&](const std::string& name, int64_t rows, int64_t width) {
    specs.push_back({name, {rows, width}, Init::normal, 0.02});
  };
  auto vec = [&](const std::string& name, int64_t width, Init init = Init::zeros) {
    specs.push_back({name, {width}, init, init == Init::normal ? 0.02 : 0.0});
  };
  auto linear = [&](const std::string& name, int64_t in, int64_t out, bool bias = true) {
    specs.push_back({name + ".w", {in, out}, Init::normal, 1.0 / std::sqrt(double(in))});
    if (bias) specs.push_back({name + ".b", {out}, Init::zeros, 0.0});
  };
  auto norm = [&](const std::string& name, int64_t width) {
    specs.push_back({name + ".g", {width}, Init::ones, 0.0});
    specs.push_back({name + ".b", {width}, Init::zeros, 0.0});
  };

  emb("embed.token", cfg.token_vocab, d);
  emb("embed.degree", vocab::kDegree, d);
  emb("embed.atomic.chirality", vocab::kChirality, d);
  emb("embed.atomic.formal_charge", vocab::kFormalCharge, d);
  emb("embed.atomic.num_h", vocab::kNumH, d);
  emb("embed.atomic.radical_e", vocab::kRadicalE, d);
  emb("embed.atomic.hybridization", vocab::kHybridization, d);
  emb("embed.atomic.aromatic", vocab::kBinary, d);
  emb("embed.atomic.in_ring", vocab::kBinary, d);
  vec("embed.atomic.mask", d, Init::normal);

  emb("pair.bond.type", vocab::kBondType, dp);
  emb("pair.bond.stereo", vocab::kBondStereo, dp);
  emb("pair.bond.conj", vocab::kBinary, dp);
  vec("pair.bond.mask", dp, Init::normal);
  emb("pair.spd.table", cfg.spd_vocab, dp);
  vec("pair.spd.mask", dp, Init::normal);
  specs.push_back({"pair.gauss.mu", {K}, Init::linspace, 5.0});
  specs.push_back({"pair.gauss.sigma", {K}, Init::ones, 0.0});
  specs.push_back({"pair.gauss.pt_scale", {kPairTypeTable, 1}, Init::ones, 0.0});
  specs.push_back({"pair.gauss.pt_shift", {kPairTypeTable, 1}, Init::zeros, 0.0});
  linear("pair.gauss.proj", K, dp);

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    norm(b + "attn.ln", d);
    linear(b + "attn.q", d, d);
    linear(b + "attn.k", d, d);
    linear(b + "attn.v", d, d);
    linear(b + "attn.pair_bias", dp, h, /*bias=*/false);
    linear(b + "attn.out", d, d);
    norm(b + "ffn.ln", d);
    linear(b + "ffn.fc1", d, df);
    linear(b + "ffn.fc2", df, d);

    norm(b + "outer.ln", d);
    linear(b + "outer.a", d, dt);
    linear(b + "outer.b", d, dt);
    linear(b + "outer.out", dt * dt, dp);

    norm(b + "tri.ln", dp);
    linear(b + "tri.out.gate_u", dp, dt);
    linear(b + "tri.out.val_u", dp, dt);
    linear(b + "tri.out.gate_v", dp, dt);
    linear(b + "tri.out.val_v", dp, dt);
    linear(b + "tri.in.gate_u", dp, dt);
    linear(b + "tri.in.val_u", dp, dt);
    linear(b + "tri.in.gate_v", dp, dt);
    linear(b + "tri.in.val_v", dp, dt);
    norm(b + "tri.ln_out", dt);
    linear(b + "tri.gate_out", dp, dp);
    linear(b + "tri.proj_out", dt, dp);

    norm(b + "pffn.ln", dp);
    linear(b + "pffn.fc1", dp, dp);
    linear(b + "pffn.fc2", dp, dp);
  }

  norm("head.token.ln1", d);
  linear("head.token.fc1", d, d);
  norm("head.token.ln2", d);
  linear("head.token.out", d, kTokenClasses);

  norm("head.pos.ln", d);
  linear("head.pos.q", d, d);
  linear("head.pos.k", d, d);
  linear("head.pos.v", d, d);
  norm("head.pos.ln_p", dp);
  linear("head.pos.pair_bias", dp, h, /*bias=*/false);
  // The displacement network is bias-free so a zero context (single atom,
  // or zero-initialized head) yields exactly zero displacement.
  linear("head.pos.ffn.fc1", d, dt, /*bias=*/false);
  linear("head.pos.ffn.fc2", dt, 1, /*bias=*/false);
  return specs;
}

inline int64_t param_count(const ModelConfig& cfg) {
  int64_t total = 0;
  for (const auto& s : param_specs(cfg)) total += s.numel();
  return total;
}

template <typename T>
struct ModelState {
  ModelConfig cfg;
  std::vector<diff::Parameter<T>> params;
  std::unordered_map<std::string, size_t> index;

  Tensor<T>& at(const std::string& name) {
    const auto it = index.find(name);
    if (it == index.end())
      throw Error(ErrorCode::config_error, "unknown parameter " + name);
    return params[it->second].tensor;
  }

  int64_t param_count() const {
    int64_t total = 0;
    for (const auto& p : params) total += p.tensor.numel();
    return total;
  }

  double params_millions() const { return static_cast<double>(param_count()) / 1e6; }

  void zero_grads() {
    for (auto& p : params) p.tensor.zero_grad();
  }
};

// Every parameter gets its own generator keyed by (seed, name), so values
// are independent of creation order.
template <typename T>
ModelState<T> init_state(const ModelConfig& cfg, uint64_t seed) {
  cfg.check();
  ModelState<T> state;
  state.cfg = cfg;
  for (const auto& spec : param_specs(cfg)) {
    Tensor<T> t = Tensor<T>::zeros(spec.shape);
    std::mt19937_64 gen(rng::derive_seed(seed, spec.name));
    switch (spec.init) {
      case ParamSpec::Init::zeros:
        break;
      case ParamSpec::Init::ones:
        for (T& v : t.values()) v = T(1);
        break;
      case ParamSpec::Init::normal:
        for (T& v : t.values()) v = static_cast<T>(rng::normal(gen) * spec.scale);
        break;
      case ParamSpec::Init::linspace: {
        const int64_t n = t.numel();
        for (int64_t i = 0; i < n; ++i)
          t.values()[i] = static_cast<T>(spec.scale * double(i) / double(std::max<int64_t>(n - 1, 1)));
        break;
      }
    }
    t.set_requires_grad();
    state.index[spec.name] = state.params.size();
    state.params.push_back({spec.name, std::move(t)});
  }
  return state;
}

// Zeroes every per-block weight, leaving embeddings and heads untouched;
// blocks then reduce to pure residual passthrough.
template <typename T>
void zero_blocks(ModelState<T>& state) {
  for (auto& p : state.params)
    if (p.name.rfind("blocks.", 0) == 0)
      for (T& v : p.tensor.values()) v = T(0);
}

template <typename T>
void zero_heads(ModelState<T>& state) {
  for (auto& p : state.params)
    if (p.name.rfind("head.", 0) == 0)
      for (T& v : p.tensor.values()) v = T(0);
}

// ---------------------------------------------------------------------------
// Noising

struct NoisedSample {
  std::vector<int> masked_tokens;         // original tokens with MASK at chosen positions
  std::vector<int> target_tokens;         // -1 except at masked positions
  bool mask_atomic = false;
  bool mask_bond = false;
  bool mask_spd = false;
  std::vector<Vec3> r_noised;             // noised coords, Kabsch-aligned onto raw
  std::vector<Vec3> r_coor;               // raw coords (targets)
  std::vector<double> r_distance;         // n*n raw pair distances
};

inline NoisedSample make_noised_sample(const MolecularGraph& g, std::mt19937_64& gen,
                                       double mask_rate = 0.15, double sigma = 0.2,
                                       double feat_mask_p = 0.5) {
  const int n = g.n;
  NoisedSample s;
  s.masked_tokens = g.atom_token;
  s.target_tokens.assign(n, -1);

  // Partial Fisher-Yates draw of max(1, floor(mask_rate * n)) positions.
  const int k = std::max(1, static_cast<int>(std::floor(mask_rate * n)));
  std::vector<int> pool(n);
  for (int i = 0; i < n; ++i) pool[i] = i;
  for (int i = 0; i < k; ++i) {
    const size_t j = i + rng::uniform_index(gen, static_cast<size_t>(n - i));
    std::swap(pool[i], pool[j]);
    s.target_tokens[pool[i]] = g.atom_token[pool[i]];
    s.masked_tokens[pool[i]] = vocab::kMaskToken;
  }

  s.mask_atomic = rng::uniform(gen) < feat_mask_p;
  s.mask_bond = rng::uniform(gen) < feat_mask_p;
  s.mask_spd = rng::uniform(gen) < feat_mask_p;

  s.r_coor = g.coords;
  s.r_distance = pair_distances(g.coords);
  if (sigma == 0.0) {
    s.r_noised = g.coords;  // exactly, bypassing alignment round-off
  } else {
    std::vector<Vec3> noised(n);
    for (int i = 0; i < n; ++i)
      noised[i] = {g.coords[i].x + sigma * rng::normal(gen),
                   g.coords[i].y + sigma * rng::normal(gen),
                   g.coords[i].z + sigma * rng::normal(gen)};
    s.r_noised = kabsch_align(noised, g.coords).aligned;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Collation: pad a set of molecules to a common length and precompute every
// integer id / constant the forward pass needs.

struct Batch {
  int64_t b = 0, n = 0;

  std::vector<int64_t> tokens;  // masked tokens, kPadToken at padding
  std::vector<int64_t> degree, chirality, formal_charge, num_h, radical_e, hybridization,
      aromatic, in_ring;                                   // b*n, 0 at padding
  std::vector<int64_t> bond_type, bond_stereo, bond_conj;  // b*n*n, 0 at padding
  std::vector<int64_t> spd;                                // b*n*n, 0 at padding
  std::vector<int64_t> pair_type;                          // b*n*n token-pair bucket
  std::vector<int64_t> ce_targets;                         // b*n, -1 at padding/unmasked

  std::vector<double> atomic_mask_flag, bond_mask_flag, spd_mask_flag;  // b
  std::vector<double> valid;                                            // b*n
  std::vector<double> noised_coords, raw_coords;                        // b*n*3
  std::vector<double> noised_dist, raw_dist;                            // b*n*n

  int64_t atoms() const { return b * n; }
  int64_t pairs() const { return b * n * n; }
};

inline Batch collate(const std::vector<const MolecularGraph*>& mols,
                     const std::vector<NoisedSample>& samples) {
  if (mols.empty() || mols.size() != samples.size())
    throw Error(ErrorCode::shape_mismatch,
                "collate: " + std::to_string(mols.size()) + " molecules vs " +
                    std::to_string(samples.size()) + " samples");
  Batch batch;
  batch.b = static_cast<int64_t>(mols.size());
  for (const auto* g : mols) batch.n = std::max<int64_t>(batch.n, g->n);
  const int64_t B = batch.b, N = batch.n;

  batch.tokens.assign(B * N, vocab::kPadToken);
  for (auto* f : {&batch.degree, &batch.chirality, &batch.formal_charge, &batch.num_h,
                  &batch.radical_e, &batch.hybridization, &batch.aromatic, &batch.in_ring})
    f->assign(B * N, 0);
  batch.bond_type.assign(B * N * N, 0);
  batch.bond_stereo.assign(B * N * N, 0);
  batch.bond_conj.assign(B * N * N, 0);
  batch.spd.assign(B * N * N, 0);
  batch.pair_type.assign(B * N * N, 0);
  batch.ce_targets.assign(B * N, -1);
  batch.valid.assign(B * N, 0.0);
  batch.noised_coords.assign(B * N * 3, 0.0);
  batch.raw_coords.assign(B * N * 3, 0.0);
  batch.noised_dist.assign(B * N * N, 0.0);
  batch.raw_dist.assign(B * N * N, 0.0);
  batch.atomic_mask_flag.resize(B);
  batch.bond_mask_flag.resize(B);
  batch.spd_mask_flag.resize(B);

  for (int64_t m = 0; m < B; ++m) {
    const MolecularGraph& g = *mols[m];
    const NoisedSample& s = samples[m];
    if (static_cast<int>(s.masked_tokens.size()) != g.n)
      throw Error(ErrorCode::shape_mismatch, "collate: sample does not match molecule " + g.mol_id);
    const int n = g.n;
    const SpdMatrix spd = compute_spd(g);
    const auto noised_dist = pair_distances(s.r_noised);

    batch.atomic_mask_flag[m] = s.mask_atomic ? 1.0 : 0.0;
    batch.bond_mask_flag[m] = s.mask_bond ? 1.0 : 0.0;
    batch.spd_mask_flag[m] = s.mask_spd ? 1.0 : 0.0;

    for (int i = 0; i < n; ++i) {
      const int64_t a = m * N + i;
      batch.tokens[a] = s.masked_tokens[i];
      batch.degree[a] = g.degree[i];
      batch.chirality[a] = g.chirality[i];
      batch.formal_charge[a] = g.formal_charge[i];
      batch.num_h[a] = g.num_h[i];
      batch.radical_e[a] = g.radical_e[i];
      batch.hybridization[a] = g.hybridization[i];
      batch.aromatic[a] = g.aromatic[i];
      batch.in_ring[a] = g.in_ring[i];
      batch.ce_targets[a] = s.target_tokens[i];
      batch.valid[a] = 1.0;
      for (int c = 0; c < 3; ++c) {
        batch.noised_coords[a * 3 + c] =
            c == 0 ? s.r_noised[i].x : (c == 1 ? s.r_noised[i].y : s.r_noised[i].z);
        batch.raw_coords[a * 3 + c] =
            c == 0 ? s.r_coor[i].x : (c == 1 ? s.r_coor[i].y : s.r_coor[i].z);
      }
      for (int j = 0; j < n; ++j) {
        const int64_t p = (m * N + i) * N + j;
        batch.bond_type[p] = g.bond(i, j);
        batch.bond_stereo[p] = g.stereo(i, j);
        batch.bond_conj[p] = g.conj(i, j);
        batch.spd[p] = spd.at(i, j);
        batch.noised_dist[p] = noised_dist[static_cast<size_t>(i) * n + j];
        batch.raw_dist[p] = s.r_distance[static_cast<size_t>(i) * n + j];
      }
    }
    // Pair-type buckets cover padding too (pad token pairs are valid ids).
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < N; ++j)
        batch.pair_type[(m * N + i) * N + j] =
            batch.tokens[m * N + i] * vocab::kTokenTableSize + batch.tokens[m * N + j];
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct ForwardOut {
  Tensor<T> logits;   // [b, n, kTokenClasses]
  Tensor<T> r_pcoor;  // [b, n, 3]
};

// Optional capture of attention tensors for invariant tests.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> block_attn;  // per block, [b, h, n, n]
  Tensor<T> pos_attn;
};

namespace detail {

template <typename T>
Tensor<T> constant(Shape shape, const std::vector<double>& values) {
  std::vector<T> v(values.size());
  for (size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

// x[..., in] -> x W + b, flattening leading dims around a 2-D matmul.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
  const int64_t in = w.shape()[0], out = w.shape()[1];
  Shape folded{x.numel() / in, in};
  Tensor<T> y = diff::matmul(diff::reshape(x, folded), w);
  if (b) y = diff::add(y, *b);
  Shape back(x.shape().begin(), x.shape().end() - 1);
  back.push_back(out);
  return diff::reshape(y, back);
}

template <typename T>
Tensor<T> layer_norm_affine(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b) {
  return diff::add(diff::mul(diff::layer_norm(x), g), b);
}

template <typename T>
Tensor<T> gelu_ffn(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                   const Tensor<T>& w2, const Tensor<T>& b2) {
  return linear(diff::gelu(linear(x, w1, &b1)), w2, &b2);
}

// [b, n, d] -> [b, h, n, d/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t h) {
  const int64_t b = x.shape()[0], n = x.shape()[1], d = x.shape()[2];
  return diff::permute(diff::reshape(x, {b, n, h, d / h}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const int64_t b = x.shape()[0], h = x.shape()[1], n = x.shape()[2], dh = x.shape()[3];
  return diff::reshape(diff::permute(x, {0, 2, 1, 3}), {b, n, h * dh});
}

// Additive pair bias [b, n, n, h] -> [b, h, n, n] from the pair track.
template <typename T>
Tensor<T> pair_bias(const Tensor<T>& p, const Tensor<T>& w) {
  return diff::permute(linear(p, w), {0, 3, 1, 2});
}

}  // namespace detail

// Initial atom track: token + degree + (atomic feature stack | mask vector).
template <typename T>
Tensor<T> embed_atoms(ModelState<T>& state, const Batch& batch) {
  namespace dt = detail;
  const int64_t B = batch.b, N = batch.n, d = state.cfg.embed_dim;
  auto P = [&](const std::string& name) -> Tensor<T>& { return state.at(name); };

  auto x = diff::add(diff::embedding_lookup(P("embed.token"), batch.tokens, {B, N}),
                     diff::embedding_lookup(P("embed.degree"), batch.degree, {B, N}));
  auto atomic = diff::embedding_lookup(P("embed.atomic.chirality"), batch.chirality, {B, N});
  atomic = diff::add(atomic, diff::embedding_lookup(P("embed.atomic.formal_charge"),
                                                    batch.formal_charge, {B, N}));
  atomic = diff::add(atomic, diff::embedding_lookup(P("embed.atomic.num_h"), batch.num_h, {B, N}));
  atomic = diff::add(atomic,
                     diff::embedding_lookup(P("embed.atomic.radical_e"), batch.radical_e, {B, N}));
  atomic = diff::add(atomic, diff::embedding_lookup(P("embed.atomic.hybridization"),
                                                    batch.hybridization, {B, N}));
  atomic = diff::add(atomic,
                     diff::embedding_lookup(P("embed.atomic.aromatic"), batch.aromatic, {B, N}));
  atomic = diff::add(atomic,
                     diff::embedding_lookup(P("embed.atomic.in_ring"), batch.in_ring, {B, N}));
  const auto flag = dt::constant<T>({B, 1, 1}, batch.atomic_mask_flag);
  const auto keep = diff::add_scalar(diff::neg(flag), T(1));
  const auto masked = diff::mul(flag, diff::reshape(P("embed.atomic.mask"), {1, 1, d}));
  return diff::add(x, diff::add(diff::mul(keep, atomic), masked));
}

// Initial pair track: (bond stack | mask) + (SPD | mask) + Gaussian distance basis.
template <typename T>
Tensor<T> embed_pairs(ModelState<T>& state, const Batch& batch) {
  namespace dt = detail;
  const int64_t B = batch.b, N = batch.n, dp = state.cfg.pair_dim;
  auto P = [&](const std::string& name) -> Tensor<T>& { return state.at(name); };

  auto bond = diff::embedding_lookup(P("pair.bond.type"), batch.bond_type, {B, N, N});
  bond = diff::add(bond,
                   diff::embedding_lookup(P("pair.bond.stereo"), batch.bond_stereo, {B, N, N}));
  bond = diff::add(bond, diff::embedding_lookup(P("pair.bond.conj"), batch.bond_conj, {B, N, N}));
  const auto bflag = dt::constant<T>({B, 1, 1, 1}, batch.bond_mask_flag);
  const auto bkeep = diff::add_scalar(diff::neg(bflag), T(1));
  auto p = diff::add(diff::mul(bkeep, bond),
                     diff::mul(bflag, diff::reshape(P("pair.bond.mask"), {1, 1, 1, dp})));

  const auto spd = diff::embedding_lookup(P("pair.spd.table"), batch.spd, {B, N, N});
  const auto sflag = dt::constant<T>({B, 1, 1, 1}, batch.spd_mask_flag);
  const auto skeep = diff::add_scalar(diff::neg(sflag), T(1));
  p = diff::add(p, diff::add(diff::mul(skeep, spd),
                             diff::mul(sflag, diff::reshape(P("pair.spd.mask"), {1, 1, 1, dp}))));

  // Gaussian basis over pair-type-affine noised distances.
  const auto noised_dist = dt::constant<T>({B, N, N, 1}, batch.noised_dist);
  const auto scale = diff::embedding_lookup(P("pair.gauss.pt_scale"), batch.pair_type, {B, N, N});
  const auto shift = diff::embedding_lookup(P("pair.gauss.pt_shift"), batch.pair_type, {B, N, N});
  const auto affine = diff::add(diff::mul(noised_dist, scale), shift);  // [B,N,N,1]
  const auto z = diff::div(diff::sub(affine, P("pair.gauss.mu")), P("pair.gauss.sigma"));
  const auto density = diff::div(
      diff::exp(diff::mul_scalar(diff::mul(z, z), T(-0.5))),
      diff::mul_scalar(diff::abs(P("pair.gauss.sigma")), T(2.5066282746310002)));  // sqrt(2*pi)
  const auto proj_b = P("pair.gauss.proj.b");
  return diff::add(p, dt::linear(density, P("pair.gauss.proj.w"), &proj_b));
}

template <typename T>
ForwardOut<T> forward(ModelState<T>& state, const Batch& batch,
                      ForwardTrace<T>* trace = nullptr) {
  namespace dt = detail;
  const ModelConfig& cfg = state.cfg;
  const int64_t B = batch.b, N = batch.n, d = cfg.embed_dim,
                h = cfg.heads, hidden = cfg.pair_hidden;
  auto P = [&](const std::string& name) -> Tensor<T>& { return state.at(name); };

  // Constants.
  std::vector<double> key_bias_vals(B * N);
  for (int64_t i = 0; i < B * N; ++i) key_bias_vals[i] = batch.valid[i] > 0 ? 0.0 : -1e9;
  const auto key_bias = dt::constant<T>({B, 1, 1, N}, key_bias_vals);

  std::vector<double> pair_valid_vals(B * N * N);
  for (int64_t m = 0; m < B; ++m)
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < N; ++j)
        pair_valid_vals[(m * N + i) * N + j] = batch.valid[m * N + i] * batch.valid[m * N + j];
  const auto pair_valid = dt::constant<T>({B, N, N, 1}, pair_valid_vals);

  const auto noised = dt::constant<T>({B, N, 3}, batch.noised_coords);

  auto x = embed_atoms(state, batch);
  auto p = embed_pairs(state, batch);

  // --- Two-track blocks
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    auto W = [&](const std::string& s) -> Tensor<T>& { return P(pre + s); };

    // Atom track: pair-biased self-attention, then FFN, pre-norm residuals.
    {
      const auto xin = dt::layer_norm_affine(x, W("attn.ln.g"), W("attn.ln.b"));
      const auto bq = W("attn.q.b"), bk = W("attn.k.b"), bv = W("attn.v.b");
      const auto q = dt::split_heads(dt::linear(xin, W("attn.q.w"), &bq), h);
      const auto k = dt::split_heads(dt::linear(xin, W("attn.k.w"), &bk), h);
      const auto v = dt::split_heads(dt::linear(xin, W("attn.v.w"), &bv), h);
      auto scores = diff::mul_scalar(diff::bmm(q, diff::permute(k, {0, 1, 3, 2})),
                                     static_cast<T>(1.0 / std::sqrt(double(cfg.head_dim()))));
      scores = diff::add(diff::add(scores, dt::pair_bias(p, W("attn.pair_bias.w"))), key_bias);
      const auto attn = diff::softmax(scores);
      if (trace) trace->block_attn.push_back(attn);
      const auto bo = W("attn.out.b");
      x = diff::add(x, dt::linear(dt::merge_heads(diff::bmm(attn, v)), W("attn.out.w"), &bo));
      x = diff::add(x, dt::gelu_ffn(dt::layer_norm_affine(x, W("ffn.ln.g"), W("ffn.ln.b")),
                                    W("ffn.fc1.w"), W("ffn.fc1.b"), W("ffn.fc2.w"),
                                    W("ffn.fc2.b")));
    }

    // Pair track: outer product of the updated atom track.
    {
      const auto xo = dt::layer_norm_affine(x, W("outer.ln.g"), W("outer.ln.b"));
      const auto ba = W("outer.a.b"), bb = W("outer.b.b");
      const auto a = dt::linear(xo, W("outer.a.w"), &ba);
      const auto bmat = dt::linear(xo, W("outer.b.w"), &bb);
      const auto outer = diff::mul(diff::reshape(a, {B, N, 1, hidden, 1}),
                                   diff::reshape(bmat, {B, 1, N, 1, hidden}));
      const auto bo = W("outer.out.b");
      p = diff::add(p, dt::linear(diff::reshape(outer, {B, N, N, hidden * hidden}),
                                  W("outer.out.w"), &bo));
    }

    // Triangular update with multiplicative gating; padded pairs are zeroed
    // before the third-index contraction so they cannot leak in.
    {
      const auto pin = dt::layer_norm_affine(p, W("tri.ln.g"), W("tri.ln.b"));
      auto gated = [&](const char* gate, const char* val) {
        const auto bg = W(std::string(gate) + ".b"), bv2 = W(std::string(val) + ".b");
        return diff::mul(
            diff::mul(diff::sigmoid(dt::linear(pin, W(std::string(gate) + ".w"), &bg)),
                      dt::linear(pin, W(std::string(val) + ".w"), &bv2)),
            pair_valid);
      };
      const auto out = diff::add(diff::tri_contract(gated("tri.out.gate_u", "tri.out.val_u"),
                                                    gated("tri.out.gate_v", "tri.out.val_v"),
                                                    diff::TriMode::outgoing),
                                 diff::tri_contract(gated("tri.in.gate_u", "tri.in.val_u"),
                                                    gated("tri.in.gate_v", "tri.in.val_v"),
                                                    diff::TriMode::incoming));
      const auto bg3 = W("tri.gate_out.b"), bw3 = W("tri.proj_out.b");
      const auto gate = diff::sigmoid(dt::linear(pin, W("tri.gate_out.w"), &bg3));
      const auto proj = dt::linear(
          dt::layer_norm_affine(out, W("tri.ln_out.g"), W("tri.ln_out.b")), W("tri.proj_out.w"),
          &bw3);
      p = diff::add(p, diff::mul(gate, proj));
    }

    p = diff::add(p, dt::gelu_ffn(dt::layer_norm_affine(p, W("pffn.ln.g"), W("pffn.ln.b")),
                                  W("pffn.fc1.w"), W("pffn.fc1.b"), W("pffn.fc2.w"),
                                  W("pffn.fc2.b")));
  }

  ForwardOut<T> out;

  // --- Masked-token head
  {
    auto t = dt::layer_norm_affine(x, P("head.token.ln1.g"), P("head.token.ln1.b"));
    const auto b1 = P("head.token.fc1.b");
    t = diff::gelu(dt::linear(t, P("head.token.fc1.w"), &b1));
    t = dt::layer_norm_affine(t, P("head.token.ln2.g"), P("head.token.ln2.b"));
    const auto b2 = P("head.token.out.b");
    out.logits = dt::linear(t, P("head.token.out.w"), &b2);
  }

  // --- Position head: pair-biased attention over coordinate differences
  {
    const auto xin = dt::layer_norm_affine(x, P("head.pos.ln.g"), P("head.pos.ln.b"));
    const auto bq = P("head.pos.q.b"), bk = P("head.pos.k.b"), bv = P("head.pos.v.b");
    const auto q = dt::split_heads(dt::linear(xin, P("head.pos.q.w"), &bq), h);
    const auto k = dt::split_heads(dt::linear(xin, P("head.pos.k.w"), &bk), h);
    const auto v = dt::split_heads(dt::linear(xin, P("head.pos.v.w"), &bv), h);
    const auto pin = dt::layer_norm_affine(p, P("head.pos.ln_p.g"), P("head.pos.ln_p.b"));
    auto scores = diff::add(diff::bmm(q, diff::permute(k, {0, 1, 3, 2})),
                            dt::pair_bias(pin, P("head.pos.pair_bias.w")));
    scores = diff::add(scores, key_bias);
    const auto attn = diff::softmax(scores);
    if (trace) trace->pos_attn = attn;

    // delta[i][j] = noised[i] - noised[j], shared across heads.
    const auto delta = diff::sub(diff::reshape(noised, {B, N, 1, 3}),
                                 diff::reshape(noised, {B, 1, N, 3}));
    const auto weighted = diff::mul(diff::reshape(attn, {B, h, N, N, 1}),
                                    diff::reshape(delta, {B, 1, N, N, 3}));
    // context[i, axis] = sum_j weighted[i, j, axis] * V[j]
    const auto wmat = diff::reshape(diff::permute(weighted, {0, 1, 2, 4, 3}), {B, h, N * 3, N});
    const auto ctx = diff::reshape(diff::bmm(wmat, v), {B, h, N, 3, cfg.head_dim()});
    const auto merged = diff::reshape(diff::permute(ctx, {0, 2, 3, 1, 4}), {B, N, 3, d});
    const auto hid = diff::gelu(dt::linear(merged, P("head.pos.ffn.fc1.w")));
    const auto disp = diff::reshape(dt::linear(hid, P("head.pos.ffn.fc2.w")), {B, N, 3});
    out.r_pcoor = diff::add(noised, disp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
struct LossBundle {
  Tensor<T> atom, coor, distance, total;
};

template <typename T>
LossBundle<T> compute_losses(const ForwardOut<T>& out, const Batch& batch) {
  const int64_t B = batch.b, N = batch.n;
  LossBundle<T> loss;

  loss.atom = diff::cross_entropy(diff::reshape(out.logits, {B * N, kTokenClasses}),
                                  batch.ce_targets, /*ignore_index=*/-1);

  std::vector<double> coor_w(B * N * 3);
  for (int64_t a = 0; a < B * N; ++a)
    for (int c = 0; c < 3; ++c) coor_w[a * 3 + c] = batch.valid[a];
  loss.coor = diff::l1_loss(out.r_pcoor, detail::constant<T>({B, N, 3}, batch.raw_coords),
                            detail::constant<T>({B, N, 3}, coor_w));

  std::vector<double> dist_w(B * N * N, 0.0);
  for (int64_t m = 0; m < B; ++m)
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < N; ++j)
        if (i != j)
          dist_w[(m * N + i) * N + j] = batch.valid[m * N + i] * batch.valid[m * N + j];
  loss.distance =
      diff::l1_loss(diff::pairwise_distances(out.r_pcoor),
                    detail::constant<T>({B, N, N}, batch.raw_dist),
                    detail::constant<T>({B, N, N}, dist_w));

  loss.total = diff::add(diff::add(loss.atom, loss.coor), loss.distance);
  return loss;
}

}  // namespace tinymol::model
