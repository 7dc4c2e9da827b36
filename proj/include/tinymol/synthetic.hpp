#pragma once

// Random valid molecules for tests and smoke training: a bonded spanning
// tree plus a few ring-closing edges, tokens from a small organic alphabet,
// coordinates laid out by a random walk along the tree.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "tinymol/molgraph.hpp"
#include "tinymol/rng.hpp"
#include "tinymol/sampler.hpp"

namespace tinymol::synth {

inline MolecularGraph random_molecule(std::mt19937_64& gen, int n_min = 4, int n_max = 16) {
  static const int alphabet[] = {1, 6, 6, 6, 7, 8, 9, 16};  // H and common organics, C-heavy
  MolecularGraph g;
  g.n = n_min + static_cast<int>(rng::uniform_index(gen, static_cast<size_t>(n_max - n_min + 1)));
  const int n = g.n;

  g.atom_token.resize(n);
  g.chirality.resize(n);
  g.formal_charge.resize(n);
  g.num_h.resize(n);
  g.radical_e.resize(n);
  g.hybridization.resize(n);
  g.aromatic.resize(n);
  g.in_ring.resize(n);
  for (int i = 0; i < n; ++i) {
    g.atom_token[i] = alphabet[rng::uniform_index(gen, std::size(alphabet))];
    g.chirality[i] = static_cast<int>(rng::uniform_index(gen, vocab::kChirality));
    g.formal_charge[i] = static_cast<int>(rng::uniform_index(gen, vocab::kFormalCharge));
    g.num_h[i] = static_cast<int>(rng::uniform_index(gen, vocab::kNumH));
    g.radical_e[i] = static_cast<int>(rng::uniform_index(gen, vocab::kRadicalE));
    g.hybridization[i] = static_cast<int>(rng::uniform_index(gen, vocab::kHybridization));
    g.aromatic[i] = static_cast<int>(rng::uniform_index(gen, 2));
    g.in_ring[i] = static_cast<int>(rng::uniform_index(gen, 2));
  }

  g.bond_type.assign(static_cast<size_t>(n) * n, 0);
  g.bond_stereo.assign(static_cast<size_t>(n) * n, 0);
  g.bond_conj.assign(static_cast<size_t>(n) * n, 0);
  auto set_bond = [&](int i, int j) {
    const int type = 1 + static_cast<int>(rng::uniform_index(gen, 4));
    const int stereo = static_cast<int>(rng::uniform_index(gen, vocab::kBondStereo));
    const int conj = static_cast<int>(rng::uniform_index(gen, 2));
    const size_t ij = static_cast<size_t>(i) * n + j, ji = static_cast<size_t>(j) * n + i;
    g.bond_type[ij] = g.bond_type[ji] = type;
    g.bond_stereo[ij] = g.bond_stereo[ji] = stereo;
    g.bond_conj[ij] = g.bond_conj[ji] = conj;
  };

  std::vector<int> parent(n, -1);
  for (int i = 1; i < n; ++i) {
    parent[i] = static_cast<int>(rng::uniform_index(gen, static_cast<size_t>(i)));
    set_bond(i, parent[i]);
  }
  for (int extra = n / 4; extra > 0; --extra) {
    const int i = static_cast<int>(rng::uniform_index(gen, static_cast<size_t>(n)));
    const int j = static_cast<int>(rng::uniform_index(gen, static_cast<size_t>(n)));
    if (i != j && g.bond(i, j) == 0) set_bond(std::min(i, j), std::max(i, j));
  }

  g.degree.resize(n);
  for (int i = 0; i < n; ++i) {
    int deg = 0;
    for (int j = 0; j < n; ++j)
      if (g.bond(i, j) != 0) ++deg;
    g.degree[i] = std::min(deg, vocab::kDegree - 1);
  }

  g.coords.resize(n);
  g.coords[0] = {0, 0, 0};
  for (int i = 1; i < n; ++i) {
    const auto& base = g.coords[parent[i]];
    g.coords[i] = {base.x + 1.5 * (rng::uniform(gen) * 2 - 1) + 0.2 * rng::normal(gen),
                   base.y + 1.5 * (rng::uniform(gen) * 2 - 1) + 0.2 * rng::normal(gen),
                   base.z + 1.5 * (rng::uniform(gen) * 2 - 1) + 0.2 * rng::normal(gen)};
  }
  return g;
}

// `count` molecules spread over `scaffolds` scaffold groups, with a
// matching scaffold table.
inline std::vector<MolecularGraph> random_dataset(uint64_t seed, int count, int n_min = 4,
                                                  int n_max = 16, int scaffolds = 4) {
  std::mt19937_64 gen(seed);
  std::vector<MolecularGraph> mols;
  mols.reserve(count);
  for (int i = 0; i < count; ++i) {
    MolecularGraph g = random_molecule(gen, n_min, n_max);
    g.mol_id = "mol_" + std::to_string(i);
    g.scaffold_id = "scaf_" + std::to_string(rng::uniform_index(gen, scaffolds));
    mols.push_back(std::move(g));
  }
  return mols;
}

inline ScaffoldTable scaffold_table_of(const std::vector<MolecularGraph>& mols) {
  ScaffoldTable table;
  for (const auto& g : mols) {
    auto it = std::find_if(table.entries.begin(), table.entries.end(),
                           [&](const ScaffoldEntry& e) { return e.scaffold_id == g.scaffold_id; });
    if (it == table.entries.end()) {
      table.entries.push_back({g.scaffold_id, 0, {}});
      it = table.entries.end() - 1;
    }
    it->member_mol_ids.push_back(g.mol_id);
    ++it->count;
  }
  return table;
}

}  // namespace tinymol::synth
