#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tinymol/errors.hpp"

namespace tinymol {

// Feature vocabulary sizes. Atom tokens are atomic numbers, so the token
// vocabulary spans [0,119); two extra codes are reserved for the mask
// placeholder and batch padding.
namespace vocab {
inline constexpr int kAtomToken = 119;
inline constexpr int kMaskToken = 119;
inline constexpr int kPadToken = 120;
inline constexpr int kTokenTableSize = 121;

inline constexpr int kChirality = 6;
inline constexpr int kDegree = 11;
inline constexpr int kFormalCharge = 11;
inline constexpr int kNumH = 9;
inline constexpr int kRadicalE = 5;
inline constexpr int kHybridization = 5;
inline constexpr int kBinary = 2;

inline constexpr int kBondType = 5;  // 0 = no bond, 1..4 = SINGLE,DOUBLE,TRIPLE,AROMATIC
inline constexpr int kBondStereo = 6;
}  // namespace vocab

inline constexpr int kSpdCap = 20;
inline constexpr int kSpdUnreachable = kSpdCap + 1;
inline constexpr int kSpdVocab = kSpdCap + 2;  // 0..cap plus the unreachable bucket

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

// One molecule: per-atom feature codes, dense symmetric bond matrices and a
// 3D conformation in angstroms. Scaffold IDs are opaque inputs.
struct MolecularGraph {
  std::string mol_id;
  std::string scaffold_id;
  int n = 0;

  std::vector<int> atom_token;
  std::vector<int> chirality;
  std::vector<int> degree;
  std::vector<int> formal_charge;
  std::vector<int> num_h;
  std::vector<int> radical_e;
  std::vector<int> hybridization;
  std::vector<int> aromatic;
  std::vector<int> in_ring;

  std::vector<int> bond_type;    // n*n, row-major
  std::vector<int> bond_stereo;  // n*n
  std::vector<int> bond_conj;    // n*n

  std::vector<Vec3> coords;

  int bond(int i, int j) const { return bond_type[static_cast<size_t>(i) * n + j]; }
  int stereo(int i, int j) const { return bond_stereo[static_cast<size_t>(i) * n + j]; }
  int conj(int i, int j) const { return bond_conj[static_cast<size_t>(i) * n + j]; }
};

struct SpdMatrix {
  int n = 0;
  std::vector<int> spd;  // n*n hop counts, clamped to kSpdCap, kSpdUnreachable if disconnected

  int at(int i, int j) const { return spd[static_cast<size_t>(i) * n + j]; }
};

namespace detail {

inline void check_code(int value, int size, const char* field, int atom) {
  if (value < 0 || value >= size)
    throw Error(ErrorCode::range_error, std::string(field) + "=" + std::to_string(value) +
                                            " out of [0," + std::to_string(size) +
                                            ") at atom " + std::to_string(atom));
}

}  // namespace detail

// Validates vocabulary ranges, bond-matrix symmetry and the degree feature
// against the bond matrix. Throws RANGE_ERROR / PARSE_ERROR.
inline void validate(const MolecularGraph& g) {
  if (g.n < 1) throw Error(ErrorCode::parse_error, "molecule must have at least one atom");
  const size_t n = static_cast<size_t>(g.n);
  auto expect_len = [&](size_t got, const char* field) {
    if (got != n)
      throw Error(ErrorCode::parse_error,
                  std::string(field) + " length " + std::to_string(got) + " != n " +
                      std::to_string(n) + " in " + g.mol_id);
  };
  expect_len(g.atom_token.size(), "atom_token");
  expect_len(g.chirality.size(), "chirality");
  expect_len(g.degree.size(), "degree");
  expect_len(g.formal_charge.size(), "formal_charge");
  expect_len(g.num_h.size(), "num_h");
  expect_len(g.radical_e.size(), "radical_e");
  expect_len(g.hybridization.size(), "hybridization");
  expect_len(g.aromatic.size(), "aromatic");
  expect_len(g.in_ring.size(), "in_ring");
  expect_len(g.coords.size(), "coords");
  if (g.bond_type.size() != n * n || g.bond_stereo.size() != n * n || g.bond_conj.size() != n * n)
    throw Error(ErrorCode::parse_error, "bond matrices must be n*n in " + g.mol_id);

  for (int i = 0; i < g.n; ++i) {
    detail::check_code(g.atom_token[i], vocab::kAtomToken, "atom_token", i);
    detail::check_code(g.chirality[i], vocab::kChirality, "chirality", i);
    detail::check_code(g.degree[i], vocab::kDegree, "degree", i);
    detail::check_code(g.formal_charge[i], vocab::kFormalCharge, "formal_charge", i);
    detail::check_code(g.num_h[i], vocab::kNumH, "num_h", i);
    detail::check_code(g.radical_e[i], vocab::kRadicalE, "radical_e", i);
    detail::check_code(g.hybridization[i], vocab::kHybridization, "hybridization", i);
    detail::check_code(g.aromatic[i], vocab::kBinary, "aromatic", i);
    detail::check_code(g.in_ring[i], vocab::kBinary, "in_ring", i);
    if (!std::isfinite(g.coords[i].x) || !std::isfinite(g.coords[i].y) ||
        !std::isfinite(g.coords[i].z))
      throw Error(ErrorCode::parse_error, "non-finite coordinate at atom " + std::to_string(i));
  }

  for (int i = 0; i < g.n; ++i) {
    if (g.bond(i, i) != 0)
      throw Error(ErrorCode::parse_error, "self-bond at atom " + std::to_string(i));
    int deg = 0;
    for (int j = 0; j < g.n; ++j) {
      detail::check_code(g.bond(i, j), vocab::kBondType, "bond_type", i);
      detail::check_code(g.stereo(i, j), vocab::kBondStereo, "bond_stereo", i);
      detail::check_code(g.conj(i, j), vocab::kBinary, "bond_conj", i);
      if (g.bond(i, j) != g.bond(j, i) || g.stereo(i, j) != g.stereo(j, i) ||
          g.conj(i, j) != g.conj(j, i))
        throw Error(ErrorCode::parse_error, "asymmetric bond features at pair (" +
                                                std::to_string(i) + "," + std::to_string(j) + ")");
      if (g.bond(i, j) != 0) ++deg;
    }
    // The degree feature is validated against the bond matrix, not trusted.
    int expected = std::min(deg, vocab::kDegree - 1);
    if (g.degree[i] != expected)
      throw Error(ErrorCode::parse_error,
                  "degree[" + std::to_string(i) + "]=" + std::to_string(g.degree[i]) +
                      " disagrees with bond matrix (expected " + std::to_string(expected) +
                      ") in " + g.mol_id);
  }
}

// All-pairs shortest hop counts over bonds as unit-weight undirected edges,
// by Floyd-Warshall. Values are clamped to kSpdCap; disconnected pairs get
// kSpdUnreachable.
inline SpdMatrix compute_spd(const MolecularGraph& g) {
  const int n = g.n;
  const int inf = 1 << 28;
  std::vector<int> d(static_cast<size_t>(n) * n, inf);
  for (int i = 0; i < n; ++i) {
    d[static_cast<size_t>(i) * n + i] = 0;
    for (int j = 0; j < n; ++j)
      if (g.bond(i, j) != 0) d[static_cast<size_t>(i) * n + j] = 1;
  }
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i) {
      const int dik = d[static_cast<size_t>(i) * n + k];
      if (dik == inf) continue;
      for (int j = 0; j < n; ++j) {
        const int via = dik + d[static_cast<size_t>(k) * n + j];
        if (via < d[static_cast<size_t>(i) * n + j]) d[static_cast<size_t>(i) * n + j] = via;
      }
    }
  SpdMatrix out;
  out.n = n;
  out.spd.resize(static_cast<size_t>(n) * n);
  for (size_t i = 0; i < out.spd.size(); ++i)
    out.spd[i] = d[i] >= inf ? kSpdUnreachable : std::min(d[i], kSpdCap);
  return out;
}

// Euclidean distances between every pair of coordinates.
inline std::vector<double> pair_distances(const std::vector<Vec3>& coords) {
  const int n = static_cast<int>(coords.size());
  std::vector<double> dist(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double dx = coords[i].x - coords[j].x;
      const double dy = coords[i].y - coords[j].y;
      const double dz = coords[i].z - coords[j].z;
      const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
      dist[static_cast<size_t>(i) * n + j] = d;
      dist[static_cast<size_t>(j) * n + i] = d;
    }
  return dist;
}

}  // namespace tinymol
