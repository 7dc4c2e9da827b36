#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinymol/molgraph.hpp"

namespace tinymol {

// Dataset files are UTF-8 with one JSON object per line. Bonds are stored
// once per pair as [i, j, bond_type, stereo, conj] with i < j; symmetry is
// reconstructed on read.

namespace detail {

inline nlohmann::ordered_json to_record(const MolecularGraph& g) {
  nlohmann::ordered_json j;
  j["mol_id"] = g.mol_id;
  j["scaffold_id"] = g.scaffold_id;
  j["atom_token"] = g.atom_token;
  j["chirality"] = g.chirality;
  j["degree"] = g.degree;
  j["formal_charge"] = g.formal_charge;
  j["num_h"] = g.num_h;
  j["radical_e"] = g.radical_e;
  j["hybridization"] = g.hybridization;
  j["aromatic"] = g.aromatic;
  j["in_ring"] = g.in_ring;
  auto bonds = nlohmann::ordered_json::array();
  for (int i = 0; i < g.n; ++i)
    for (int k = i + 1; k < g.n; ++k)
      if (g.bond(i, k) != 0)
        bonds.push_back({i, k, g.bond(i, k), g.stereo(i, k), g.conj(i, k)});
  j["bonds"] = std::move(bonds);
  auto coords = nlohmann::ordered_json::array();
  for (const auto& c : g.coords) coords.push_back({c.x, c.y, c.z});
  j["coords"] = std::move(coords);
  return j;
}

inline MolecularGraph from_record(const nlohmann::json& j) {
  MolecularGraph g;
  g.mol_id = j.at("mol_id").get<std::string>();
  g.scaffold_id = j.at("scaffold_id").get<std::string>();
  g.atom_token = j.at("atom_token").get<std::vector<int>>();
  g.n = static_cast<int>(g.atom_token.size());
  g.chirality = j.at("chirality").get<std::vector<int>>();
  g.degree = j.at("degree").get<std::vector<int>>();
  g.formal_charge = j.at("formal_charge").get<std::vector<int>>();
  g.num_h = j.at("num_h").get<std::vector<int>>();
  g.radical_e = j.at("radical_e").get<std::vector<int>>();
  g.hybridization = j.at("hybridization").get<std::vector<int>>();
  g.aromatic = j.at("aromatic").get<std::vector<int>>();
  g.in_ring = j.at("in_ring").get<std::vector<int>>();

  const size_t nn = static_cast<size_t>(g.n) * g.n;
  g.bond_type.assign(nn, 0);
  g.bond_stereo.assign(nn, 0);
  g.bond_conj.assign(nn, 0);
  for (const auto& b : j.at("bonds")) {
    if (!b.is_array() || b.size() != 5)
      throw Error(ErrorCode::parse_error, "bond entry must be [i,j,type,stereo,conj]");
    const int i = b[0].get<int>(), k = b[1].get<int>();
    if (i < 0 || k < 0 || i >= g.n || k >= g.n || i >= k)
      throw Error(ErrorCode::parse_error, "bond indices must satisfy 0 <= i < j < n");
    const size_t ik = static_cast<size_t>(i) * g.n + k;
    const size_t ki = static_cast<size_t>(k) * g.n + i;
    g.bond_type[ik] = g.bond_type[ki] = b[2].get<int>();
    g.bond_stereo[ik] = g.bond_stereo[ki] = b[3].get<int>();
    g.bond_conj[ik] = g.bond_conj[ki] = b[4].get<int>();
  }

  const auto& coords = j.at("coords");
  if (static_cast<int>(coords.size()) != g.n)
    throw Error(ErrorCode::parse_error, "coords length != atom count");
  g.coords.resize(g.n);
  for (int i = 0; i < g.n; ++i)
    g.coords[i] = {coords[i][0].get<double>(), coords[i][1].get<double>(),
                   coords[i][2].get<double>()};
  validate(g);
  return g;
}

}  // namespace detail

// Single-consumer streaming reader; create one instance per thread.
class DatasetReader {
 public:
  explicit DatasetReader(const std::string& path) : path_(path), in_(path) {
    if (!in_) throw Error(ErrorCode::io_error, "cannot open " + path);
  }

  // Returns the next molecule, or nullopt at end of file.
  std::optional<MolecularGraph> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (line.empty()) continue;
      try {
        return detail::from_record(nlohmann::json::parse(line));
      } catch (const Error& e) {
        throw Error(e.code(), at_line() + ": " + e.what());
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::parse_error, at_line() + ": " + e.what());
      }
    }
    if (in_.bad()) throw Error(ErrorCode::io_error, "read failure in " + path_);
    return std::nullopt;
  }

 private:
  std::string at_line() const { return path_ + ":" + std::to_string(line_no_); }

  std::string path_;
  std::ifstream in_;
  long line_no_ = 0;
};

inline std::vector<MolecularGraph> read_dataset(const std::string& path) {
  DatasetReader reader(path);
  std::vector<MolecularGraph> out;
  while (auto g = reader.next()) out.push_back(std::move(*g));
  return out;
}

inline void write_dataset(const std::vector<MolecularGraph>& mols, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
  for (const auto& g : mols) {
    validate(g);
    out << detail::to_record(g).dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::io_error, "write failure in " + path);
}

}  // namespace tinymol
