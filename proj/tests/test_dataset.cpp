#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <catch2/catch_amalgamated.hpp>

#include "tinymol/dataset.hpp"
#include "tinymol/synthetic.hpp"

#include "test_util.hpp"

using namespace tinymol;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tinymol_test_" + name);
}

bool same_graph(const MolecularGraph& a, const MolecularGraph& b) {
  if (a.mol_id != b.mol_id || a.scaffold_id != b.scaffold_id || a.n != b.n) return false;
  if (a.atom_token != b.atom_token || a.chirality != b.chirality || a.degree != b.degree ||
      a.formal_charge != b.formal_charge || a.num_h != b.num_h || a.radical_e != b.radical_e ||
      a.hybridization != b.hybridization || a.aromatic != b.aromatic || a.in_ring != b.in_ring)
    return false;
  if (a.bond_type != b.bond_type || a.bond_stereo != b.bond_stereo || a.bond_conj != b.bond_conj)
    return false;
  for (int i = 0; i < a.n; ++i)
    if (a.coords[i].x != b.coords[i].x || a.coords[i].y != b.coords[i].y ||
        a.coords[i].z != b.coords[i].z)
      return false;
  return true;
}

}  // namespace

TEST_CASE("dataset round trip is bit-identical") {
  const auto mols = synth::random_dataset(101, 100);
  const auto path = temp_file("roundtrip.jsonl");
  write_dataset(mols, path.string());
  const auto back = read_dataset(path.string());
  REQUIRE(back.size() == mols.size());
  for (size_t i = 0; i < mols.size(); ++i) CHECK(same_graph(mols[i], back[i]));
  std::filesystem::remove(path);
}

TEST_CASE("empty file yields an empty stream") {
  const auto path = temp_file("empty.jsonl");
  std::ofstream(path.string()).close();
  DatasetReader reader(path.string());
  CHECK_FALSE(reader.next().has_value());
  CHECK(read_dataset(path.string()).empty());
  std::filesystem::remove(path);
}

TEST_CASE("malformed records report the line number") {
  const auto mols = synth::random_dataset(102, 2);
  const auto path = temp_file("badline.jsonl");
  {
    std::ofstream out(path.string());
    out << detail::to_record(mols[0]).dump() << '\n';
    out << "{ this is not json }\n";
  }
  DatasetReader reader(path.string());
  CHECK(reader.next().has_value());
  try {
    reader.next();
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::parse_error);
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("vocabulary violations surface as RANGE_ERROR") {
  auto mols = synth::random_dataset(103, 1);
  const auto path = temp_file("range.jsonl");
  {
    auto record = detail::to_record(mols[0]);
    record["atom_token"][0] = 200;
    std::ofstream out(path.string());
    out << record.dump() << '\n';
  }
  CHECK_THROWS_MATCHES(read_dataset(path.string()), Error, ErrorCodeIs(ErrorCode::range_error));
  std::filesystem::remove(path);
}

TEST_CASE("missing file raises IO_ERROR") {
  CHECK_THROWS_MATCHES(read_dataset("/nonexistent/nowhere.jsonl"), Error,
                       ErrorCodeIs(ErrorCode::io_error));
}

TEST_CASE("bond symmetry is reconstructed from the i<j encoding") {
  const auto mols = synth::random_dataset(104, 10);
  const auto path = temp_file("sym.jsonl");
  write_dataset(mols, path.string());
  for (const auto& g : read_dataset(path.string()))
    for (int i = 0; i < g.n; ++i)
      for (int j = 0; j < g.n; ++j) {
        CHECK(g.bond(i, j) == g.bond(j, i));
        CHECK(g.stereo(i, j) == g.stereo(j, i));
        CHECK(g.conj(i, j) == g.conj(j, i));
      }
  std::filesystem::remove(path);
}
