#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "tinymol/errors.hpp"
#include "tinymol/rng.hpp"

namespace tinymol {

struct ScaffoldEntry {
  std::string scaffold_id;
  long long count = 0;
  std::vector<std::string> member_mol_ids;
};

struct ScaffoldTable {
  std::vector<ScaffoldEntry> entries;

  long long total_count() const {
    long long t = 0;
    for (const auto& e : entries) t += e.count;
    return t;
  }
};

// Per-scaffold sampling probabilities: softmax over normalized frequencies
// divided by the temperature.
struct SamplingPlan {
  std::vector<double> probs;
  double tau = 1.0;
  uint64_t seed = 0;
};

struct BatchPlan {
  std::vector<std::vector<int>> batches;  // molecule indices
  long long token_budget = 0;
  std::vector<int> max_len;  // per batch
};

inline SamplingPlan build_plan(const ScaffoldTable& table, double tau, uint64_t seed = 0) {
  if (table.entries.empty()) throw Error(ErrorCode::empty_table, "scaffold table is empty");
  if (!(tau > 0)) throw Error(ErrorCode::domain_error, "tau must be > 0");

  const double total = static_cast<double>(table.total_count());
  SamplingPlan plan;
  plan.tau = tau;
  plan.seed = seed;
  plan.probs.resize(table.entries.size());

  double max_logit = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < table.entries.size(); ++i) {
    plan.probs[i] = static_cast<double>(table.entries[i].count) / total / tau;
    max_logit = std::max(max_logit, plan.probs[i]);
  }
  double z = 0;
  for (double& p : plan.probs) {
    p = std::exp(p - max_logit);
    z += p;
  }
  for (double& p : plan.probs) p /= z;
  return plan;
}

// k draws with replacement: a scaffold by plan probability, then a member
// molecule uniformly within it. Owns a seeded generator; single-threaded.
class MoleculeSampler {
 public:
  MoleculeSampler(const SamplingPlan& plan, const ScaffoldTable& table)
      : plan_(plan), table_(table), gen_(plan.seed) {
    if (table.entries.empty()) throw Error(ErrorCode::empty_table, "scaffold table is empty");
    cumulative_.resize(plan.probs.size());
    std::partial_sum(plan.probs.begin(), plan.probs.end(), cumulative_.begin());
    cumulative_.back() = 1.0;
  }

  std::string draw() {
    const double u = rng::uniform(gen_);
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    const size_t s = std::min(static_cast<size_t>(it - cumulative_.begin()),
                              cumulative_.size() - 1);
    const auto& members = table_.entries[s].member_mol_ids;
    return members[rng::uniform_index(gen_, members.size())];
  }

  std::vector<std::string> draw_many(size_t k) {
    std::vector<std::string> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) out.push_back(draw());
    return out;
  }

 private:
  SamplingPlan plan_;
  const ScaffoldTable& table_;
  std::mt19937_64 gen_;
  std::vector<double> cumulative_;
};

inline std::vector<std::string> sample_molecules(const SamplingPlan& plan,
                                                 const ScaffoldTable& table, size_t k) {
  return MoleculeSampler(plan, table).draw_many(k);
}

// Greedy dynamic batching: molecules ordered by length (ties shuffled by
// seed), batches closed when (count x padded length) would exceed the
// token budget.
inline BatchPlan plan_batches(const std::vector<int>& lengths, long long token_budget,
                              uint64_t seed) {
  BatchPlan plan;
  plan.token_budget = token_budget;
  if (lengths.empty()) return plan;

  for (size_t i = 0; i < lengths.size(); ++i)
    if (lengths[i] > token_budget)
      throw Error(ErrorCode::molecule_too_large,
                  "molecule " + std::to_string(i) + " has " + std::to_string(lengths[i]) +
                      " atoms, budget " + std::to_string(token_budget));

  std::vector<int> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 gen(seed);
  // Shuffle first so equal-length molecules land in seed-dependent order,
  // then stable-sort into length buckets.
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng::uniform_index(gen, i)]);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return lengths[a] < lengths[b]; });

  std::vector<int> cur;
  int cur_max = 0;
  for (int idx : order) {
    const int len = lengths[idx];
    const int new_max = std::max(cur_max, len);
    if (!cur.empty() &&
        static_cast<long long>(cur.size() + 1) * new_max > token_budget) {
      plan.batches.push_back(std::move(cur));
      plan.max_len.push_back(cur_max);
      cur.clear();
      cur_max = 0;
    }
    cur.push_back(idx);
    cur_max = std::max(cur_max, len);
  }
  if (!cur.empty()) {
    plan.batches.push_back(std::move(cur));
    plan.max_len.push_back(cur_max);
  }
  return plan;
}

// Scaffold table file: `scaffold_id<TAB>count<TAB>comma-joined mol_ids`.
inline ScaffoldTable read_scaffold_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path);
  ScaffoldTable table;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto at = [&](const std::string& what) {
      return path + ":" + std::to_string(line_no) + ": " + what;
    };
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw Error(ErrorCode::parse_error, at("expected scaffold_id<TAB>count<TAB>mol_ids"));
    ScaffoldEntry e;
    e.scaffold_id = line.substr(0, t1);
    try {
      e.count = std::stoll(line.substr(t1 + 1, t2 - t1 - 1));
    } catch (const std::exception&) {
      throw Error(ErrorCode::parse_error, at("count is not an integer"));
    }
    std::stringstream members(line.substr(t2 + 1));
    std::string id;
    while (std::getline(members, id, ','))
      if (!id.empty()) e.member_mol_ids.push_back(id);
    if (e.count < 1 || e.count != static_cast<long long>(e.member_mol_ids.size()))
      throw Error(ErrorCode::parse_error, at("count disagrees with member list length"));
    table.entries.push_back(std::move(e));
  }
  std::unordered_set<std::string> seen;
  for (const auto& e : table.entries)
    if (!seen.insert(e.scaffold_id).second)
      throw Error(ErrorCode::parse_error,
                  "duplicate scaffold_id " + e.scaffold_id + " in " + path);
  return table;
}

inline void write_scaffold_table(const ScaffoldTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
  for (const auto& e : table.entries) {
    out << e.scaffold_id << '\t' << e.count << '\t';
    for (size_t i = 0; i < e.member_mol_ids.size(); ++i) {
      if (i) out << ',';
      out << e.member_mol_ids[i];
    }
    out << '\n';
  }
}

inline void write_plan_json(const SamplingPlan& plan, const ScaffoldTable& table,
                            const std::string& path) {
  nlohmann::ordered_json j;
  j["tau"] = plan.tau;
  j["seed"] = plan.seed;
  auto probs = nlohmann::ordered_json::object();
  for (size_t i = 0; i < table.entries.size(); ++i)
    probs[table.entries[i].scaffold_id] = plan.probs[i];
  j["probs"] = std::move(probs);
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace tinymol
