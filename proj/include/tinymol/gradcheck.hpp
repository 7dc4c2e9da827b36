#pragma once

// Central finite-difference verification of the tensor core. Every
// registered primitive has a case here; a registry test asserts the
// coverage stays total. Runs in 64-bit mode only.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tinymol/rng.hpp"
#include "tinymol/tensor.hpp"

namespace tinymol::gradcheck {

using diff::Shape;
using diff::Tensor;

// Builds a scalar loss from differentiable inputs. The builder must be a
// pure function of the input values so it can be re-evaluated under
// perturbation.
struct Case {
  std::string op;
  std::vector<Tensor<double>> inputs;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> build;
};

struct CaseResult {
  std::string op;
  double max_rel_err = 0;
  bool pass = false;
};

// Name of a primitive whose analytic gradient is deliberately perturbed
// before comparison. Lets callers demonstrate that the harness flags a
// broken gradient; empty means no corruption.
inline std::string& corrupted_op() {
  static std::string name;
  return name;
}

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
  return std::abs(analytic - numeric) / scale;
}

inline CaseResult run_case(const Case& c, double h = 1e-5, double tol = 1e-4) {
  std::vector<Tensor<double>> inputs;
  inputs.reserve(c.inputs.size());
  for (const auto& in : c.inputs)
    inputs.push_back(Tensor<double>::from_data(in.shape(), in.values()).set_requires_grad());

  Tensor<double> loss = c.build(inputs);
  loss.backward();

  CaseResult res;
  res.op = c.op;
  const double corrupt = c.op == corrupted_op() ? 1.5 : 1.0;
  for (size_t t = 0; t < inputs.size(); ++t) {
    for (size_t i = 0; i < inputs[t].values().size(); ++i) {
      const double analytic = inputs[t].grad()[i] * corrupt;
      std::vector<Tensor<double>> probe;
      probe.reserve(inputs.size());
      for (const auto& in : inputs)
        probe.push_back(Tensor<double>::from_data(in.shape(), in.values()));
      probe[t].values()[i] += h;
      const double up = c.build(probe).item();
      probe[t].values()[i] -= 2 * h;
      const double down = c.build(probe).item();
      const double numeric = (up - down) / (2 * h);
      res.max_rel_err = std::max(res.max_rel_err, relative_error(analytic, numeric));
    }
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

namespace detail {

inline Tensor<double> rand_tensor(Shape shape, std::mt19937_64& gen) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (double& v : t.values()) v = rng::uniform(gen) * 2.0 - 1.0;
  return t;
}

// Random values bounded away from zero (for |x|-style kinks).
inline Tensor<double> rand_tensor_offzero(Shape shape, std::mt19937_64& gen, double margin) {
  Tensor<double> t = rand_tensor(std::move(shape), gen);
  for (double& v : t.values()) v += v >= 0 ? margin : -margin;
  return t;
}

// Reduce any tensor to a scalar with generic (non-uniform) weights so
// backward paths see a full range of upstream gradients.
inline Tensor<double> weighted_sum(const Tensor<double>& t, uint64_t salt) {
  std::mt19937_64 gen(0x5eed0000 + salt);
  Tensor<double> w = rand_tensor(t.shape(), gen);
  return diff::reduce_sum(diff::mul(t, w));
}

}  // namespace detail

inline std::vector<Case> all_cases(uint64_t seed = 7) {
  using detail::rand_tensor;
  using detail::rand_tensor_offzero;
  using detail::weighted_sum;
  namespace d = tinymol::diff;
  std::mt19937_64 gen(seed);
  std::vector<Case> cases;

  cases.push_back({"add",
                   {rand_tensor({2, 3}, gen), rand_tensor({3}, gen)},
                   [](const auto& in) { return weighted_sum(d::add(in[0], in[1]), 1); }});
  cases.push_back({"sub",
                   {rand_tensor({2, 3}, gen), rand_tensor({2, 1}, gen)},
                   [](const auto& in) { return weighted_sum(d::sub(in[0], in[1]), 2); }});
  cases.push_back({"mul",
                   {rand_tensor({2, 3}, gen), rand_tensor({1, 3}, gen)},
                   [](const auto& in) { return weighted_sum(d::mul(in[0], in[1]), 3); }});
  cases.push_back({"div",
                   {rand_tensor({2, 3}, gen), rand_tensor_offzero({3}, gen, 0.5)},
                   [](const auto& in) { return weighted_sum(d::div(in[0], in[1]), 4); }});
  cases.push_back({"neg",
                   {rand_tensor({2, 3}, gen)},
                   [](const auto& in) { return weighted_sum(d::neg(in[0]), 5); }});
  cases.push_back({"exp",
                   {rand_tensor({2, 3}, gen)},
                   [](const auto& in) { return weighted_sum(d::exp(in[0]), 6); }});
  cases.push_back({"abs",
                   {rand_tensor_offzero({2, 3}, gen, 0.25)},
                   [](const auto& in) { return weighted_sum(d::abs(in[0]), 7); }});
  cases.push_back({"gelu",
                   {rand_tensor({2, 3}, gen)},
                   [](const auto& in) { return weighted_sum(d::gelu(in[0]), 8); }});
  cases.push_back({"sigmoid",
                   {rand_tensor({2, 3}, gen)},
                   [](const auto& in) { return weighted_sum(d::sigmoid(in[0]), 9); }});
  cases.push_back({"add_scalar",
                   {rand_tensor({2, 3}, gen)},
                   [](const auto& in) { return weighted_sum(d::add_scalar(in[0], 0.7), 10); }});
  cases.push_back({"mul_scalar",
                   {rand_tensor({2, 3}, gen)},
                   [](const auto& in) { return weighted_sum(d::mul_scalar(in[0], -1.3), 11); }});
  cases.push_back({"matmul",
                   {rand_tensor({3, 4}, gen), rand_tensor({4, 2}, gen)},
                   [](const auto& in) { return weighted_sum(d::matmul(in[0], in[1]), 12); }});
  cases.push_back({"bmm",
                   {rand_tensor({2, 3, 4}, gen), rand_tensor({2, 4, 2}, gen)},
                   [](const auto& in) { return weighted_sum(d::bmm(in[0], in[1]), 13); }});
  cases.push_back({"permute",
                   {rand_tensor({2, 3, 4}, gen)},
                   [](const auto& in) { return weighted_sum(d::permute(in[0], {2, 0, 1}), 14); }});
  cases.push_back({"reshape",
                   {rand_tensor({2, 6}, gen)},
                   [](const auto& in) { return weighted_sum(d::reshape(in[0], {3, 4}), 15); }});
  cases.push_back({"concat",
                   {rand_tensor({2, 3}, gen), rand_tensor({2, 2}, gen)},
                   [](const auto& in) {
                     return weighted_sum(d::concat<double>({in[0], in[1]}, 1), 16);
                   }});
  cases.push_back({"softmax",
                   {rand_tensor({2, 5}, gen)},
                   [](const auto& in) { return weighted_sum(d::softmax(in[0]), 17); }});
  cases.push_back({"layer_norm",
                   {rand_tensor({2, 6}, gen)},
                   [](const auto& in) { return weighted_sum(d::layer_norm(in[0]), 18); }});
  cases.push_back({"embedding_lookup",
                   {rand_tensor({7, 4}, gen)},
                   [](const auto& in) {
                     return weighted_sum(d::embedding_lookup(in[0], {1, 3, 3, 0, 6}, {5}), 19);
                   }});
  cases.push_back({"cross_entropy",
                   {rand_tensor({5, 7}, gen)},
                   [](const auto& in) {
                     return d::cross_entropy(in[0], {1, -1, 3, 0, 6}, -1);
                   }});
  {
    // Keep pred off the |pred-target| kink by construction.
    Tensor<double> pred = rand_tensor({3, 3}, gen);
    Tensor<double> target = Tensor<double>::zeros({3, 3});
    for (size_t i = 0; i < target.values().size(); ++i)
      target.values()[i] = pred.values()[i] + (i % 2 ? 0.4 : -0.4);
    Tensor<double> weight = Tensor<double>::zeros({3, 3});
    for (size_t i = 0; i < weight.values().size(); ++i) weight.values()[i] = i % 3 ? 1.0 : 0.0;
    cases.push_back({"l1_loss",
                     {pred},
                     [target, weight](const auto& in) {
                       return d::l1_loss(in[0], target, weight);
                     }});
  }
  cases.push_back({"reduce_sum",
                   {rand_tensor({2, 3, 4}, gen)},
                   [](const auto& in) { return weighted_sum(d::reduce_sum(in[0], 1), 20); }});
  cases.push_back({"reduce_mean",
                   {rand_tensor({2, 3, 4}, gen)},
                   [](const auto& in) { return weighted_sum(d::reduce_mean(in[0], 2), 21); }});
  cases.push_back({"tri_contract",
                   {rand_tensor({1, 4, 4, 3}, gen), rand_tensor({1, 4, 4, 3}, gen)},
                   [](const auto& in) {
                     auto out = d::tri_contract(in[0], in[1], d::TriMode::outgoing);
                     auto inc = d::tri_contract(in[0], in[1], d::TriMode::incoming);
                     return d::add(weighted_sum(out, 22), weighted_sum(inc, 23));
                   }});
  {
    // Spread the points so every pairwise distance stays well positive.
    Tensor<double> coords = rand_tensor({1, 4, 3}, gen);
    for (int64_t i = 0; i < 4; ++i) coords.values()[i * 3] += static_cast<double>(i) * 2.0;
    cases.push_back({"pairwise_distances",
                     {coords},
                     [](const auto& in) {
                       return weighted_sum(d::pairwise_distances(in[0]), 24);
                     }});
  }
  return cases;
}

inline std::vector<CaseResult> run_all(uint64_t seed = 7, double h = 1e-5, double tol = 1e-4) {
  std::vector<CaseResult> out;
  for (const auto& c : all_cases(seed)) out.push_back(run_case(c, h, tol));
  return out;
}

}  // namespace tinymol::gradcheck
