#pragma once

// Training loop: AdamW with decoupled weight decay, linear-warmup +
// polynomial-decay schedule, global-norm gradient clipping, CSV loss
// logging and rotating checkpoints. Resume replays the deterministic
// sampling schedule up to the restored step, so a stopped-and-resumed run
// matches an uninterrupted one.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "tinymol/checkpoint.hpp"
#include "tinymol/errors.hpp"
#include "tinymol/model.hpp"
#include "tinymol/rng.hpp"
#include "tinymol/sampler.hpp"

namespace tinymol::train {

struct TrainConfig {
  uint64_t seed = 1;
  int64_t total_steps = 1000;
  int64_t warmup_steps = 100;
  double peak_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  double tau = 1.0;            // scaffold sampling temperature
  long long batch_budget = 1024;  // max molecules x padded length per batch
  int64_t epoch_molecules = 0;    // draws per epoch; 0 = dataset size
  double mask_rate = 0.15;
  double noise_sigma = 0.2;
  double feat_mask_p = 0.5;
  int64_t checkpoint_every = 1000;
  int64_t checkpoint_keep = 10;
  std::string out_dir;  // empty = no checkpoints

  void check() const {
    if (total_steps < 1 || warmup_steps < 0 || warmup_steps > total_steps)
      throw Error(ErrorCode::config_error, "need 0 <= warmup_steps <= total_steps, total >= 1");
    if (checkpoint_every < 1 || checkpoint_keep < 1)
      throw Error(ErrorCode::config_error, "checkpoint_every and checkpoint_keep must be >= 1");
    if (!(peak_lr > 0) || !(clip_norm > 0) || !(tau > 0))
      throw Error(ErrorCode::config_error, "peak_lr, clip_norm and tau must be > 0");
  }
};

// Linear warmup to the peak, then linear decay to zero at total_steps.
inline double lr_at(int64_t step, int64_t warmup, int64_t total, double peak) {
  if (step <= 0) return 0.0;
  if (warmup > 0 && step <= warmup) return peak * double(step) / double(warmup);
  if (step >= total) return 0.0;
  return peak * double(total - step) / double(total - warmup);
}

// Global L2 norm across every parameter gradient; throws NAN_GRADIENT
// naming the first parameter with a non-finite entry.
template <typename T>
double grad_global_norm(const model::ModelState<T>& state) {
  double sq = 0;
  for (const auto& p : state.params) {
    if (p.tensor.grad().empty()) continue;
    for (const T g : p.tensor.grad()) {
      if (!std::isfinite(double(g)))
        throw Error(ErrorCode::nan_gradient, "non-finite gradient in " + p.name);
      sq += double(g) * double(g);
    }
  }
  return std::sqrt(sq);
}

// Scales gradients so their global norm is at most max_norm; returns the
// pre-clip norm.
template <typename T>
double clip_gradients(model::ModelState<T>& state, double max_norm) {
  const double norm = grad_global_norm(state);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& p : state.params)
      for (T& g : p.tensor.grad()) g *= scale;
  }
  return norm;
}

template <typename T>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8, weight_decay = 1e-4;
  int64_t t = 0;                    // completed updates (bias correction)
  std::vector<std::vector<T>> m, v;  // parallel to state.params

  void init(const model::ModelState<T>& state) {
    m.assign(state.params.size(), {});
    v.assign(state.params.size(), {});
    for (size_t i = 0; i < state.params.size(); ++i) {
      m[i].assign(state.params[i].tensor.values().size(), T(0));
      v[i].assign(state.params[i].tensor.values().size(), T(0));
    }
  }

  // Decoupled decay first (theta -= lr * lambda * theta), then the
  // bias-corrected Adam update.
  void step(model::ModelState<T>& state, double lr) {
    if (m.size() != state.params.size()) init(state);
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < state.params.size(); ++i) {
      auto& p = state.params[i];
      if (p.tensor.grad().empty()) continue;
      auto& vals = p.tensor.values();
      const auto& grad = p.tensor.grad();
      for (size_t k = 0; k < vals.size(); ++k) {
        const double g = double(grad[k]);
        if (!std::isfinite(g))
          throw Error(ErrorCode::nan_gradient, "non-finite gradient in " + p.name);
        vals[k] -= static_cast<T>(lr * weight_decay * double(vals[k]));
        m[i][k] = static_cast<T>(beta1 * double(m[i][k]) + (1.0 - beta1) * g);
        v[i][k] = static_cast<T>(beta2 * double(v[i][k]) + (1.0 - beta2) * g * g);
        const double mhat = double(m[i][k]) / bc1;
        const double vhat = double(v[i][k]) / bc2;
        vals[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Checkpoint naming, rotation, and optimizer round-trips

inline std::string checkpoint_name(int64_t step) {
  return "step_" + std::to_string(step) + ".ckpt";
}

inline std::vector<std::pair<int64_t, std::filesystem::path>> list_checkpoints(
    const std::string& dir) {
  std::vector<std::pair<int64_t, std::filesystem::path>> found;
  if (!std::filesystem::is_directory(dir)) return found;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("step_", 0) != 0 || entry.path().extension() != ".ckpt") continue;
    const std::string digits = name.substr(5, name.size() - 5 - 5);  // between step_ and .ckpt
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) continue;
    found.emplace_back(std::stoll(digits), entry.path());
  }
  std::sort(found.begin(), found.end());
  return found;
}

// Keeps the `keep` most recent step_<N>.ckpt files, deleting the rest.
inline void rotate_checkpoints(const std::string& dir, int64_t keep) {
  auto found = list_checkpoints(dir);
  const int64_t excess = static_cast<int64_t>(found.size()) - keep;
  for (int64_t i = 0; i < excess; ++i) {
    std::error_code ec;
    std::filesystem::remove(found[i].second, ec);
    if (ec)
      throw Error(ErrorCode::checkpoint_io,
                  "cannot remove " + found[i].second.string() + ": " + ec.message());
  }
}

template <typename T>
void save_training_checkpoint(const std::string& path, const model::ModelState<T>& state,
                              const AdamW<T>& opt, int64_t step) {
  ckpt::CheckpointData data = ckpt::snapshot(state, step);
  for (size_t i = 0; i < state.params.size(); ++i) {
    const auto& p = state.params[i];
    for (const char* prefix : {"opt.m.", "opt.v."}) {
      const auto& src = prefix[4] == 'm' ? opt.m : opt.v;
      ckpt::TensorEntry t;
      t.name = std::string(prefix) + p.name;
      t.shape = p.tensor.shape();
      t.data.resize(p.tensor.values().size());
      if (i < src.size())
        for (size_t k = 0; k < t.data.size(); ++k) t.data[k] = static_cast<float>(src[i][k]);
      data.tensors.push_back(std::move(t));
    }
  }
  ckpt::write_checkpoint(path, data);
}

// Restores parameters and optimizer moments; returns the stored step.
template <typename T>
int64_t load_training_checkpoint(const std::string& path, model::ModelState<T>& state,
                                 AdamW<T>* opt) {
  const ckpt::CheckpointData data = ckpt::read_checkpoint(path);
  ckpt::restore(state, data);
  if (opt) {
    opt->init(state);
    opt->t = data.step;
    for (size_t i = 0; i < state.params.size(); ++i) {
      for (const char* prefix : {"opt.m.", "opt.v."}) {
        const ckpt::TensorEntry* t = data.find(std::string(prefix) + state.params[i].name);
        if (!t)
          throw Error(ErrorCode::checkpoint_io,
                      path + " has no optimizer state for " + state.params[i].name);
        auto& dst = prefix[4] == 'm' ? opt->m[i] : opt->v[i];
        if (t->data.size() != dst.size())
          throw Error(ErrorCode::checkpoint_io,
                      path + " optimizer tensor " + t->name + " has wrong size");
        for (size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(t->data[k]);
      }
    }
  }
  return data.step;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepLog {
  int64_t step = 0;
  double loss_total = 0, loss_atom = 0, loss_coor = 0, loss_distance = 0;
  double lr = 0;
  double params_millions = 0;
  double wall_ms = 0;
};

inline constexpr const char* kLossLogHeader =
    "step,loss_total,loss_atom,loss_coor,loss_distance,lr,params_millions,wall_ms";

inline void write_log_row(std::ostream& out, const StepLog& log) {
  out << log.step << ',' << log.loss_total << ',' << log.loss_atom << ',' << log.loss_coor << ','
      << log.loss_distance << ',' << log.lr << ',' << log.params_millions << ',' << log.wall_ms
      << '\n';
}

struct TrainResult {
  int64_t final_step = 0;
  std::vector<StepLog> logs;  // steps actually executed in this call
};

// Runs optimizer updates from start_step (exclusive) to total_steps, or to
// stop_step when nonzero (simulating an interrupted run). The epoch schedule
// is a pure function of (seed, epoch), so resuming replays sampling
// decisions and skips already-completed steps without recomputing forward
// passes.
template <typename T>
TrainResult train(model::ModelState<T>& state, AdamW<T>& opt, const TrainConfig& tc,
                  const std::vector<MolecularGraph>& mols, const ScaffoldTable& table,
                  int64_t start_step = 0, std::ostream* loss_csv = nullptr,
                  int64_t stop_step = 0) {
  tc.check();
  if (mols.empty()) throw Error(ErrorCode::empty_table, "training set is empty");
  opt.beta1 = tc.beta1;
  opt.beta2 = tc.beta2;
  opt.eps = tc.eps;
  opt.weight_decay = tc.weight_decay;
  if (opt.m.size() != state.params.size()) opt.init(state);

  std::unordered_map<std::string, const MolecularGraph*> by_id;
  for (const auto& g : mols) by_id[g.mol_id] = &g;

  if (!tc.out_dir.empty()) std::filesystem::create_directories(tc.out_dir);
  if (loss_csv && start_step == 0) *loss_csv << kLossLogHeader << '\n';

  const size_t per_epoch =
      tc.epoch_molecules > 0 ? static_cast<size_t>(tc.epoch_molecules) : mols.size();

  TrainResult result;
  result.final_step = start_step;
  int64_t sched = 0;  // schedule position: optimizer updates since step 0
  for (int64_t epoch = 0; sched < tc.total_steps; ++epoch) {
    const auto plan =
        build_plan(table, tc.tau, rng::derive_seed(tc.seed, "sample", epoch));
    const auto drawn = sample_molecules(plan, table, per_epoch);

    std::vector<const MolecularGraph*> epoch_mols;
    std::vector<int> lengths;
    for (const auto& id : drawn) {
      const auto it = by_id.find(id);
      if (it == by_id.end())
        throw Error(ErrorCode::config_error, "scaffold table references unknown molecule " + id);
      epoch_mols.push_back(it->second);
      lengths.push_back(it->second->n);
    }
    const auto batches = plan_batches(lengths, tc.batch_budget,
                                               rng::derive_seed(tc.seed, "batch", epoch));

    for (const auto& batch_idx : batches.batches) {
      if (sched >= tc.total_steps) break;
      ++sched;
      if (sched <= start_step) continue;  // replaying the schedule after resume

      const auto t0 = std::chrono::steady_clock::now();
      std::vector<const MolecularGraph*> ptrs;
      std::vector<model::NoisedSample> samples;
      for (const int idx : batch_idx) {
        const MolecularGraph& g = *epoch_mols[idx];
        std::mt19937_64 gen(rng::derive_seed(tc.seed, g.mol_id, static_cast<uint64_t>(epoch)));
        samples.push_back(
            model::make_noised_sample(g, gen, tc.mask_rate, tc.noise_sigma, tc.feat_mask_p));
        ptrs.push_back(&g);
      }
      const auto batch = model::collate(ptrs, samples);

      state.zero_grads();
      const auto out = model::forward(state, batch);
      const auto loss = model::compute_losses(out, batch);
      loss.total.backward();
      clip_gradients(state, tc.clip_norm);
      const double lr = lr_at(sched, tc.warmup_steps, tc.total_steps, tc.peak_lr);
      opt.step(state, lr);

      StepLog log;
      log.step = sched;
      log.loss_total = double(loss.total.item());
      log.loss_atom = double(loss.atom.item());
      log.loss_coor = double(loss.coor.item());
      log.loss_distance = double(loss.distance.item());
      log.lr = lr;
      log.params_millions = state.params_millions();
      log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                              t0)
                        .count();
      if (loss_csv) write_log_row(*loss_csv, log);
      result.logs.push_back(log);
      result.final_step = sched;

      if (!tc.out_dir.empty() &&
          (sched % tc.checkpoint_every == 0 || sched == tc.total_steps)) {
        const auto path = std::filesystem::path(tc.out_dir) / checkpoint_name(sched);
        save_training_checkpoint(path.string(), state, opt, sched);
        rotate_checkpoints(tc.out_dir, tc.checkpoint_keep);
      }
      if (stop_step > 0 && sched >= stop_step) return result;
    }
  }
  return result;
}

}  // namespace tinymol::train
