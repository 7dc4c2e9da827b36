// Trainer tests: schedule hand values, a scalar AdamW oracle, clipping hand
// cases, checkpoint round-trips and retention, resume determinism, and a
// smoke training run that must actually learn.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "tinymol/synthetic.hpp"
#include "tinymol/trainer.hpp"

using namespace tinymol;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("tinymol_trainer_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// A minimal state with explicitly named scalar parameters.
model::ModelState<double> scalar_state(const std::vector<std::pair<std::string, double>>& vals) {
  model::ModelState<double> st;
  st.cfg = model::preset("tiny");
  for (const auto& [name, value] : vals) {
    auto t = diff::Tensor<double>::from_data({1}, {value});
    t.set_requires_grad();
    st.index[name] = st.params.size();
    st.params.push_back({name, t});
  }
  return st;
}

struct SmokeSetup {
  std::vector<MolecularGraph> mols;
  ScaffoldTable table;
  train::TrainConfig tc;
};

SmokeSetup smoke_setup() {
  SmokeSetup s;
  s.mols = synth::random_dataset(2024, 64, 4, 16);
  s.table = synth::scaffold_table_of(s.mols);
  s.tc.seed = 7;
  s.tc.total_steps = 200;
  s.tc.warmup_steps = 20;
  s.tc.peak_lr = 1e-2;
  s.tc.batch_budget = 160;
  s.tc.checkpoint_every = 1000;  // no checkpoints
  return s;
}

}  // namespace

TEST_CASE("learning rate schedule matches hand values") {
  CHECK(train::lr_at(100000, 100000, 1000000, 1e-4) == Catch::Approx(1e-4).margin(1e-18));
  CHECK(train::lr_at(550000, 100000, 1000000, 1e-4) == Catch::Approx(5e-5).margin(1e-18));
  CHECK(train::lr_at(0, 100000, 1000000, 1e-4) == 0.0);
  CHECK(train::lr_at(1000000, 100000, 1000000, 1e-4) == 0.0);
  CHECK(train::lr_at(2000000, 100000, 1000000, 1e-4) == 0.0);

  // Ramp is linear and continuous at the warmup boundary.
  CHECK(train::lr_at(50000, 100000, 1000000, 1e-4) == Catch::Approx(5e-5).margin(1e-18));
  const double at_w = train::lr_at(1000, 1000, 10000, 1e-4);
  const double after_w = train::lr_at(1001, 1000, 10000, 1e-4);
  CHECK(at_w == Catch::Approx(1e-4).margin(1e-18));
  CHECK(std::abs(at_w - after_w) < 2e-8);
  for (int64_t s = 1; s < 9999; ++s)
    CHECK(train::lr_at(s, 1000, 10000, 1e-4) >= train::lr_at(s + 1, 1000, 10000, 1e-4) -
                                                    (s < 1000 ? 2e-7 : 0.0));
}

TEST_CASE("adamw matches a scalar oracle to 1e-12") {
  auto st = scalar_state({{"w", 0.5}});
  train::AdamW<double> opt;
  opt.beta1 = 0.9;
  opt.beta2 = 0.99;
  opt.eps = 1e-8;
  opt.weight_decay = 0.1;
  const double lr = 0.01;
  const std::vector<double> grads = {0.3, -0.2, 0.1, 0.05, -0.4};

  double theta = 0.5, m = 0, v = 0;
  for (size_t t = 1; t <= grads.size(); ++t) {
    st.at("w").grad()[0] = grads[t - 1];
    opt.step(st, lr);

    const double g = grads[t - 1];
    theta -= lr * 0.1 * theta;
    m = 0.9 * m + 0.1 * g;
    v = 0.99 * v + 0.01 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, double(t)));
    const double vhat = v / (1.0 - std::pow(0.99, double(t)));
    theta -= lr * mhat / (std::sqrt(vhat) + 1e-8);

    CHECK(st.at("w").values()[0] == Catch::Approx(theta).margin(1e-12));
  }
}

TEST_CASE("zero gradients leave only the decoupled decay") {
  auto st = scalar_state({{"w", 2.0}});
  train::AdamW<double> opt;
  opt.weight_decay = 0.05;
  const double lr = 0.1;
  for (int k = 1; k <= 10; ++k) {
    st.at("w").grad()[0] = 0.0;
    opt.step(st, lr);
    CHECK(st.at("w").values()[0] == Catch::Approx(2.0 * std::pow(1.0 - lr * 0.05, k)).margin(1e-12));
  }
}

TEST_CASE("adamw rejects non-finite gradients naming the parameter") {
  auto st = scalar_state({{"alpha", 1.0}, {"beta", 1.0}});
  train::AdamW<double> opt;
  st.at("alpha").grad()[0] = 0.5;
  st.at("beta").grad()[0] = std::nan("");
  try {
    opt.step(st, 0.01);
    FAIL("expected NAN_GRADIENT");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::nan_gradient);
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
}

TEST_CASE("gradient clipping hand case: components 3 and 4 give norm 5") {
  auto st = scalar_state({{"a", 0.0}, {"b", 0.0}});
  st.at("a").grad() = {3.0};
  st.at("b").grad() = {4.0};
  const double norm = train::clip_gradients(st, 1.0);
  CHECK(norm == Catch::Approx(5.0).margin(1e-15));
  CHECK(st.at("a").grad()[0] == Catch::Approx(0.6).margin(1e-15));
  CHECK(st.at("b").grad()[0] == Catch::Approx(0.8).margin(1e-15));

  // Below the threshold nothing changes.
  st.at("a").grad() = {0.3};
  st.at("b").grad() = {0.4};
  CHECK(train::clip_gradients(st, 1.0) == Catch::Approx(0.5).margin(1e-15));
  CHECK(st.at("a").grad()[0] == 0.3);
  CHECK(st.at("b").grad()[0] == 0.4);

  st.at("a").grad() = {std::numeric_limits<double>::infinity()};
  CHECK_THROWS_MATCHES(train::clip_gradients(st, 1.0), Error,
                       ErrorCodeIs(ErrorCode::nan_gradient));
}

TEST_CASE("checkpoints round-trip to a bit-identical forward pass") {
  const auto dir = fresh_dir("roundtrip");
  auto state = model::init_state<float>(model::preset("tiny"), 11);
  auto mols = synth::random_dataset(311, 2, 5, 8);
  std::mt19937_64 gen(5);
  std::vector<model::NoisedSample> samples;
  std::vector<const MolecularGraph*> ptrs;
  for (const auto& g : mols) {
    samples.push_back(model::make_noised_sample(g, gen));
    ptrs.push_back(&g);
  }
  const auto batch = model::collate(ptrs, samples);
  const auto before = model::forward(state, batch);

  const std::string path = (dir / "model.ckpt").string();
  ckpt::write_checkpoint(path, ckpt::snapshot(state, 42));

  auto restored = model::init_state<float>(model::preset("tiny"), 999);  // different seed
  const auto data = ckpt::read_checkpoint(path);
  CHECK(data.step == 42);
  CHECK(data.config.embed_dim == 16);
  ckpt::restore(restored, data);
  const auto after = model::forward(restored, batch);
  CHECK(before.logits.values() == after.logits.values());
  CHECK(before.r_pcoor.values() == after.r_pcoor.values());
  fs::remove_all(dir);
}

TEST_CASE("checkpoint reads fail loudly on bad files") {
  const auto dir = fresh_dir("badfiles");
  CHECK_THROWS_MATCHES(ckpt::read_checkpoint((dir / "missing.ckpt").string()), Error,
                       ErrorCodeIs(ErrorCode::checkpoint_io));

  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "definitely not a checkpoint";
  }
  CHECK_THROWS_MATCHES(ckpt::read_checkpoint((dir / "junk.ckpt").string()), Error,
                       ErrorCodeIs(ErrorCode::checkpoint_io));

  // Valid checkpoint truncated in the payload.
  auto state = model::init_state<float>(model::preset("tiny"), 1);
  const std::string full = (dir / "full.ckpt").string();
  ckpt::write_checkpoint(full, ckpt::snapshot(state, 1));
  const auto size = fs::file_size(full);
  fs::resize_file(full, size - 64);
  CHECK_THROWS_MATCHES(ckpt::read_checkpoint(full), Error,
                       ErrorCodeIs(ErrorCode::checkpoint_io));

  // Architecture mismatch on restore.
  auto cfg = model::preset("tiny");
  cfg.pair_dim = 12;
  auto other = model::init_state<float>(cfg, 1);
  ckpt::write_checkpoint(full, ckpt::snapshot(state, 1));
  CHECK_THROWS_MATCHES(ckpt::restore(other, ckpt::read_checkpoint(full)), Error,
                       ErrorCodeIs(ErrorCode::checkpoint_io));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint writes are atomic renames") {
  const auto dir = fresh_dir("atomic");
  auto state = model::init_state<float>(model::preset("tiny"), 3);
  const std::string path = (dir / "step_1.ckpt").string();
  ckpt::write_checkpoint(path, ckpt::snapshot(state, 1));
  CHECK(fs::exists(path));
  CHECK_FALSE(fs::exists(path + ".tmp"));
  fs::remove_all(dir);
}

TEST_CASE("retention keeps exactly the newest checkpoints") {
  const auto dir = fresh_dir("retention");
  auto mols = synth::random_dataset(17, 24, 4, 10);
  auto table = synth::scaffold_table_of(mols);
  auto state = model::init_state<float>(model::preset("tiny"), 5);
  train::AdamW<float> opt;

  train::TrainConfig tc;
  tc.seed = 3;
  tc.total_steps = 100;
  tc.warmup_steps = 10;
  tc.peak_lr = 1e-3;
  tc.batch_budget = 96;
  tc.checkpoint_every = 10;
  tc.checkpoint_keep = 3;
  tc.out_dir = dir.string();

  std::ostringstream csv;
  const auto result = train::train(state, opt, tc, mols, table, 0, &csv);
  CHECK(result.final_step == 100);
  REQUIRE(result.logs.size() == 100);

  const auto found = train::list_checkpoints(dir.string());
  REQUIRE(found.size() == 3);
  CHECK(found[0].first == 80);
  CHECK(found[1].first == 90);
  CHECK(found[2].first == 100);

  // Loss log: header plus one row per step, steps strictly increasing.
  std::istringstream in(csv.str());
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == train::kLossLogHeader);
  int64_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
  }
  CHECK(rows == 100);
  fs::remove_all(dir);
}

TEST_CASE("stray files do not confuse checkpoint listing") {
  const auto dir = fresh_dir("stray");
  for (const char* name : {"step_.ckpt", "step_x7.ckpt", "other.ckpt", "step_5.txt", "notes.md"})
    std::ofstream(dir / name) << "x";
  auto state = model::init_state<float>(model::preset("tiny"), 5);
  ckpt::write_checkpoint((dir / "step_7.ckpt").string(), ckpt::snapshot(state, 7));
  const auto found = train::list_checkpoints(dir.string());
  REQUIRE(found.size() == 1);
  CHECK(found[0].first == 7);
  fs::remove_all(dir);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  const auto dir = fresh_dir("resume");
  auto mols = synth::random_dataset(19, 20, 4, 10);
  auto table = synth::scaffold_table_of(mols);

  train::TrainConfig tc;
  tc.seed = 13;
  tc.total_steps = 24;
  tc.warmup_steps = 4;
  tc.peak_lr = 2e-3;
  tc.batch_budget = 80;
  tc.checkpoint_every = 8;
  tc.checkpoint_keep = 10;
  tc.out_dir = dir.string();

  // Uninterrupted reference run.
  auto ref_state = model::init_state<float>(model::preset("tiny"), 21);
  train::AdamW<float> ref_opt;
  const auto ref = train::train(ref_state, ref_opt, tc, mols, table);
  REQUIRE(ref.final_step == 24);

  // Same run stopped after step 8, then resumed from the checkpoint.
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto state = model::init_state<float>(model::preset("tiny"), 21);
  train::AdamW<float> opt;
  train::train(state, opt, tc, mols, table, 0, nullptr, /*stop_step=*/8);
  REQUIRE(fs::exists(dir / "step_8.ckpt"));

  auto resumed = model::init_state<float>(model::preset("tiny"), 404);  // different seed
  train::AdamW<float> ropt;
  const int64_t at = train::load_training_checkpoint((dir / "step_8.ckpt").string(), resumed, &ropt);
  REQUIRE(at == 8);
  const auto cont = train::train(resumed, ropt, tc, mols, table, at);
  CHECK(cont.final_step == 24);
  CHECK(cont.logs.front().step == 9);

  double worst = 0;
  for (size_t i = 0; i < ref_state.params.size(); ++i) {
    const auto& a = ref_state.params[i].tensor.values();
    const auto& b = resumed.params[i].tensor.values();
    REQUIRE(a.size() == b.size());
    for (size_t k = 0; k < a.size(); ++k) worst = std::max(worst, double(std::abs(a[k] - b[k])));
  }
  INFO("max parameter deviation after resume: " << worst);
  CHECK(worst <= 1e-6);
  fs::remove_all(dir);
}

TEST_CASE("batches planned during training never exceed the budget") {
  auto mols = synth::random_dataset(23, 40, 4, 14);
  std::vector<int> lengths;
  for (const auto& g : mols) lengths.push_back(g.n);
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    const auto plan = plan_batches(lengths, 60, seed);
    for (size_t b = 0; b < plan.batches.size(); ++b) {
      CHECK(static_cast<long long>(plan.batches[b].size()) * plan.max_len[b] <= 60);
      for (int idx : plan.batches[b]) CHECK(lengths[idx] <= plan.max_len[b]);
    }
  }
}

TEST_CASE("smoke training: loss drops by thirty percent and the token loss falls") {
  auto setup = smoke_setup();
  auto state = model::init_state<float>(model::preset("tiny"), 1);
  train::AdamW<float> opt;
  const auto result = train::train(state, opt, setup.tc, setup.mols, setup.table);
  REQUIRE(result.logs.size() == 200);

  auto mean = [&](auto select, size_t from, size_t to) {
    double acc = 0;
    for (size_t i = from; i < to; ++i) acc += select(result.logs[i]);
    return acc / double(to - from);
  };
  const double early = mean([](const train::StepLog& l) { return l.loss_total; }, 0, 10);
  const double late = mean([](const train::StepLog& l) { return l.loss_total; }, 190, 200);
  const double early_atom = mean([](const train::StepLog& l) { return l.loss_atom; }, 0, 10);
  const double late_atom = mean([](const train::StepLog& l) { return l.loss_atom; }, 190, 200);
  INFO("total " << early << " -> " << late << ", atom " << early_atom << " -> " << late_atom);
  CHECK(late <= 0.7 * early);
  CHECK(late_atom < early_atom);
}
