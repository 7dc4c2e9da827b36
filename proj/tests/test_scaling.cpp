// Scaling-law tests: reference anchor values, planted-coefficient recovery
// (noisy and noiseless), metric hand values with undefined markers, loss-log
// filtering, and serialization round trips.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "tinymol/scaling.hpp"

using namespace tinymol;
namespace fs = std::filesystem;

namespace {

std::vector<scaling::Observation> planted(double noise_sigma, uint64_t seed) {
  const auto ref = scaling::reference_fit();
  std::mt19937_64 gen(seed);
  std::vector<scaling::Observation> obs;
  for (const double m : {42.0, 84.0, 164.0, 310.0})
    for (int64_t s = 200000; s <= 800000; s += 10000) {
      double loss = scaling::evaluate(ref, m, double(s));
      if (noise_sigma > 0) loss += noise_sigma * rng::normal(gen);
      obs.push_back({m, double(s), loss});
    }
  return obs;
}

}  // namespace

TEST_CASE("reference curve reproduces the known anchor losses") {
  const auto ref = scaling::reference_fit();
  CHECK(std::abs(scaling::evaluate(ref, 570.0, 810000.0) - 0.0880) <= 1e-3);
  CHECK(std::abs(scaling::evaluate(ref, 1100.0, 810000.0) - 0.0871) <= 1e-3);
  // Model size enters in millions; raw parameter counts would be far off.
  CHECK(std::abs(scaling::evaluate(ref, 84.0, 810000.0) - 0.104) <= 2e-3);
  CHECK(std::abs(scaling::evaluate(ref, 84.0e6, 810000.0) - 0.104) > 1e-2);
}

TEST_CASE("the loss curve decreases in both size and steps") {
  const auto ref = scaling::reference_fit();
  double prev = scaling::evaluate(ref, 42.0, 100000.0);
  for (const double s : {200000.0, 400000.0, 810000.0}) {
    const double cur = scaling::evaluate(ref, 42.0, s);
    CHECK(cur < prev);
    prev = cur;
  }
  prev = scaling::evaluate(ref, 42.0, 810000.0);
  for (const double m : {84.0, 164.0, 310.0, 570.0}) {
    const double cur = scaling::evaluate(ref, m, 810000.0);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("evaluate rejects non-positive inputs") {
  const auto ref = scaling::reference_fit();
  CHECK_THROWS_MATCHES(scaling::evaluate(ref, 0.0, 1000.0), Error,
                       ErrorCodeIs(ErrorCode::domain_error));
  CHECK_THROWS_MATCHES(scaling::evaluate(ref, 42.0, 0.0), Error,
                       ErrorCodeIs(ErrorCode::domain_error));
  CHECK_THROWS_MATCHES(scaling::evaluate(ref, -3.0, 100.0), Error,
                       ErrorCodeIs(ErrorCode::domain_error));
}

TEST_CASE("noiseless planted coefficients are recovered") {
  const auto obs = planted(0.0, 1);
  const auto fit = scaling::fit_power_law(obs);
  const auto ref = scaling::reference_fit();

  INFO("residual " << fit.residual << ", beta_m " << fit.beta_m << ", beta_s " << fit.beta_s);
  CHECK(fit.converged);
  CHECK(fit.residual < 1e-8);
  const double truth = scaling::evaluate(ref, 1100.0, 810000.0);
  CHECK(std::abs(scaling::evaluate(fit, 1100.0, 810000.0) - truth) <= 1e-3);
  // The dominant terms must be recovered tightly for that extrapolation.
  CHECK(fit.alpha_m == Catch::Approx(ref.alpha_m).epsilon(1e-3));
  CHECK(fit.beta_m == Catch::Approx(ref.beta_m).epsilon(1e-3));
  CHECK(fit.alpha_s == Catch::Approx(ref.alpha_s).epsilon(1e-3));
  CHECK(fit.beta_s == Catch::Approx(ref.beta_s).epsilon(1e-3));
}

TEST_CASE("noisy planted coefficients still predict the large model") {
  const auto obs = planted(1e-3, 7);
  const auto fit = scaling::fit_power_law(obs);
  const auto ref = scaling::reference_fit();
  const double truth = scaling::evaluate(ref, 1100.0, 810000.0);
  INFO("prediction " << scaling::evaluate(fit, 1100.0, 810000.0) << " vs " << truth);
  CHECK(std::abs(scaling::evaluate(fit, 1100.0, 810000.0) - truth) <= 3e-3);
}

TEST_CASE("a single power-law term is recovered from two model sizes") {
  std::vector<scaling::Observation> obs;
  for (const double m : {50.0, 200.0})
    for (int64_t s = 100000; s <= 400000; s += 20000)
      obs.push_back({m, double(s), 1.848 * std::pow(double(s), -0.225)});
  const auto fit = scaling::fit_power_law(obs);
  CHECK(fit.residual < 1e-8);
  const double truth = 1.848 * std::pow(500000.0, -0.225);
  CHECK(scaling::evaluate(fit, 100.0, 500000.0) == Catch::Approx(truth).margin(1e-4));
}

TEST_CASE("fitting is deterministic") {
  const auto obs = planted(5e-4, 21);
  const auto a = scaling::fit_power_law(obs);
  const auto b = scaling::fit_power_law(obs);
  CHECK(a.alpha_m == b.alpha_m);
  CHECK(a.beta_m == b.beta_m);
  CHECK(a.alpha_s == b.alpha_s);
  CHECK(a.beta_s == b.beta_s);
  CHECK(a.alpha_c == b.alpha_c);
  CHECK(a.beta_c == b.beta_c);
  CHECK(a.residual == b.residual);
}

TEST_CASE("too few observations is an explicit error") {
  std::vector<scaling::Observation> obs(11, {42.0, 200000.0, 0.1});
  CHECK_THROWS_MATCHES(scaling::fit_power_law(obs), Error,
                       ErrorCodeIs(ErrorCode::insufficient_data));
  obs.push_back({42.0, 0.0, 0.1});  // 12 rows, but a non-positive step
  CHECK_THROWS_MATCHES(scaling::fit_power_law(obs), Error,
                       ErrorCodeIs(ErrorCode::domain_error));
}

TEST_CASE("fit metrics match the hand-worked example") {
  const auto m = scaling::fit_metrics({1.0, 2.0}, {2.0, 4.0});
  CHECK(m.mae == 1.5);
  CHECK(m.rmae == 1.0);
  CHECK(m.mse == 2.5);
  CHECK(m.rmae_defined);
  CHECK(m.r2_defined);
  CHECK(m.pearson_defined);
}

TEST_CASE("fit metrics flag undefined cases instead of dividing by zero") {
  // Constant actual series: r2 and pearson are undefined.
  const auto con = scaling::fit_metrics({3.0, 3.0, 3.0}, {2.0, 3.0, 4.0});
  CHECK_FALSE(con.r2_defined);
  CHECK_FALSE(con.pearson_defined);
  CHECK(con.rmae_defined);

  // A zero actual value: rmae undefined, everything else fine.
  const auto zero = scaling::fit_metrics({0.0, 2.0}, {1.0, 2.0});
  CHECK_FALSE(zero.rmae_defined);
  CHECK(zero.mae == 0.5);

  // Constant predictions: pearson undefined, r2 still defined.
  const auto flat = scaling::fit_metrics({1.0, 2.0, 3.0}, {2.0, 2.0, 2.0});
  CHECK(flat.r2_defined);
  CHECK_FALSE(flat.pearson_defined);
  CHECK(flat.r2 == Catch::Approx(0.0).margin(1e-12));

  CHECK_THROWS_MATCHES(scaling::fit_metrics({1.0}, {1.0, 2.0}), Error,
                       ErrorCodeIs(ErrorCode::shape_mismatch));
  CHECK_THROWS_MATCHES(scaling::fit_metrics({}, {}), Error,
                       ErrorCodeIs(ErrorCode::insufficient_data));
}

TEST_CASE("perfect predictions score perfectly") {
  const auto m = scaling::fit_metrics({1.0, 2.0, 5.0}, {1.0, 2.0, 5.0});
  CHECK(m.mae == 0.0);
  CHECK(m.rmae == 0.0);
  CHECK(m.mse == 0.0);
  CHECK(m.r2 == 1.0);
  CHECK(m.pearson == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("loss logs are filtered by minimum step and stride") {
  const auto dir = fs::temp_directory_path() / "tinymol_scaling_log";
  fs::create_directories(dir);
  const auto path = (dir / "loss.csv").string();
  {
    std::ofstream out(path);
    out << train::kLossLogHeader << '\n';
    // Below min_step, off-stride, and qualifying rows.
    out << "190000,0.30,0.2,0.05,0.05,1e-4,42.1,12.5\n";
    out << "200000,0.29,0.2,0.05,0.04,1e-4,42.1,12.5\n";
    out << "205000,0.28,0.2,0.04,0.04,1e-4,42.1,12.5\n";
    out << "210000,0.27,0.19,0.04,0.04,1e-4,42.1,12.5\n";
  }
  const auto obs = scaling::observations_from_log(path);
  REQUIRE(obs.size() == 2);
  CHECK(obs[0].steps == 200000.0);
  CHECK(obs[0].loss == 0.29);
  CHECK(obs[0].params_millions == 42.1);
  CHECK(obs[1].steps == 210000.0);

  {
    std::ofstream out(path);
    out << "step,oops\n";
  }
  CHECK_THROWS_MATCHES(scaling::observations_from_log(path), Error,
                       ErrorCodeIs(ErrorCode::parse_error));
  {
    std::ofstream out(path);
    out << train::kLossLogHeader << '\n' << "200000,abc,0,0,0,0,42,1\n";
  }
  CHECK_THROWS_MATCHES(scaling::observations_from_log(path), Error,
                       ErrorCodeIs(ErrorCode::parse_error));
  CHECK_THROWS_MATCHES(scaling::observations_from_log((dir / "nope.csv").string()), Error,
                       ErrorCodeIs(ErrorCode::io_error));
  fs::remove_all(dir);
}

TEST_CASE("fit json and predictions csv round-trip") {
  const auto dir = fs::temp_directory_path() / "tinymol_scaling_io";
  fs::create_directories(dir);
  const auto ref = scaling::reference_fit();
  const auto fit_path = (dir / "fit.json").string();
  scaling::write_fit_json(fit_path, ref);
  const auto back = scaling::read_fit_json(fit_path);
  CHECK(back.alpha_m == ref.alpha_m);
  CHECK(back.beta_c == ref.beta_c);
  CHECK(back.converged == ref.converged);

  std::vector<scaling::Observation> obs = {{42.0, 200000.0, 0.2}, {42.0, 210000.0, 0.19}};
  const auto csv_path = (dir / "pred.csv").string();
  scaling::write_predictions_csv(csv_path, obs, ref);
  std::ifstream in(csv_path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,actual,predicted");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(line.rfind("2", 0) == 0);  // 200000 / 210000
  }
  CHECK(rows == 2);
  fs::remove_all(dir);
}
