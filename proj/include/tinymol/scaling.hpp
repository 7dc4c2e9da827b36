#pragma once

// Scaling-law tooling: a three-term power law in model size (millions of
// parameters) and training steps, fitted to loss-log observations by
// multi-start Levenberg-Marquardt in (log alpha, beta) space, plus the
// goodness-of-fit metrics used to compare curves.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tinymol/errors.hpp"
#include "tinymol/trainer.hpp"

namespace tinymol::scaling {

struct Observation {
  double params_millions = 0;
  double steps = 0;
  double loss = 0;
};

// loss(M, S) = alpha_m M^beta_m + alpha_s S^beta_s + alpha_c (M S)^beta_c
// with M in millions of parameters and S in raw optimizer steps.
struct PowerLawFit {
  double alpha_m = 0, beta_m = 0;
  double alpha_s = 0, beta_s = 0;
  double alpha_c = 0, beta_c = 0;
  double residual = 0;  // root-mean-square residual over the fitted set
  bool converged = false;
};

// Reference coefficients for the pretraining loss surface.
inline PowerLawFit reference_fit() {
  PowerLawFit f;
  f.alpha_m = 2.660;
  f.beta_m = -1.137;
  f.alpha_s = 1.848;
  f.beta_s = -0.225;
  f.alpha_c = 0.588;
  f.beta_c = -1.479;
  f.converged = true;
  return f;
}

inline double evaluate(const PowerLawFit& f, double params_millions, double steps) {
  if (!(params_millions > 0) || !(steps > 0))
    throw Error(ErrorCode::domain_error,
                "power law needs positive size and steps, got M=" +
                    std::to_string(params_millions) + " S=" + std::to_string(steps));
  return f.alpha_m * std::pow(params_millions, f.beta_m) +
         f.alpha_s * std::pow(steps, f.beta_s) +
         f.alpha_c * std::pow(params_millions * steps, f.beta_c);
}

struct FitOptions {
  int64_t min_step = 200000;     // loss-log rows below this are discarded
  int64_t stride = 10000;        // keep rows whose step is a multiple of this
  size_t min_observations = 12;
  int max_iterations = 200;
};

namespace detail {

using Vector6 = Eigen::Matrix<double, 6, 1>;  // (log a_m, b_m, log a_s, b_s, log a_c, b_c)

inline double model_at(const Vector6& th, const Observation& o) {
  return std::exp(th[0]) * std::pow(o.params_millions, th[1]) +
         std::exp(th[2]) * std::pow(o.steps, th[3]) +
         std::exp(th[4]) * std::pow(o.params_millions * o.steps, th[5]);
}

inline double sse_at(const Vector6& th, const std::vector<Observation>& obs) {
  double sse = 0;
  for (const auto& o : obs) {
    const double r = model_at(th, o) - o.loss;
    sse += r * r;
  }
  return sse;
}

inline void residuals_jacobian(const Vector6& th, const std::vector<Observation>& obs,
                               Eigen::VectorXd& r, Eigen::MatrixXd& J) {
  const auto n = static_cast<Eigen::Index>(obs.size());
  r.resize(n);
  J.resize(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = obs[i];
    const double tm = std::exp(th[0]) * std::pow(o.params_millions, th[1]);
    const double ts = std::exp(th[2]) * std::pow(o.steps, th[3]);
    const double tc = std::exp(th[4]) * std::pow(o.params_millions * o.steps, th[5]);
    r[i] = tm + ts + tc - o.loss;
    J(i, 0) = tm;
    J(i, 1) = tm * std::log(o.params_millions);
    J(i, 2) = ts;
    J(i, 3) = ts * std::log(o.steps);
    J(i, 4) = tc;
    J(i, 5) = tc * std::log(o.params_millions * o.steps);
  }
}

// Non-negative least squares in spirit: plain least squares for the alphas
// at fixed betas, clamped away from zero so the log parameterization works.
inline Eigen::Vector3d alpha_init(const std::vector<Observation>& obs, double bm, double bs,
                                  double bc) {
  const auto n = static_cast<Eigen::Index>(obs.size());
  Eigen::MatrixXd A(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    A(i, 0) = std::pow(obs[i].params_millions, bm);
    A(i, 1) = std::pow(obs[i].steps, bs);
    A(i, 2) = std::pow(obs[i].params_millions * obs[i].steps, bc);
    y[i] = obs[i].loss;
  }
  Eigen::Vector3d alpha = (A.transpose() * A + 1e-12 * Eigen::Matrix3d::Identity())
                              .ldlt()
                              .solve(A.transpose() * y);
  for (int k = 0; k < 3; ++k)
    if (!(alpha[k] > 1e-8)) alpha[k] = 1e-8;
  return alpha;
}

struct LmResult {
  Vector6 theta;
  double sse = std::numeric_limits<double>::infinity();
  bool converged = false;
};

// The family is decreasing power laws: exponents live in [-5, 0). Without
// the upper bound a term can degenerate into a huge positive exponent with
// a microscopic coefficient, fitting noise on the data range and exploding
// under extrapolation.
inline void clamp_theta(Vector6& th) {
  for (const int k : {0, 2, 4}) th[k] = std::clamp(th[k], -60.0, 10.0);   // log alpha
  for (const int k : {1, 3, 5}) th[k] = std::clamp(th[k], -5.0, -1e-6);  // beta
}

inline LmResult levenberg_marquardt(Vector6 th, const std::vector<Observation>& obs,
                                    int max_iterations) {
  LmResult res;
  double sse = sse_at(th, obs);
  if (!std::isfinite(sse)) return res;

  Eigen::VectorXd r;
  Eigen::MatrixXd J;
  double lambda = 1e-3;
  int small_gains = 0;  // consecutive accepted steps with negligible progress
  for (int iter = 0; iter < max_iterations; ++iter) {
    residuals_jacobian(th, obs, r, J);
    const Eigen::Matrix<double, 6, 6> JtJ = J.transpose() * J;
    const Vector6 g = J.transpose() * r;
    if (g.template lpNorm<Eigen::Infinity>() <= 1e-10 * (1.0 + sse)) {
      res.converged = true;
      break;
    }

    bool accepted = false;
    while (lambda <= 1e12) {
      Eigen::Matrix<double, 6, 6> H = JtJ;
      H.diagonal() += lambda * JtJ.diagonal();
      H.diagonal().array() += 1e-12;
      const Vector6 step = H.ldlt().solve(-g);
      Vector6 trial = th + step;
      clamp_theta(trial);
      const double trial_sse = sse_at(trial, obs);
      if (std::isfinite(trial_sse) && trial_sse < sse) {
        th = trial;
        accepted = true;
        small_gains = sse - trial_sse <= 1e-15 * (1.0 + trial_sse) ? small_gains + 1 : 0;
        sse = trial_sse;
        lambda = std::max(lambda / 3.0, 1e-12);
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted || small_gains >= 5) {
      // Either no damping produces descent, or progress has flatlined for
      // several accepted steps: call it converged if the gradient is small.
      res.converged =
          (J.transpose() * r).template lpNorm<Eigen::Infinity>() <= 1e-6 * (1.0 + sse) ||
          small_gains >= 5;
      break;
    }
  }
  res.theta = th;
  res.sse = sse;
  return res;
}

}  // namespace detail

// Multi-start fit over a fixed exponent grid; the best (lowest final SSE)
// start wins, with earlier grid indices winning ties for determinism.
inline PowerLawFit fit_power_law(const std::vector<Observation>& obs,
                                 const FitOptions& opt = {}) {
  if (obs.size() < opt.min_observations)
    throw Error(ErrorCode::insufficient_data,
                "power-law fit needs at least " + std::to_string(opt.min_observations) +
                    " observations, got " + std::to_string(obs.size()));
  for (const auto& o : obs)
    if (!(o.params_millions > 0) || !(o.steps > 0))
      throw Error(ErrorCode::domain_error, "observations need positive size and steps");

  static constexpr double kGrid[] = {-0.05, -0.25, -0.5, -1.0, -1.5};
  detail::LmResult best;
  for (const double bm : kGrid)
    for (const double bs : kGrid)
      for (const double bc : kGrid) {
        const Eigen::Vector3d alpha = detail::alpha_init(obs, bm, bs, bc);
        detail::Vector6 th;
        th << std::log(alpha[0]), bm, std::log(alpha[1]), bs, std::log(alpha[2]), bc;
        detail::clamp_theta(th);
        const auto run = detail::levenberg_marquardt(th, obs, opt.max_iterations);
        if (run.sse < best.sse) best = run;  // strict: first best wins ties
      }

  PowerLawFit fit;
  if (!std::isfinite(best.sse)) return fit;  // best effort: all starts diverged
  fit.alpha_m = std::exp(best.theta[0]);
  fit.beta_m = best.theta[1];
  fit.alpha_s = std::exp(best.theta[2]);
  fit.beta_s = best.theta[3];
  fit.alpha_c = std::exp(best.theta[4]);
  fit.beta_c = best.theta[5];
  fit.residual = std::sqrt(best.sse / double(obs.size()));
  fit.converged = best.converged;
  return fit;
}

// ---------------------------------------------------------------------------
// Goodness-of-fit metrics with explicit undefined markers.

struct FitMetrics {
  double mae = 0, rmae = 0, mse = 0, r2 = 0, pearson = 0;
  bool rmae_defined = true, r2_defined = true, pearson_defined = true;
};

inline FitMetrics fit_metrics(const std::vector<double>& actual,
                              const std::vector<double>& predicted) {
  if (actual.size() != predicted.size())
    throw Error(ErrorCode::shape_mismatch,
                "fit_metrics: " + std::to_string(actual.size()) + " actual vs " +
                    std::to_string(predicted.size()) + " predicted");
  if (actual.empty())
    throw Error(ErrorCode::insufficient_data, "fit_metrics: no observations");

  const double n = static_cast<double>(actual.size());
  FitMetrics m;
  double abs_sum = 0, rel_sum = 0, sq_sum = 0;
  double a_mean = 0, p_mean = 0;
  for (size_t i = 0; i < actual.size(); ++i) {
    const double d = actual[i] - predicted[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
    if (actual[i] == 0.0)
      m.rmae_defined = false;
    else
      rel_sum += std::abs(d) / std::abs(actual[i]);
    a_mean += actual[i];
    p_mean += predicted[i];
  }
  a_mean /= n;
  p_mean /= n;
  m.mae = abs_sum / n;
  m.mse = sq_sum / n;
  m.rmae = m.rmae_defined ? rel_sum / n : 0.0;

  double a_var = 0, p_var = 0, cov = 0;
  for (size_t i = 0; i < actual.size(); ++i) {
    a_var += (actual[i] - a_mean) * (actual[i] - a_mean);
    p_var += (predicted[i] - p_mean) * (predicted[i] - p_mean);
    cov += (actual[i] - a_mean) * (predicted[i] - p_mean);
  }
  if (a_var == 0.0) {
    m.r2_defined = false;
  } else {
    m.r2 = 1.0 - sq_sum / a_var;
  }
  if (a_var == 0.0 || p_var == 0.0) {
    m.pearson_defined = false;
  } else {
    m.pearson = cov / std::sqrt(a_var * p_var);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Loss-log plumbing

// Reads a training loss log, keeping rows with step >= min_step that land on
// the stride. Column layout must match the trainer's header.
inline std::vector<Observation> observations_from_log(const std::string& path,
                                                      const FitOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw Error(ErrorCode::parse_error, path + ": empty loss log");
  if (line != train::kLossLogHeader)
    throw Error(ErrorCode::parse_error, path + ":1: unexpected header '" + line + "'");

  std::vector<Observation> obs;
  int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::vector<double> cols;
    while (std::getline(row, field, ',')) {
      try {
        cols.push_back(std::stod(field));
      } catch (const std::exception&) {
        throw Error(ErrorCode::parse_error,
                    path + ":" + std::to_string(lineno) + ": bad number '" + field + "'");
      }
    }
    if (cols.size() != 8)
      throw Error(ErrorCode::parse_error, path + ":" + std::to_string(lineno) + ": expected 8 columns, got " +
                                              std::to_string(cols.size()));
    const auto step = static_cast<int64_t>(cols[0]);
    if (step < opt.min_step || (opt.stride > 1 && step % opt.stride != 0)) continue;
    obs.push_back({cols[6], double(step), cols[1]});
  }
  return obs;
}

inline nlohmann::ordered_json fit_to_json(const PowerLawFit& fit) {
  return nlohmann::ordered_json{{"alpha_m", fit.alpha_m}, {"beta_m", fit.beta_m},
                                {"alpha_s", fit.alpha_s}, {"beta_s", fit.beta_s},
                                {"alpha_c", fit.alpha_c}, {"beta_c", fit.beta_c},
                                {"residual", fit.residual}, {"converged", fit.converged}};
}

inline PowerLawFit fit_from_json(const nlohmann::json& j) {
  PowerLawFit fit;
  try {
    fit.alpha_m = j.at("alpha_m").get<double>();
    fit.beta_m = j.at("beta_m").get<double>();
    fit.alpha_s = j.at("alpha_s").get<double>();
    fit.beta_s = j.at("beta_s").get<double>();
    fit.alpha_c = j.at("alpha_c").get<double>();
    fit.beta_c = j.at("beta_c").get<double>();
    fit.residual = j.at("residual").get<double>();
    fit.converged = j.at("converged").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("fit JSON is incomplete: ") + e.what());
  }
  return fit;
}

inline void write_fit_json(const std::string& path, const PowerLawFit& fit) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_error, "cannot open " + path + " for write");
  out << fit_to_json(fit).dump(2) << '\n';
}

inline PowerLawFit read_fit_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse_error, path + ": " + e.what());
  }
  return fit_from_json(j);
}

inline void write_predictions_csv(const std::string& path, const std::vector<Observation>& obs,
                                  const PowerLawFit& fit) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_error, "cannot open " + path + " for write");
  out << "step,actual,predicted\n";
  for (const auto& o : obs)
    out << static_cast<int64_t>(o.steps) << ',' << o.loss << ','
        << evaluate(fit, o.params_millions, o.steps) << '\n';
}

}  // namespace tinymol::scaling
