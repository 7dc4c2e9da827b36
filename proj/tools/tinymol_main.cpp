// tinymol: one binary wiring the library together.
//
// Subcommands: synth (toy dataset generator), validate, sample, pretrain,
// fit-scaling, predict-loss, metrics, gradcheck. Commands that produce files
// also write a run manifest (command, config snapshot, seed, timestamps,
// git describe, output paths) next to their outputs.
//
// Exit codes: 0 success, 2 usage/input problems, 3 not enough data,
// 4 numerical failures.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tinymol/dataset.hpp"
#include "tinymol/errors.hpp"
#include "tinymol/gradcheck.hpp"
#include "tinymol/model.hpp"
#include "tinymol/sampler.hpp"
#include "tinymol/scaling.hpp"
#include "tinymol/synthetic.hpp"
#include "tinymol/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace tinymol;

namespace {

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::insufficient_data:
      return 3;
    case ErrorCode::domain_error:
    case ErrorCode::nan_gradient:
    case ErrorCode::not_scalar:
      return 4;
    default:
      return 2;  // parse/range/io/config/checkpoint/shape/empty/too-large
  }
}

std::string iso_utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string git_describe() {
  FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  char buf[256];
  std::string out;
  while (fgets(buf, sizeof(buf), pipe)) out += buf;
  pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

// Collected while a command runs, flushed as JSON via an atomic rename.
struct RunManifest {
  std::string command;
  ordered_json config = ordered_json::object();
  uint64_t seed = 0;
  std::string started_at = iso_utc_now();
  std::vector<std::string> outputs;

  void write(const fs::path& path) const {
    ordered_json j;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    j["started_at"] = started_at;
    j["finished_at"] = iso_utc_now();
    j["git_describe"] = git_describe();
    j["outputs"] = outputs;

    const fs::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw Error(ErrorCode::io_error, "cannot open " + tmp.string() + " for write");
      out << j.dump(2) << '\n';
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec)
      throw Error(ErrorCode::io_error, "cannot rename " + tmp.string() + ": " + ec.message());
  }
};

// Flat key=value config files: one pair per line, '#' comments. Unknown keys
// are hard errors so typos cannot silently fall back to defaults.
std::map<std::string, std::string> read_kv_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open config " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto strip = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::parse_error,
                  path + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    if (key.empty())
      throw Error(ErrorCode::parse_error, path + ":" + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second)
      throw Error(ErrorCode::config_error, path + ": duplicate key '" + key + "'");
  }
  return kv;
}

double to_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::config_error, "key '" + key + "' needs a number, got '" + value + "'");
  }
}

int64_t to_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const int64_t v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::config_error, "key '" + key + "' needs an integer, got '" + value + "'");
  }
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out_dir;
  int64_t count = 64;
  uint64_t seed = 1;
  int n_min = 4, n_max = 16;
  int scaffolds = 4;
};

int cmd_synth(const SynthArgs& a) {
  fs::create_directories(a.out_dir);
  const auto mols =
      synth::random_dataset(a.seed, static_cast<int>(a.count), a.n_min, a.n_max, a.scaffolds);
  const std::string data_path = (fs::path(a.out_dir) / "data.jsonl").string();
  const std::string table_path = (fs::path(a.out_dir) / "scaffolds.tsv").string();
  write_dataset(mols, data_path);
  write_scaffold_table(synth::scaffold_table_of(mols), table_path);

  RunManifest manifest;
  manifest.command = "synth";
  manifest.seed = a.seed;
  manifest.config = {{"count", a.count}, {"n_min", a.n_min}, {"n_max", a.n_max},
                     {"scaffolds", a.scaffolds}};
  manifest.outputs = {data_path, table_path};
  manifest.write(fs::path(a.out_dir) / "run_manifest.json");
  std::cout << "wrote " << mols.size() << " molecules to " << data_path << "\n";
  return 0;
}

int cmd_validate(const std::string& data_path) {
  const auto mols = read_dataset(data_path);
  for (const auto& g : mols) compute_spd(g);  // exercises graph consistency
  std::cout << mols.size() << " molecules OK\n";
  return 0;
}

struct SampleArgs {
  std::string data, scaffolds, out_dir;
  double tau = 1.0;
  int64_t draws = 0;
  uint64_t seed = 1;
};

int cmd_sample(const SampleArgs& a) {
  ScaffoldTable table;
  if (!a.scaffolds.empty()) {
    table = read_scaffold_table(a.scaffolds);
  } else if (!a.data.empty()) {
    table = synth::scaffold_table_of(read_dataset(a.data));
  } else {
    throw Error(ErrorCode::config_error, "sample needs --scaffolds or --data");
  }

  fs::create_directories(a.out_dir);
  const auto plan = build_plan(table, a.tau, a.seed);
  const std::string plan_path = (fs::path(a.out_dir) / "plan.json").string();
  write_plan_json(plan, table, plan_path);

  RunManifest manifest;
  manifest.command = "sample";
  manifest.seed = a.seed;
  manifest.config = {{"tau", a.tau}, {"draws", a.draws}, {"scaffolds", a.scaffolds},
                     {"data", a.data}};
  manifest.outputs = {plan_path};

  if (a.draws > 0) {
    const auto ids = sample_molecules(plan, table, static_cast<size_t>(a.draws));
    const std::string ids_path = (fs::path(a.out_dir) / "sampled_ids.txt").string();
    std::ofstream out(ids_path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_error, "cannot open " + ids_path + " for write");
    for (const auto& id : ids) out << id << '\n';
    manifest.outputs.push_back(ids_path);
  }
  manifest.write(fs::path(a.out_dir) / "run_manifest.json");
  std::cout << "plan over " << table.entries.size() << " scaffolds written to " << plan_path
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainSettings {
  model::ModelConfig mcfg = model::preset("tiny");
  train::TrainConfig tcfg;
  std::string data, scaffolds, out_dir, resume = "auto";
  int64_t stop_step = 0;
};

PretrainSettings parse_pretrain_config(const std::map<std::string, std::string>& kv) {
  PretrainSettings s;
  const auto preset_it = kv.find("preset");
  if (preset_it != kv.end()) s.mcfg = model::preset(preset_it->second);
  s.tcfg.peak_lr = s.mcfg.peak_lr;

  for (const auto& [key, value] : kv) {
    if (key == "preset") continue;
    if (key == "data") s.data = value;
    else if (key == "scaffolds") s.scaffolds = value;
    else if (key == "out_dir") s.out_dir = value;
    else if (key == "resume") s.resume = value;
    else if (key == "layers") s.mcfg.layers = int(to_int(key, value));
    else if (key == "embed_dim") s.mcfg.embed_dim = int(to_int(key, value));
    else if (key == "heads") s.mcfg.heads = int(to_int(key, value));
    else if (key == "pair_dim") s.mcfg.pair_dim = int(to_int(key, value));
    else if (key == "pair_hidden") s.mcfg.pair_hidden = int(to_int(key, value));
    else if (key == "ffn_dim") s.mcfg.ffn_dim = int(to_int(key, value));
    else if (key == "gaussian_kernels") s.mcfg.gaussian_kernels = int(to_int(key, value));
    else if (key == "seed") s.tcfg.seed = static_cast<uint64_t>(to_int(key, value));
    else if (key == "total_steps") s.tcfg.total_steps = to_int(key, value);
    else if (key == "warmup_steps") s.tcfg.warmup_steps = to_int(key, value);
    else if (key == "peak_lr") s.tcfg.peak_lr = to_double(key, value);
    else if (key == "weight_decay") s.tcfg.weight_decay = to_double(key, value);
    else if (key == "clip_norm") s.tcfg.clip_norm = to_double(key, value);
    else if (key == "tau") s.tcfg.tau = to_double(key, value);
    else if (key == "batch_budget") s.tcfg.batch_budget = to_int(key, value);
    else if (key == "epoch_molecules") s.tcfg.epoch_molecules = to_int(key, value);
    else if (key == "mask_rate") s.tcfg.mask_rate = to_double(key, value);
    else if (key == "noise_sigma") s.tcfg.noise_sigma = to_double(key, value);
    else if (key == "feat_mask_p") s.tcfg.feat_mask_p = to_double(key, value);
    else if (key == "checkpoint_every") s.tcfg.checkpoint_every = to_int(key, value);
    else if (key == "checkpoint_keep") s.tcfg.checkpoint_keep = to_int(key, value);
    else if (key == "stop_step") s.stop_step = to_int(key, value);
    else
      throw Error(ErrorCode::config_error, "unknown config key '" + key + "'");
  }
  if (s.data.empty()) throw Error(ErrorCode::config_error, "config needs data=<path>");
  if (s.out_dir.empty()) throw Error(ErrorCode::config_error, "config needs out_dir=<path>");
  s.mcfg.check();
  s.tcfg.check();
  return s;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir_override) {
  const auto kv = read_kv_config(config_path);
  PretrainSettings s = parse_pretrain_config(kv);
  if (!out_dir_override.empty()) s.out_dir = out_dir_override;
  s.tcfg.out_dir = s.out_dir;
  fs::create_directories(s.out_dir);

  const auto mols = read_dataset(s.data);
  const ScaffoldTable table =
      s.scaffolds.empty() ? synth::scaffold_table_of(mols) : read_scaffold_table(s.scaffolds);

  auto state = model::init_state<float>(s.mcfg, s.tcfg.seed);
  train::AdamW<float> opt;

  int64_t start_step = 0;
  if (s.resume != "none") {
    std::string ckpt_path;
    if (s.resume == "auto") {
      const auto found = train::list_checkpoints(s.out_dir);
      if (!found.empty()) ckpt_path = found.back().second.string();
    } else {
      ckpt_path = s.resume;
    }
    if (!ckpt_path.empty()) {
      start_step = train::load_training_checkpoint(ckpt_path, state, &opt);
      std::cout << "resuming from " << ckpt_path << " at step " << start_step << "\n";
    }
  }

  const std::string loss_path = (fs::path(s.out_dir) / "loss.csv").string();
  std::ofstream loss_csv(loss_path, start_step > 0 ? std::ios::app : std::ios::trunc);
  if (!loss_csv) throw Error(ErrorCode::io_error, "cannot open " + loss_path + " for write");

  const auto result =
      train::train(state, opt, s.tcfg, mols, table, start_step, &loss_csv, s.stop_step);

  RunManifest manifest;
  manifest.command = "pretrain";
  manifest.seed = s.tcfg.seed;
  for (const auto& [key, value] : kv) manifest.config[key] = value;
  manifest.config["params_millions"] = state.params_millions();
  manifest.outputs = {loss_path};
  for (const auto& [step, path] : train::list_checkpoints(s.out_dir))
    manifest.outputs.push_back(path.string());
  manifest.write(fs::path(s.out_dir) / "run_manifest.json");

  std::cout << "trained to step " << result.final_step << " ("
            << state.params_millions() << "M params)";
  if (!result.logs.empty()) std::cout << ", final loss " << result.logs.back().loss_total;
  std::cout << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// scaling commands

struct FitArgs {
  std::vector<std::string> logs;
  std::string out_dir;
  int64_t min_step = 200000;
  int64_t stride = 10000;
  int64_t min_obs = 12;
};

int cmd_fit_scaling(const FitArgs& a) {
  scaling::FitOptions opt;
  opt.min_step = a.min_step;
  opt.stride = a.stride;
  opt.min_observations = static_cast<size_t>(a.min_obs);

  std::vector<scaling::Observation> obs;
  for (const auto& log : a.logs) {
    const auto part = scaling::observations_from_log(log, opt);
    obs.insert(obs.end(), part.begin(), part.end());
  }
  const auto fit = scaling::fit_power_law(obs, opt);

  fs::create_directories(a.out_dir);
  const std::string fit_path = (fs::path(a.out_dir) / "fit.json").string();
  const std::string pred_path = (fs::path(a.out_dir) / "predictions.csv").string();
  scaling::write_fit_json(fit_path, fit);
  scaling::write_predictions_csv(pred_path, obs, fit);

  RunManifest manifest;
  manifest.command = "fit-scaling";
  manifest.config = {{"logs", a.logs}, {"min_step", a.min_step}, {"stride", a.stride},
                     {"min_observations", a.min_obs}};
  manifest.outputs = {fit_path, pred_path};
  manifest.write(fs::path(a.out_dir) / "run_manifest.json");

  std::cout << scaling::fit_to_json(fit).dump(2) << "\n";
  if (!fit.converged) std::cerr << "warning: fit did not converge; coefficients are best-effort\n";
  return 0;
}

int cmd_predict_loss(const std::string& fit_path, double params_millions, double steps) {
  const scaling::PowerLawFit fit =
      fit_path.empty() ? scaling::reference_fit() : scaling::read_fit_json(fit_path);
  const double loss = scaling::evaluate(fit, params_millions, steps);
  std::cout << ordered_json{{"params_millions", params_millions},
                            {"steps", steps},
                            {"predicted_loss", loss}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_metrics(const std::string& predictions_path, int64_t window) {
  std::ifstream in(predictions_path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + predictions_path);
  std::string line;
  if (!std::getline(in, line) || line != "step,actual,predicted")
    throw Error(ErrorCode::parse_error,
                predictions_path + ":1: expected header 'step,actual,predicted'");
  std::vector<double> actual, predicted;
  int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    double s = 0, a = 0, p = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &s, &a, &p) != 3)
      throw Error(ErrorCode::parse_error,
                  predictions_path + ":" + std::to_string(lineno) + ": bad row '" + line + "'");
    actual.push_back(a);
    predicted.push_back(p);
  }
  if (window > 0) {
    if (static_cast<int64_t>(actual.size()) < window)
      throw Error(ErrorCode::insufficient_data,
                  "window of " + std::to_string(window) + " rows requested, only " +
                      std::to_string(actual.size()) + " available");
    actual.erase(actual.begin(), actual.end() - window);
    predicted.erase(predicted.begin(), predicted.end() - window);
  }
  const auto m = scaling::fit_metrics(actual, predicted);
  ordered_json j;
  j["count"] = actual.size();
  j["mae"] = m.mae;
  if (m.rmae_defined) j["rmae"] = m.rmae; else j["rmae"] = nullptr;
  j["mse"] = m.mse;
  if (m.r2_defined) j["r2"] = m.r2; else j["r2"] = nullptr;
  if (m.pearson_defined) j["pearson"] = m.pearson; else j["pearson"] = nullptr;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& corrupt, uint64_t seed) {
  gradcheck::corrupted_op() = corrupt;
  const auto results = gradcheck::run_all(seed);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-20s %s  max_rel_err %.3e\n", r.op.c_str(), r.pass ? "PASS" : "FAIL",
                r.max_rel_err);
    all_pass = all_pass && r.pass;
  }
  gradcheck::corrupted_op().clear();
  if (!all_pass) {
    std::cout << "gradient check FAILED\n";
    return 4;
  }
  std::cout << "all " << results.size() << " primitive gradient checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tinymol: two-track molecular pretraining toolkit"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--out-dir", synth_args.out_dir, "output directory")->required();
  synth_cmd->add_option("--count", synth_args.count, "number of molecules");
  synth_cmd->add_option("--seed", synth_args.seed, "generator seed");
  synth_cmd->add_option("--n-min", synth_args.n_min, "minimum atoms");
  synth_cmd->add_option("--n-max", synth_args.n_max, "maximum atoms");
  synth_cmd->add_option("--scaffolds", synth_args.scaffolds, "number of scaffold buckets");

  std::string validate_data;
  auto* validate_cmd = app.add_subcommand("validate", "parse and validate a dataset");
  validate_cmd->add_option("--data", validate_data, "dataset JSONL")->required();

  SampleArgs sample_args;
  auto* sample_cmd = app.add_subcommand("sample", "build a scaffold sampling plan");
  sample_cmd->add_option("--data", sample_args.data, "dataset JSONL (derives the table)");
  sample_cmd->add_option("--scaffolds", sample_args.scaffolds, "scaffold table TSV");
  sample_cmd->add_option("--tau", sample_args.tau, "sampling temperature");
  sample_cmd->add_option("--draws", sample_args.draws, "molecules to draw");
  sample_cmd->add_option("--seed", sample_args.seed, "sampling seed");
  sample_cmd->add_option("--out-dir", sample_args.out_dir, "output directory")->required();

  std::string pretrain_config, pretrain_out;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "run the pretraining loop");
  pretrain_cmd->add_option("--config", pretrain_config, "key=value config file")->required();
  pretrain_cmd->add_option("--out-dir", pretrain_out, "override out_dir from the config");

  FitArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit-scaling", "fit the loss power law to loss logs");
  fit_cmd->add_option("--log", fit_args.logs, "loss log CSV (repeatable)")->required();
  fit_cmd->add_option("--min-step", fit_args.min_step, "ignore rows before this step");
  fit_cmd->add_option("--stride", fit_args.stride, "keep rows on this step stride");
  fit_cmd->add_option("--min-obs", fit_args.min_obs, "minimum observations");
  fit_cmd->add_option("--out-dir", fit_args.out_dir, "output directory")->required();

  std::string predict_fit;
  double predict_m = 0, predict_s = 0;
  auto* predict_cmd = app.add_subcommand("predict-loss", "evaluate a fitted power law");
  predict_cmd->add_option("--fit", predict_fit, "fit JSON (default: reference coefficients)");
  predict_cmd->add_option("--params-millions", predict_m, "model size in millions")->required();
  predict_cmd->add_option("--steps", predict_s, "training steps")->required();

  std::string metrics_predictions;
  int64_t metrics_window = 0;
  auto* metrics_cmd = app.add_subcommand("metrics", "goodness-of-fit metrics for predictions");
  metrics_cmd->add_option("--predictions", metrics_predictions, "predictions CSV")->required();
  metrics_cmd->add_option("--window", metrics_window, "use only the last N rows (0 = all)");

  std::string gradcheck_corrupt;
  uint64_t gradcheck_seed = 7;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op");
  gradcheck_cmd->add_option("--corrupt", gradcheck_corrupt,
                            "deliberately corrupt this op's gradient");
  gradcheck_cmd->add_option("--seed", gradcheck_seed, "case seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(synth_args);
    if (validate_cmd->parsed()) return cmd_validate(validate_data);
    if (sample_cmd->parsed()) return cmd_sample(sample_args);
    if (pretrain_cmd->parsed()) return cmd_pretrain(pretrain_config, pretrain_out);
    if (fit_cmd->parsed()) return cmd_fit_scaling(fit_args);
    if (predict_cmd->parsed()) return cmd_predict_loss(predict_fit, predict_m, predict_s);
    if (metrics_cmd->parsed()) return cmd_metrics(metrics_predictions, metrics_window);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_corrupt, gradcheck_seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
