// cncv: train, evaluate and generate data for conditional neural control variates.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cncv/cncv.hpp"

namespace fs = std::filesystem;
using namespace cncv;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool deterministic = false;
};

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (p.empty()) return;
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory '" + p.string() + "': " + ec.message());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

void apply_threads(ExperimentConfig& cfg, const Common& c) {
  if (c.threads) cfg.train.threads = *c.threads;
  if (c.deterministic) cfg.train.threads = 1;
}

void write_json(const std::string& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

Json mean_std_json(const MeanStd& m) { return Json{{"mean", m.mean}, {"std", m.std}}; }

std::string curve_path(const std::string& ckpt) {
  fs::path p(ckpt);
  return (p.parent_path() / (p.stem().string() + "_curve.csv")).string();
}

int cmd_train(const Common& c, std::optional<int> epochs) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (epochs) cfg.train.epochs = *epochs;
  apply_threads(cfg, c);
  cfg.validate();
  const std::string out = c.out.empty() ? (fs::path(cfg.output.dir) / cfg.output.checkpoint).string() : c.out;
  ensure_parent(out);

  const InverseProblem problem = make_problem(cfg.problem);
  const TrainResult tr = train(problem, cfg.train_config(), cfg.qoi, [](const EpochEvent& e) {
    std::cerr << "epoch " << e.epoch << " samples " << e.samples_seen << "\n";
  });
  const std::string hash = config_hash(cfg);
  write_training_curve(tr.curve, curve_path(out), hash);
  Checkpoint ck{cfg, tr.ensemble, {tr.final_loss, tr.final_val_loss, tr.samples_seen, cfg.train.seed}};
  save_checkpoint(ck, out);
  if (tr.aborted) {
    std::cerr << "training aborted: " << tr.error << " (last good parameters saved to " << out << ")\n";
    return 2;
  }
  std::cout << "validation loss " << format_double(tr.initial_val_loss) << " -> " << format_double(tr.final_val_loss)
            << "\ncheckpoint " << out << "\n";
  return 0;
}

void check_compatible(const ExperimentConfig& ck, const ExperimentConfig& cfg) {
  if (ck.problem.kind != cfg.problem.kind) {
    throw ConfigError("checkpoint was trained on '" + std::string(to_string(ck.problem.kind)) + "', config asks for '" +
                      std::string(to_string(cfg.problem.kind)) + "'");
  }
  if (ck.problem.dim != cfg.problem.dim) {
    throw ConfigError("checkpoint dimension " + std::to_string(ck.problem.dim) + " does not match config dimension " +
                      std::to_string(cfg.problem.dim));
  }
  if (!(ck.problem == cfg.problem)) throw ConfigError("checkpoint and config describe different problem instances");
}

std::vector<int> parse_int_list(const std::string& s, const char* flag) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(flag) + ": empty list");
  return out;
}

int cmd_eval(const Common& c, const std::string& ckpt_path, const std::string& study, const std::string& ens_sizes,
             const std::string& sample_sizes) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  ExperimentConfig cfg = ck.config;
  if (!c.config.empty()) {
    cfg = load_config(c.config);
    check_compatible(ck.config, cfg);
  }
  if (c.seed) cfg.eval.seed = *c.seed;
  if (!ens_sizes.empty()) cfg.eval.ensemble_sizes = parse_int_list(ens_sizes, "--ensemble-sizes");
  if (!sample_sizes.empty()) cfg.eval.sample_sizes = parse_int_list(sample_sizes, "--sample-sizes");
  apply_threads(cfg, c);
  cfg.validate();
  const std::string dir = c.out.empty() ? cfg.output.dir : c.out;
  ensure_dir(dir);

  const InverseProblem problem = make_problem(cfg.problem);
  const std::string hash = config_hash(cfg);
  const std::string csv = (fs::path(dir) / (study + ".csv")).string();
  Json summary;
  summary["study"] = study;
  summary["config_hash"] = hash;
  summary["checkpoint_hash"] = ensemble_hash(ck.ensemble);
  summary["problem"] = std::string(to_string(cfg.problem.kind));
  summary["dim"] = cfg.problem.dim;

  if (study == "vrf") {
    const EvalReport rep = vrf_study(problem, ck.ensemble, cfg.vrf_config());
    write_eval_report(rep, csv, hash);
    summary["qoi"] = std::string(to_string(cfg.qoi));
    summary["n_obs"] = cfg.eval.n_obs;
    summary["n_samples"] = cfg.eval.n_samples;
    summary["vrf_components_outer"] = mean_std_json(rep.vrf_by_component());
    summary["vrf_observations_outer"] = mean_std_json(rep.vrf_by_observation());
    summary["corr"] = mean_std_json(rep.corr_by_component());
    summary["skipped"] = rep.skipped;
    summary["correlated_samples"] = rep.correlated_samples;
    std::cout << "mean VRF " << format_double(rep.vrf_by_component().mean) << "\n";
  } else if (study == "stein") {
    const SteinReport rep = stein_verify(problem, ck.ensemble, cfg.eval.stein_n_obs, cfg.eval.n_samples, cfg.eval.seed);
    CsvWriter w(csv, {"obs_id", "statistic", "std_error", "z"}, hash);
    for (const auto& r : rep.rows) {
      w << r.obs_id << r.statistic << r.std_error << r.z;
      w.end_row();
    }
    w.close();
    summary["statistic"] = mean_std_json(rep.statistic);
    summary["pass_fraction"] = rep.pass_fraction;
    summary["component_pass_fraction"] = rep.component_pass_fraction;
    std::cout << "fraction |z| < 4: " << format_double(rep.pass_fraction) << "\n";
  } else if (study == "sweep") {
    SweepConfig sc;
    sc.sizes.assign(cfg.eval.sample_sizes.begin(), cfg.eval.sample_sizes.end());
    sc.n_obs = cfg.eval.sweep_n_obs;
    sc.repeats = cfg.eval.repeats;
    sc.seed = cfg.eval.seed;
    sc.reference_samples = cfg.eval.reference_samples;
    const SweepReport rep = sample_efficiency_sweep(problem, ck.ensemble, sc);
    CsvWriter w(csv, {"n", "vrf", "mse_raw", "mse_cv", "mse_ratio"}, hash);
    for (const auto& r : rep.rows) {
      w << static_cast<long>(r.n) << r.vrf << r.mse_raw << r.mse_cv << r.mse_ratio;
      w.end_row();
    }
    w.close();
    summary["raw_slope"] = rep.raw_slope;
    summary["cv_slope"] = rep.cv_slope;
    summary["analytic_reference"] = rep.analytic_reference;
    std::cout << "raw MSE slope " << format_double(rep.raw_slope) << "\n";
  } else if (study == "ablate") {
    AblationConfig ac;
    ac.sizes = cfg.eval.ensemble_sizes;
    ac.seeds = cfg.eval.ablation_seeds;
    ac.eval = cfg.vrf_config();
    ac.eval.n_obs = cfg.eval.ablation_n_obs;
    const auto rows = ensemble_ablation(problem, cfg.train_config(), ac);
    CsvWriter w(csv, {"ensemble_size", "seed", "vrf"}, hash);
    Json per;
    for (const auto& r : rows) {
      w << r.ensemble_size << static_cast<std::size_t>(r.seed) << r.vrf;
      w.end_row();
    }
    w.close();
    for (int l : ac.sizes) {
      std::vector<double> v;
      for (const auto& r : rows)
        if (r.ensemble_size == l) v.push_back(r.vrf);
      per[std::to_string(l)] = mean_std_json(mean_std(v));
    }
    summary["vrf_by_ensemble_size"] = per;
  } else if (study == "amortize") {
    const AmortizationReport rep = amortization_study(problem, ck.ensemble, cfg.vrf_config());
    CsvWriter w(csv, {"obs_id", "label", "component", "y_obs", "var_h", "var_hg", "vrf", "corr"}, hash);
    for (const auto& r : rep.report.rows) {
      const auto& o = rep.observations[r.obs_id];
      w << r.obs_id << o.label << r.component << o.y(r.component) << r.stats.var_h << r.stats.var_hg << r.stats.vrf
        << r.stats.corr;
      w.end_row();
    }
    w.close();
    Json per = Json::array();
    for (std::size_t i = 0; i < rep.per_observation_vrf.size(); ++i) {
      per.push_back(Json{{"label", rep.observations[i].label}, {"vrf", rep.per_observation_vrf[i]}});
    }
    summary["per_observation_vrf"] = per;
    summary["hash_before"] = rep.hash_before;
    summary["hash_after"] = rep.hash_after;
  } else {
    throw ConfigError("--study: unknown study '" + study + "'");
  }
  write_json((fs::path(dir) / (study + "_summary.json")).string(), summary);
  std::cout << "wrote " << csv << "\n";
  return 0;
}

int cmd_generate(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  cfg.validate();
  if (c.out.empty()) throw ConfigError("--out: required");
  ensure_parent(c.out);
  const InverseProblem problem = make_problem(cfg.problem);
  const Dataset ds = generate_dataset(problem, cfg.train.n_train_samples, cfg.train.seed);
  write_dataset(ds, c.out, config_hash(cfg));
  std::cout << "wrote " << ds.size() << " rows to " << c.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional neural control variates"};
  app.require_subcommand(1);

  Common c;
  std::optional<int> epochs;
  std::string ckpt, study = "vrf", ens_sizes, sample_sizes;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", c.out, "Output path");
    sub->add_option("--seed", c.seed, "Seed override");
    sub->add_option("--threads", c.threads, "Worker thread cap")->check(CLI::PositiveNumber);
    sub->add_flag("--deterministic", c.deterministic, "Sequential bit-reproducible mode");
  };

  CLI::App* train = app.add_subcommand("train", "Train an ensemble and write a checkpoint");
  train->add_option("--config", c.config, "Experiment config (JSON)")->required();
  train->add_option("--epochs", epochs, "Epoch override")->check(CLI::NonNegativeNumber);
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "Run an evaluation study on a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--config", c.config, "Config override (must match the checkpoint's problem)");
  eval->add_option("--study", study, "vrf | stein | sweep | ablate | amortize")
      ->check(CLI::IsMember({"vrf", "stein", "sweep", "ablate", "amortize"}));
  eval->add_option("--ensemble-sizes", ens_sizes, "Comma-separated ensemble sizes for ablate");
  eval->add_option("--sample-sizes", sample_sizes, "Comma-separated sample sizes for sweep");
  add_common(eval);

  CLI::App* gen = app.add_subcommand("generate", "Write a training dataset as CSV");
  gen->add_option("--config", c.config, "Experiment config (JSON)")->required();
  add_common(gen);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (train->parsed()) return cmd_train(c, epochs);
    if (eval->parsed()) return cmd_eval(c, ckpt, study, ens_sizes, sample_sizes);
    return cmd_generate(c);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
