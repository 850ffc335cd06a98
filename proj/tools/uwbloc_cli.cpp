// SPDX-License-Identifier: Apache-2.0
//
// uwbloc: simulation-backed UWB localization pipeline.
//
//   gen-data        fly synthetic training flights, write a feature/target csv
//   train           fit the bias estimator with mini-batch gradient descent
//   simulate        open- or closed-loop estimation runs, json-lines logs
//   eval            recompute and compare metrics across run logs
//   export-weights  re-serialize a weight file, validating the round trip

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uwbloc/config.hpp"
#include "uwbloc/nn.hpp"
#include "uwbloc/sim.hpp"

namespace {

using namespace uwbloc;

template <typename T>
void merge(std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

struct CommonFlags {
  std::optional<std::string> config_path;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;

  ParsedExperiment load() const {
    ParsedExperiment parsed;
    if (config_path) parsed = load_experiment_config(*config_path);
    if (mode) {
      const auto m = parse_mode(*mode);
      if (!m) throw ConfigError("unknown mode '" + *mode + "'");
      parsed.config.run.mode = *m;
    }
    if (seed) {
      parsed.config.run.seed = *seed;
      parsed.config.run.noise.seed = *seed;
    }
    return parsed;
  }
};

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open output file: " + path);
  return out;
}

int cmd_gen_data(const CommonFlags& common, const std::string& out_path,
                 std::optional<int> flights, std::optional<double> flight_duration,
                 std::optional<double> rate, std::optional<double> speed,
                 std::optional<int> waypoints) {
  ParsedExperiment parsed = common.load();
  DatasetConfig& d = parsed.config.dataset;
  merge(flights, d.flights);
  merge(flight_duration, d.flight_duration);
  merge(rate, d.rate);
  merge(speed, d.speed);
  merge(waypoints, d.waypoints_per_flight);
  if (common.seed) d.seed = *common.seed;

  const RunConfig& run = parsed.config.run;
  const Dataset dataset =
      generate_dataset(d, run.constellation, run.bias, run.noise, run.mode, d.flights);

  auto out = open_output(out_path);
  write_dataset_csv(out, dataset.samples);
  out.close();

  double sum = 0.0, sum2 = 0.0;
  double lo = dataset.samples.front().target_bias, hi = lo;
  for (const auto& s : dataset.samples) {
    sum += s.target_bias;
    sum2 += s.target_bias * s.target_bias;
    lo = std::min(lo, s.target_bias);
    hi = std::max(hi, s.target_bias);
  }
  const double n = static_cast<double>(dataset.samples.size());
  const double mean = sum / n;
  const double stddev = std::sqrt(std::max(0.0, sum2 / n - mean * mean));
  std::printf("wrote %zu %s samples to %s\n", dataset.samples.size(), to_string(run.mode),
              out_path.c_str());
  std::printf("target bias: mean=%.4f m  std=%.4f m  min=%.4f m  max=%.4f m\n", mean, stddev, lo, hi);
  return 0;
}

int cmd_train(const CommonFlags& common, const std::string& data_path,
              const std::string& model_out, const std::string& history_out,
              std::optional<double> xi, std::optional<double> split, std::optional<double> lr,
              std::optional<int> batch, std::optional<int> epochs) {
  ParsedExperiment parsed = common.load();
  TrainConfig& cfg = parsed.config.train;
  merge(xi, cfg.xi_threshold);
  merge(split, cfg.split_fraction);
  merge(lr, cfg.learning_rate);
  merge(batch, cfg.batch_size);
  merge(epochs, cfg.epochs);
  if (common.seed) cfg.seed = *common.seed;

  std::ifstream in(data_path);
  if (!in) throw IoError("cannot open dataset: " + data_path);
  const auto samples = read_dataset_csv(in);
  std::printf("training on %zu samples (%s): xi=%g split=%g lr=%g batch=%d epochs=%d seed=%llu\n",
              samples.size(), samples.empty() ? "?" : to_string(samples.front().feature.mode),
              cfg.xi_threshold, cfg.split_fraction, cfg.learning_rate, cfg.batch_size, cfg.epochs,
              static_cast<unsigned long long>(cfg.seed));

  const TrainResult result = train(samples, cfg);
  save_weights(result.model, model_out);
  if (!history_out.empty()) {
    auto out = open_output(history_out);
    write_history_csv(out, result.history);
  }
  const EpochStats& best = result.history[result.best_epoch];
  std::printf("best epoch %d: train RMSE %.4f m, validation RMSE %.4f m\n", result.best_epoch,
              std::sqrt(best.train_loss), std::sqrt(best.val_loss));
  std::printf("weights written to %s\n", model_out.c_str());
  return 0;
}

std::string seed_suffixed(const std::string& path, std::uint64_t seed) {
  const auto dot = path.rfind('.');
  const std::string stem = dot == std::string::npos ? path : path.substr(0, dot);
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  return stem + "_seed" + std::to_string(seed) + ext;
}

int cmd_simulate(const CommonFlags& common, std::optional<std::string> compensation,
                 std::optional<std::string> rejection, bool closed_loop,
                 const std::string& model_path, const std::string& out_path,
                 const std::string& summary_path, int seeds, std::optional<double> duration,
                 std::optional<double> rate, std::optional<double> speed,
                 std::optional<std::string> trajectory_kind, std::optional<double> radius) {
  ParsedExperiment parsed = common.load();
  RunConfig& run = parsed.config.run;
  if (compensation) run.compensation = *compensation == "on";
  if (rejection) run.rejection = *rejection == "on";
  merge(duration, run.trajectory.duration);
  merge(rate, run.measurement_rate);
  merge(speed, run.trajectory.speed);
  if (trajectory_kind) {
    const auto kind = parse_trajectory_kind(*trajectory_kind);
    if (!kind) throw ConfigError("unknown trajectory kind '" + *trajectory_kind + "'");
    run.trajectory.kind = *kind;
    if (*kind == TrajectoryKind::CircleVaryingZ && run.trajectory.z_amplitude == 0.0)
      run.trajectory.z_amplitude = 0.5;
  }
  merge(radius, run.trajectory.radius);
  finalize_trajectory(parsed);

  MlpModel model;
  if (run.compensation) {
    if (model_path.empty()) throw ConfigError("--compensation on requires --model");
    model = load_weights(model_path);
    if (model.mode != run.mode)
      throw ConfigError(std::string("model is ") + to_string(model.mode) + " but run mode is " +
                        to_string(run.mode));
  }

  std::vector<RunLog> logs;
  for (int s = 0; s < seeds; ++s) {
    RunConfig cfg = run;
    cfg.seed = run.seed + static_cast<std::uint64_t>(s);
    cfg.noise.seed = cfg.seed;
    const RunLog log = closed_loop ? run_closed_loop(cfg, run.compensation ? &model : nullptr)
                                   : run_estimation(cfg, run.compensation ? &model : nullptr);
    if (!out_path.empty()) {
      const std::string path = seeds == 1 ? out_path : seed_suffixed(out_path, cfg.seed);
      save_runlog(log, path, seeds == 1 ? summary_path : "");
    }
    logs.push_back(log);
  }

  double mean_est = 0.0, mean_track = 0.0;
  for (const auto& log : logs) {
    mean_est += log.summary.estimation_rmse;
    mean_track += log.summary.tracking_rmse;
  }
  mean_est /= seeds;
  mean_track /= seeds;
  double var_est = 0.0;
  std::size_t diverged = 0, accepted = 0, rej_dyn = 0, rej_chi = 0, total = 0;
  for (const auto& log : logs) {
    var_est += (log.summary.estimation_rmse - mean_est) * (log.summary.estimation_rmse - mean_est);
    diverged += log.summary.diverged ? 1 : 0;
    accepted += log.summary.accepted;
    rej_dyn += log.summary.rejected_dynamics;
    rej_chi += log.summary.rejected_chi2;
    total += log.summary.record_count;
  }
  const double std_est = seeds > 1 ? std::sqrt(var_est / (seeds - 1)) : 0.0;

  std::printf("%-5s comp=%-3s rej=%-3s %s seeds=%d  est RMSE %.4f +/- %.4f m", to_string(run.mode),
              run.compensation ? "on" : "off", run.rejection ? "on" : "off",
              closed_loop ? "closed" : "open  ", seeds, mean_est, std_est);
  if (closed_loop) std::printf("  track RMSE %.4f m", mean_track);
  std::printf("  gates[acc=%zu dyn=%zu chi2=%zu/%zu]", accepted, rej_dyn, rej_chi, total);
  if (diverged > 0) std::printf("  DIVERGED %zu/%d", diverged, seeds);
  std::printf("\n");

  if (seeds > 1 && !summary_path.empty()) {
    nlohmann::json agg;
    agg["seeds"] = seeds;
    agg["mode"] = to_string(run.mode);
    agg["compensation"] = run.compensation;
    agg["rejection"] = run.rejection;
    agg["closed_loop"] = closed_loop;
    agg["estimation_rmse_mean"] = mean_est;
    agg["estimation_rmse_std"] = std_est;
    agg["tracking_rmse_mean"] = mean_track;
    agg["diverged_runs"] = diverged;
    agg["per_seed"] = nlohmann::json::array();
    for (const auto& log : logs) agg["per_seed"].push_back(summary_to_json(log));
    auto out = open_output(summary_path);
    out << agg.dump(2) << '\n';
  }
  return 0;
}

int cmd_eval(const std::vector<std::string>& log_paths, const std::string& out_path) {
  if (log_paths.empty()) throw ConfigError("eval: no log files given");
  struct Entry {
    std::string path;
    RunLog log;
  };
  std::vector<Entry> entries;
  for (const auto& p : log_paths) entries.push_back({p, load_runlog(p)});

  const std::string& traj = entries.front().log.trajectory_id;
  for (const auto& e : entries)
    if (e.log.trajectory_id != traj)
      throw ConfigError("eval: refusing to compare different trajectories ('" + traj + "' vs '" +
                        e.log.trajectory_id + "')");

  nlohmann::json j;
  j["trajectory"] = traj;
  j["runs"] = nlohmann::json::array();
  std::printf("%-40s %-5s %-4s %-4s %-6s %10s %10s\n", "log", "mode", "comp", "rej", "loop",
              "est RMSE", "trk RMSE");
  for (auto& e : entries) {
    e.log.summary = metrics(e.log);  // recompute from records
    const auto& s = e.log.summary;
    std::printf("%-40s %-5s %-4s %-4s %-6s %10.4f %10.4f\n", e.path.c_str(),
                to_string(e.log.mode), e.log.compensation ? "on" : "off",
                e.log.rejection ? "on" : "off", e.log.closed_loop ? "closed" : "open",
                s.estimation_rmse, s.tracking_rmse);
    auto run = summary_to_json(e.log);
    run["path"] = e.path;
    j["runs"].push_back(run);
  }

  j["comparisons"] = nlohmann::json::array();
  auto emit = [&](const Entry& base, const Entry& improved) {
    const double b = base.log.summary.estimation_rmse;
    const double i = improved.log.summary.estimation_rmse;
    const double reduction = b > 0.0 ? 100.0 * (b - i) / b : 0.0;
    std::printf("reduction (%s): %s -> %s: %.1f%%\n", to_string(base.log.mode), base.path.c_str(),
                improved.path.c_str(), reduction);
    j["comparisons"].push_back({{"mode", to_string(base.log.mode)},
                                {"baseline", base.path},
                                {"improved", improved.path},
                                {"baseline_rmse", b},
                                {"improved_rmse", i},
                                {"reduction_percent", reduction}});
  };
  bool compared = false;
  for (const auto& base : entries) {
    if (base.log.compensation) continue;
    for (const auto& improved : entries) {
      if (!improved.log.compensation) continue;
      if (improved.log.mode != base.log.mode || improved.log.rejection != base.log.rejection ||
          improved.log.closed_loop != base.log.closed_loop)
        continue;
      emit(base, improved);
      compared = true;
    }
  }
  if (!compared && entries.size() == 2) emit(entries[0], entries[1]);

  if (!out_path.empty()) {
    auto out = open_output(out_path);
    out << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_export_weights(const std::string& in_path, const std::string& out_path) {
  const MlpModel model = load_weights(in_path);
  save_weights(model, out_path);
  const MlpModel back = load_weights(out_path);
  if (!models_identical(model, back)) throw IoError("export-weights: round trip not exact");
  std::printf("exported %s (%s, dims", out_path.c_str(), to_string(model.mode));
  for (int d : model.layer_dims()) std::printf(" %d", d);
  std::printf("), round-trip exact\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uwbloc: UWB TWR/TDoA localization with learned bias compensation and outlier gating"};
  app.require_subcommand(1);

  CommonFlags common;
  int exit_code = 0;

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic training dataset (csv)");
  std::string gen_out;
  std::optional<int> gen_flights, gen_waypoints;
  std::optional<double> gen_duration, gen_rate, gen_speed;
  gen->add_option("--config", common.config_path, "Experiment config json");
  gen->add_option("--mode", common.mode, "Ranging mode")->check(CLI::IsMember({"twr", "tdoa"}))
      ->default_str("twr");
  gen->add_option("--out", gen_out, "Output csv path")->required();
  gen->add_option("--flights", gen_flights, "Number of training flights")->default_str("20");
  gen->add_option("--flight-duration", gen_duration, "Seconds per flight")->default_str("120");
  gen->add_option("--rate", gen_rate, "Logging rate, Hz")->default_str("50");
  gen->add_option("--speed", gen_speed, "Data-collection cruise speed, m/s")->default_str("0.9");
  gen->add_option("--waypoints", gen_waypoints, "Waypoints per flight")->default_str("16");
  gen->add_option("--seed", common.seed, "Run seed")->default_str("7");
  gen->callback([&] {
    exit_code = cmd_gen_data(common, gen_out, gen_flights, gen_duration, gen_rate, gen_speed,
                             gen_waypoints);
  });

  // train ------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train the bias estimator on a dataset csv");
  std::string tr_data, tr_model, tr_history;
  std::optional<double> tr_xi, tr_split, tr_lr;
  std::optional<int> tr_batch, tr_epochs;
  tr->add_option("--config", common.config_path, "Experiment config json");
  tr->add_option("--data", tr_data, "Dataset csv")->required();
  tr->add_option("--model-out", tr_model, "Weight file output path")->required();
  tr->add_option("--history-out", tr_history, "Per-epoch loss csv");
  tr->add_option("--xi", tr_xi, "Training-set filter threshold, m")->default_str("0.7");
  tr->add_option("--split", tr_split, "Training split fraction")->default_str("0.9");
  tr->add_option("--lr", tr_lr, "Learning rate")->default_str("0.03");
  tr->add_option("--batch", tr_batch, "Mini-batch size")->default_str("32");
  tr->add_option("--epochs", tr_epochs, "Training epochs")->default_str("500");
  tr->add_option("--seed", common.seed, "Shuffle/init seed")->default_str("1");
  tr->callback([&] {
    exit_code = cmd_train(common, tr_data, tr_model, tr_history, tr_xi, tr_split, tr_lr, tr_batch,
                          tr_epochs);
  });

  // simulate -----------------------------------------------------------------
  auto* sim = app.add_subcommand("simulate", "Run an estimation or closed-loop experiment");
  std::optional<std::string> sim_comp, sim_rej, sim_kind;
  std::optional<double> sim_duration, sim_rate, sim_speed, sim_radius;
  std::string sim_model, sim_out, sim_summary;
  bool sim_closed = false;
  int sim_seeds = 1;
  sim->add_option("--config", common.config_path, "Experiment config json");
  sim->add_option("--mode", common.mode, "Ranging mode")->check(CLI::IsMember({"twr", "tdoa"}))
      ->default_str("twr");
  sim->add_option("--compensation", sim_comp, "NN bias compensation")
      ->check(CLI::IsMember({"on", "off"}))->default_str("off");
  sim->add_option("--rejection", sim_rej, "Outlier rejection gates")
      ->check(CLI::IsMember({"on", "off"}))->default_str("on");
  sim->add_flag("--closed-loop", sim_closed, "Close the control loop on the estimate");
  sim->add_option("--model", sim_model, "Weight file (required when compensation is on)");
  sim->add_option("--out", sim_out, "Run log json-lines path");
  sim->add_option("--summary-out", sim_summary, "Summary json path");
  sim->add_option("--seed", common.seed, "Base seed")->default_str("1");
  sim->add_option("--seeds", sim_seeds, "Number of seeds to aggregate")->default_str("1");
  sim->add_option("--duration", sim_duration, "Run duration, s")->default_str("60");
  sim->add_option("--rate", sim_rate, "Measurement rate, Hz")->default_str("200");
  sim->add_option("--speed", sim_speed, "Trajectory speed, m/s")->default_str("0.375");
  sim->add_option("--trajectory", sim_kind, "Trajectory kind")
      ->check(CLI::IsMember({"circle_xy", "circle_varying_z", "generic_waypoints"}))
      ->default_str("circle_xy");
  sim->add_option("--radius", sim_radius, "Circle radius, m")->default_str("2");
  sim->callback([&] {
    exit_code = cmd_simulate(common, sim_comp, sim_rej, sim_closed, sim_model, sim_out, sim_summary,
                             sim_seeds, sim_duration, sim_rate, sim_speed, sim_kind, sim_radius);
  });

  // eval ---------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Recompute and compare metrics across run logs");
  std::vector<std::string> ev_logs;
  std::string ev_out;
  ev->add_option("logs", ev_logs, "Run log json-lines files")->required();
  ev->add_option("--out", ev_out, "Comparison json output");
  ev->callback([&] { exit_code = cmd_eval(ev_logs, ev_out); });

  // export-weights -------------------------------------------------------------
  auto* ex = app.add_subcommand("export-weights", "Re-serialize a weight file, validating round trip");
  std::string ex_in, ex_out;
  ex->add_option("--in", ex_in, "Input weight file")->required();
  ex->add_option("--out", ex_out, "Output weight file")->required();
  ex->callback([&] { exit_code = cmd_export_weights(ex_in, ex_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const uwbloc::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return exit_code;
}
