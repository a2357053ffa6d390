// hfusion: simulate, fuse and evaluate from the command line.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "hfusion/estimator.hpp"
#include "hfusion/metrics.hpp"
#include "hfusion/sim.hpp"

namespace fs = std::filesystem;
using namespace hfusion;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

// "abs_pos:G:0.5" -> {"abs_pos:G", 0.5}
std::map<std::string, double> parse_delays(const std::vector<std::string>& specs) {
  std::map<std::string, double> out;
  for (const auto& s : specs) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon == 0) throw std::runtime_error("--inject-delay expects stream:seconds, got " + s);
    const std::string stream = s.substr(0, colon);
    if (!StreamKey::parse(stream)) throw std::runtime_error("unknown stream name " + stream);
    try {
      out[stream] = std::stod(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw std::runtime_error("bad delay in " + s);
    }
  }
  return out;
}

struct FuseArgs {
  std::string config, log, out = ".";
  double lag = 0.0, rate = 0.0;
  std::vector<std::string> delays;
  bool no_random_walk = false, origin_anchoring = false;
};

void add_fuse_flags(CLI::App* cmd, FuseArgs& a) {
  cmd->add_option("--log", a.log, "JSONL measurement log")->required()->check(CLI::ExistingFile);
  cmd->add_option("--config", a.config, "estimator JSON config")->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_option("--lag", a.lag, "smoother lag [s]");
  cmd->add_option("--rate", a.rate, "navigation state rate [Hz]");
  cmd->add_option("--inject-delay", a.delays, "per-stream arrival delay, e.g. abs_pos:G:0.5");
  cmd->add_flag("--no-random-walk", a.no_random_walk, "one static alignment per reference frame");
  cmd->add_flag("--origin-anchoring", a.origin_anchoring, "anchor alignments at the frame origin");
}

EstimatorConfig fuse_config(const FuseArgs& a) {
  EstimatorConfig cfg = a.config.empty() ? EstimatorConfig{} : load_estimator_config(a.config);
  if (a.lag > 0.0) cfg.lag = a.lag;
  if (a.rate > 0.0) cfg.graph.state_rate = a.rate;
  if (a.no_random_walk) cfg.graph.random_walk = false;
  if (a.origin_anchoring) cfg.graph.origin_anchoring = true;
  return cfg;
}

// T_W,R of every non-world frame at each state time of the solution.
std::vector<DriftRow> graph_drift(const HolisticGraph& g) {
  std::vector<DriftRow> rows;
  for (const auto& [frame, chain] : g.ref_frames()) {
    if (frame == kWorldFrame) continue;
    for (long j = g.first_state(); j <= g.last_state(); ++j) {
      const double t = g.state_time(j);
      if (auto T = g.alignment_at(frame, t)) rows.push_back({frame, t, *T});
    }
  }
  return rows;
}

int cmd_simulate(const std::string& config, const std::string& scenario, std::optional<std::uint64_t> seed,
                 const fs::path& out) {
  ScenarioConfig sc;
  if (!config.empty()) {
    sc = scenario_from_json(read_file(config));
  } else {
    const auto all = standard_scenarios();
    const auto it = all.find(scenario);
    if (it == all.end()) throw std::runtime_error("unknown scenario " + scenario);
    sc = it->second;
  }
  if (seed) sc.seed = *seed;
  const SimResult sim = generate(sc);
  fs::create_directories(out);
  write_log(sim.log, (out / "log.jsonl").string());
  write_ground_truth(sim.gt, out);
  write_file(out / "scenario.json", scenario_to_json(sc));
  EstimatorConfig fusion;
  fusion.initial_yaw = sim.initial_yaw;
  write_file(out / "fusion.json", estimator_config_to_json(fusion));
  std::printf("%zu measurements, %.1f s -> %s\n", sim.log.size(), sc.duration, out.string().c_str());
  return 0;
}

int cmd_fuse_online(const FuseArgs& a) {
  const MeasurementLog log = parse_log(a.log);
  const EstimatorConfig cfg = fuse_config(a);
  const OnlineRun run = run_online(log, cfg, parse_delays(a.delays));
  const fs::path out = a.out;
  fs::create_directories(out);
  write_tum(out / "world.tum", run.world);
  write_tum(out / "odom.tum", run.odom);
  for (const auto& [frame, traj] : run.frames) write_tum(out / ("frame_" + frame + ".tum"), traj);
  Trajectory states;
  for (const auto& [j, x] : run.states) states.push_back(x.t, x.pose());
  write_tum(out / "states.tum", states);
  write_drift_csv(out / "drift.csv", run.drift_trace);
  write_keyframe_trace_csv(out / "keyframes.csv", run.keyframe_trace);
  write_epochs_csv(out / "epochs.csv", run.epochs);
  for (const auto& d : run.dropped)
    std::fprintf(stderr, "dropped %s at t=%.3f: %s\n", stream_of(d.meas).name().c_str(), meas_time(d.meas),
                 d.reason.c_str());
  std::printf("%zu epochs, %zu world samples, %zu dropped -> %s\n", run.epochs.size(), run.world.size(),
              run.dropped.size(), out.string().c_str());
  return 0;
}

int cmd_fuse_offline(const FuseArgs& a, bool online_init, bool identity_init) {
  const MeasurementLog log = parse_log(a.log);
  const EstimatorConfig cfg = fuse_config(a);
  BatchOptions opts;
  opts.delays = parse_delays(a.delays);
  OnlineRun online;
  if (online_init) {
    online = run_online(log, cfg, opts.delays);
    opts.init = BatchInit::Online;
    opts.online_states = &online.states;
  } else if (identity_init) {
    opts.init = BatchInit::Identity;
  }
  opts.compute_marginals = cfg.marginal_stride > 0;
  const BatchResult res = batch_optimize(log, cfg, opts);
  const fs::path out = a.out;
  fs::create_directories(out);
  write_tum(out / "batch.tum", res.trajectory);
  write_marginals_csv(out / "marginals.csv", res.marginals);
  write_drift_csv(out / "drift.csv", graph_drift(res.graph));
  const SolverReport& r = res.report;
  nlohmann::json summary = {{"iterations", r.iterations},     {"initial_cost", r.initial_cost},
                            {"final_cost", r.final_cost},     {"converged", r.converged},
                            {"gradient_norm", r.gradient_norm}, {"message", r.message},
                            {"num_states", res.num_states},   {"num_dynamic", res.num_dynamic}};
  write_file(out / "summary.json", summary.dump(2) + "\n");
  std::printf("%d iterations, cost %.6e -> %.6e (%s), %zu states -> %s\n", r.iterations, r.initial_cost,
              r.final_cost, r.converged ? "converged" : "not converged", res.num_states, out.string().c_str());
  return 0;
}

int cmd_eval(const std::string& est_path, const std::string& ref_path, const std::string& out, const EvalOptions& o) {
  const Trajectory est = read_tum(fs::path(est_path));
  const Trajectory ref = read_tum(fs::path(ref_path));
  const Evaluation e = evaluate(est, ref, o);
  std::cout << format_report(e.report);
  if (!out.empty()) {
    fs::create_directories(out);
    write_report_csv(fs::path(out) / "metrics.csv", e.report);
    write_plot_csv(fs::path(out) / "errors.csv", e, est, ref, o.max_dt);
  }
  return 0;
}

void write_traj_csv(const fs::path& path, const Trajectory& traj) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "t,x,y,z,qx,qy,qz,qw\n";
  for (const auto& s : traj) {
    std::string line = format_tum_line(s.t, s.pose);
    std::replace(line.begin(), line.end(), ' ', ',');
    f << line << '\n';
  }
}

Trajectory read_traj_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string line, text;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    text += line + '\n';
  }
  std::istringstream is(text);
  return read_tum(is);
}

// tum-csv | csv-tum | drift-tum | log-imu
int cmd_export(const std::string& what, const std::string& in, const fs::path& out) {
  if (what == "tum-csv") {
    write_traj_csv(out, read_tum(fs::path(in)));
  } else if (what == "csv-tum") {
    write_tum(out, read_traj_csv(in));
  } else if (what == "drift-tum") {
    std::map<FrameId, Trajectory> frames;
    for (const auto& r : read_drift_csv(in)) frames[r.frame].push_back(r.t, r.T_WR);
    fs::create_directories(out);
    for (const auto& [frame, traj] : frames) write_tum(out / ("drift_" + frame + ".tum"), traj);
  } else if (what == "log-imu") {
    const MeasurementLog log = parse_log(in);
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out.string());
    f << "t,ax,ay,az,gx,gy,gz\n";
    char buf[256];
    for (const auto& s : log.imu()) {
      std::snprintf(buf, sizeof buf, "%.9f,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", s.t, s.accel.x(), s.accel.y(),
                    s.accel.z(), s.gyro.x(), s.gyro.y(), s.gyro.z());
      f << buf;
    }
  } else {
    throw std::runtime_error("unknown export " + what);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Holistic IMU-centric sensor fusion"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "generate a synthetic log and ground truth");
  std::string sim_config, scenario = "hike-like", sim_out = ".";
  std::optional<std::uint64_t> seed;
  sim->add_option("--config", sim_config, "scenario JSON")->check(CLI::ExistingFile);
  sim->add_option("--scenario", scenario, "standard scenario name");
  sim->add_option("--seed", seed, "RNG seed");
  sim->add_option("--out", sim_out, "output directory");

  FuseArgs online_args, offline_args;
  auto* online = app.add_subcommand("fuse-online", "replay a log through the fixed-lag estimator");
  add_fuse_flags(online, online_args);
  auto* offline = app.add_subcommand("fuse-offline", "batch-smooth a whole log");
  add_fuse_flags(offline, offline_args);
  bool online_init = false, identity_init = false;
  offline->add_flag("--online-init", online_init, "initialize from an online run");
  offline->add_flag("--identity-init", identity_init, "initialize every state at the origin")->excludes("--online-init");

  auto* ev = app.add_subcommand("eval", "compare an estimate against a reference");
  std::string est_path, ref_path, eval_out;
  EvalOptions eopts;
  bool no_align = false;
  ev->add_option("--est", est_path, "estimate (TUM)")->required()->check(CLI::ExistingFile);
  ev->add_option("--ref", ref_path, "reference (TUM)")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "directory for metrics.csv and errors.csv");
  ev->add_option("--delta", eopts.delta, "RTE/RRE pair spacing [m]");
  ev->add_option("--rate", eopts.rate, "estimate rate for jerk [Hz] (default: from stamps)");
  ev->add_option("--jump-threshold", eopts.jump_threshold, "NOJ displacement threshold [m]");
  ev->add_option("--max-dt", eopts.max_dt, "association tolerance [s]");
  ev->add_flag("--no-align", no_align, "skip Umeyama alignment");

  auto* ex = app.add_subcommand("export", "format conversions");
  std::string what, ex_in, ex_out;
  ex->add_option("what", what, "tum-csv | csv-tum | drift-tum | log-imu")
      ->required()
      ->check(CLI::IsMember({"tum-csv", "csv-tum", "drift-tum", "log-imu"}));
  ex->add_option("--in", ex_in, "input file")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", ex_out, "output file (directory for drift-tum)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) return cmd_simulate(sim_config, scenario, seed, sim_out);
    if (*online) return cmd_fuse_online(online_args);
    if (*offline) return cmd_fuse_offline(offline_args, online_init, identity_init);
    if (*ev) {
      eopts.align = !no_align;
      return cmd_eval(est_path, ref_path, eval_out, eopts);
    }
    if (*ex) return cmd_export(what, ex_in, ex_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
