// Command-line front end: synth, solve, eval, export-ply.
//
// Exit codes: 0 success, 2 degenerate input, 1 any other failure.

#include "flowsfm/evalio.hpp"
#include "flowsfm/optimizer.hpp"
#include "flowsfm/synthworld.hpp"

#include <CLI11.hpp>

#include <chrono>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace flowsfm;
namespace fs = std::filesystem;

namespace {

constexpr int kExitDegenerate = 2;

// "a-b" or "a,b,c" into an explicit list.
std::vector<int> parse_frames(const std::string& text) {
  std::vector<int> out;
  if (text.empty()) return out;
  const auto dash = text.find('-');
  if (dash != std::string::npos && text.find(',') == std::string::npos) {
    const int a = std::stoi(text.substr(0, dash));
    const int b = std::stoi(text.substr(dash + 1));
    for (int k = a; k <= b; ++k) out.push_back(k);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

struct SynthArgs {
  std::string out;
  std::string scene = "blob";
  std::string trajectory = "orbit";
  SceneSpec spec;
  NoiseSpec noise;
};

int run_synth(const SynthArgs& a) {
  SceneSpec spec = a.spec;
  spec.scene = parse_scene_kind(a.scene);
  spec.trajectory = parse_trajectory_kind(a.trajectory);
  SceneGT scene = generate(spec);
  Correspondences corr = render_correspondences(scene, a.noise);
  write_scene(a.out, scene, corr, a.noise);
  std::cout << "wrote " << scene.poses.size() << " frames to " << a.out << "\n";
  return 0;
}

struct SolveArgs {
  std::string data;
  std::string out;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> stage1_steps, stage2_steps;
  std::optional<double> lr, lambda_track, temperature;
  std::string frames;
  std::vector<std::string> ablations;
  bool timings = false;
  int log_every = 100;
};

void apply_ablation(AblationMode& m, const std::string& name) {
  if (name == "explicit_depth") m.explicit_depth = true;
  else if (name == "explicit_pose") m.explicit_pose = true;
  else if (name == "explicit_focal_from_start") m.explicit_focal_from_start = true;
  else if (name == "no_tracks") m.no_tracks = true;
  else if (name == "no_weights") m.no_weights = true;
  else if (name == "single_stage") m.single_stage = true;
  else throw std::invalid_argument("unknown ablation '" + name + "'");
}

int run_solve(const SolveArgs& a) {
  OptimizerConfig cfg = a.config.empty() ? OptimizerConfig::tuned() : load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.stage1_steps) cfg.stage1_steps = *a.stage1_steps;
  if (a.stage2_steps) cfg.stage2_steps = *a.stage2_steps;
  if (a.lr) cfg.lr = *a.lr;
  if (a.lambda_track) cfg.loss.lambda_track = *a.lambda_track;
  if (a.temperature) cfg.temperature = *a.temperature;
  if (!a.frames.empty()) cfg.frames = parse_frames(a.frames);
  for (const auto& name : a.ablations) apply_ablation(cfg.ablation, name);
  const fs::path out = a.out.empty() ? fs::path(cfg.output_dir) : fs::path(a.out);
  if (out.empty()) throw std::invalid_argument("no output directory (use --out or output_dir in the config)");
  cfg.output_dir = out.string();

  const auto t0 = std::chrono::steady_clock::now();
  Dataset data = load_dataset(a.data);
  if (data.dropped_tracks > 0) std::cerr << "dropped " << data.dropped_tracks << " tracks with < 2 observations\n";
  Problem problem = select_frames(data, cfg.frames);
  Optimizer opt(cfg, problem);
  RunOutputs res;
  res.history = opt.run([&](const StepReport& r) {
    if (a.log_every > 0 && (r.step % a.log_every == 0 || r.step == 1)) {
      std::fprintf(stderr, "step %5d  stage %d  loss %.6e  focal %.5f\n", r.step, r.stage, r.loss.total, r.focal);
    }
  });
  res.estimate = opt.estimate();
  res.metrics = evaluate_estimate(res.estimate, opt.problem(), cfg);
  if (a.timings) {
    res.metrics.runtimes["solve_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  write_outputs(out, res, opt.problem());
  std::ofstream(out / "config.json") << config_to_json(cfg);
  std::cout << metrics_json(res.metrics);
  return 0;
}

int run_eval(const std::string& data_dir, const std::string& result_dir, const std::string& out) {
  OptimizerConfig cfg = OptimizerConfig::tuned();
  if (fs::exists(fs::path(result_dir) / "config.json")) cfg = load_config(fs::path(result_dir) / "config.json");
  Dataset data = load_dataset(data_dir);
  Problem problem = select_frames(data, cfg.frames);
  Estimate est = read_estimate(result_dir);
  if (static_cast<int>(est.cam_to_world.size()) != problem.frames) {
    throw EvalError("result has " + std::to_string(est.cam_to_world.size()) + " frames, dataset selection has " +
                    std::to_string(problem.frames));
  }
  Metrics m = evaluate_estimate(est, problem, cfg);
  if (!out.empty()) write_metrics_json(out, m);
  std::cout << metrics_json(m);
  return 0;
}

int run_export(const std::string& result_dir, const std::string& out) {
  Estimate est = read_estimate(result_dir);
  if (est.depths.empty()) throw EvalError("result has no frames");
  int w = 0, h = 0;
  read_pfm(fs::path(result_dir) / "depth" / "depth_0000.pfm", &w, &h);
  export_ply(out, est.depths, est.cam_to_world, Intrinsics(est.focal, w, h));
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // The tape allocates and frees the same large arrays every step; keep them
  // off mmap so each step does not pay for fresh zeroed pages.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // the glibc maximum on 64-bit
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Structure from motion by gradient descent on dense correspondences"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* sc = app.add_subcommand("synth", "Generate a synthetic scene with exact flow, tracks and ground truth");
  sc->add_option("--out", synth.out, "Output directory")->required();
  sc->add_option("--scene", synth.scene, "blob | plane | flat")->capture_default_str();
  sc->add_option("--trajectory", synth.trajectory, "orbit | forward | rotation | lateral | static")
      ->capture_default_str();
  sc->add_option("--frames", synth.spec.frames, "Frame count")->capture_default_str();
  sc->add_option("--width", synth.spec.width, "Image width")->capture_default_str();
  sc->add_option("--height", synth.spec.height, "Image height")->capture_default_str();
  sc->add_option("--focal", synth.spec.focal, "Focal length (width-normalized)")->capture_default_str();
  sc->add_option("--seed", synth.spec.seed, "Scene seed")->capture_default_str();
  sc->add_option("--dense-frames", synth.spec.dense_frames, "Render this many frames, subsample by flow");
  sc->add_option("--orbit-step", synth.spec.orbit_step_deg, "Orbit step in degrees")->capture_default_str();
  sc->add_option("--translation-step", synth.spec.translation_step)->capture_default_str();
  sc->add_option("--rotation-step", synth.spec.rotation_step_deg)->capture_default_str();
  sc->add_option("--flow-sigma", synth.noise.flow_sigma, "Flow noise (width-normalized)");
  sc->add_option("--track-sigma", synth.noise.track_sigma);
  sc->add_option("--track-dropout", synth.noise.track_dropout);
  sc->add_option("--outlier-fraction", synth.noise.outlier_fraction);
  sc->add_option("--outlier-magnitude", synth.noise.outlier_magnitude)->capture_default_str();
  sc->add_option("--noise-seed", synth.noise.seed)->capture_default_str();

  SolveArgs solve;
  auto* so = app.add_subcommand("solve", "Optimize depth, poses and focal for a dataset");
  so->add_option("--data", solve.data, "Dataset directory")->required();
  so->add_option("--out", solve.out, "Output directory");
  so->add_option("--config", solve.config, "Config JSON (keys override the tuned defaults)");
  so->add_option("--seed", solve.seed, "Seed for the weight head");
  so->add_option("--stage1-steps", solve.stage1_steps);
  so->add_option("--stage2-steps", solve.stage2_steps);
  so->add_option("--lr", solve.lr, "Base learning rate");
  so->add_option("--lambda-track", solve.lambda_track);
  so->add_option("--temperature", solve.temperature, "Softmin temperature");
  so->add_option("--frames", solve.frames, "Contiguous frame range a-b");
  so->add_option("--ablation", solve.ablations,
                 "explicit_depth, explicit_pose, explicit_focal_from_start, no_tracks, no_weights, single_stage");
  so->add_flag("--timings", solve.timings, "Record wall-clock runtime in metrics.json");
  so->add_option("--log-every", solve.log_every, "Progress interval in steps (0 = silent)")->capture_default_str();

  std::string eval_data, eval_result, eval_out;
  std::uint64_t unused_seed = 0;
  auto* ev = app.add_subcommand(
      "eval", "Metrics of a solve result against the dataset ground truth. ATE normalizes both trajectories "
              "(centred, tr(XX^T) = 1) and aligns them with the best rotation before the RMSE.");
  ev->add_option("--data", eval_data, "Dataset directory")->required();
  ev->add_option("--result", eval_result, "Output directory of solve")->required();
  ev->add_option("--out", eval_out, "Write metrics JSON here");
  ev->add_option("--seed", unused_seed, "Accepted for uniformity; evaluation is deterministic");

  std::string ply_result, ply_out;
  auto* ex = app.add_subcommand("export-ply", "Fuse the depth maps of a solve result into a PLY point cloud");
  ex->add_option("--result", ply_result, "Output directory of solve")->required();
  ex->add_option("--out", ply_out, "PLY path")->required();
  ex->add_option("--seed", unused_seed, "Accepted for uniformity; export is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sc) return run_synth(synth);
    if (*so) return run_solve(solve);
    if (*ev) return run_eval(eval_data, eval_result, eval_out);
    if (*ex) return run_export(ply_result, ply_out);
  } catch (const DegenerateInput& e) {
    std::cerr << "degenerate input: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const PoseSolverError& e) {
    std::cerr << "degenerate input: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
