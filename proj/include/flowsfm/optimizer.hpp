#pragma once

// Per-scene optimization: depth (and the weight head) are the free variables;
// poses come from Procrustes, the focal from soft selection (stage 1) and
// then direct regression (stage 2). Ablation flags swap in explicit variables.

#include "flowsfm/depthparam.hpp"
#include "flowsfm/evalio.hpp"
#include "flowsfm/intrinsicsolver.hpp"
#include "flowsfm/loss.hpp"
#include "flowsfm/posesolver.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace flowsfm {

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AblationMode {
  bool explicit_depth = false;             // per-pixel depth instead of the coarse grid
  bool explicit_pose = false;              // Euler + translation per frame, frame 0 fixed
  bool explicit_focal_from_start = false;  // focal is a free variable from step 0
  bool no_tracks = false;
  bool no_weights = false;
  bool single_stage = false;               // soft focal for the whole run

  [[nodiscard]] std::string describe() const;  // "full" or "+"-joined flag names
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerConfig {
  int stage1_steps = 1000;
  int stage2_steps = 1000;
  double lr = 3e-5;
  std::map<std::string, double> group_lr;  // overrides for "depth", "head", "focal", "pose"
  AdamConfig adam;
  LossConfig loss;
  AblationMode ablation;
  DepthConfig depth;  // stride 0: chosen from the image width (16 cells across)
  double candidate_min = 0.5;
  double candidate_max = 2.0;
  int candidate_count = 60;
  double temperature = 10.0;
  int sample_nx = 32;
  int sample_ny = 32;
  double explicit_focal_init = 1.0;
  std::uint64_t seed = 0;
  bool early_stop = false;
  double early_stop_delta = 1e-9;
  int early_stop_window = 100;
  std::vector<int> frames;  // subset of input frames, empty = all
  std::string output_dir;

  /// Learning rates tuned for the coarse-grid depth on width-normalized
  /// scenes; see README.
  static OptimizerConfig tuned();
  [[nodiscard]] int total_steps() const;
  [[nodiscard]] double learning_rate(const std::string& group) const;
};

/// Missing keys keep `base` values; unknown keys are an error.
OptimizerConfig config_from_json(const std::string& text, const OptimizerConfig& base = OptimizerConfig::tuned());
OptimizerConfig load_config(const std::filesystem::path& path, const OptimizerConfig& base = OptimizerConfig::tuned());
std::string config_to_json(const OptimizerConfig& config);

/// Adam with bias correction; `t` is the 1-based step.
void adam_update(ad::Array& value, ad::Array& m, ad::Array& v, const ad::Array& grad, double lr,
                 const AdamConfig& cfg, int t);

/// Everything the optimizer needs from a dataset.
struct Problem {
  int width = 0;
  int height = 0;
  int frames = 0;
  std::vector<FlowField> flows;  // adjacent pairs k -> k+1
  TrackSet tracks;
  std::optional<GroundTruth> gt;  // evaluation only, never seen by the loss
};

/// Restricts a dataset to the selected frames. Flow exists only between
/// consecutive input frames, so the selection must be contiguous.
Problem select_frames(const Dataset& data, const std::vector<int>& frames);
Problem make_problem(const Dataset& data);

struct OptState {
  std::vector<ad::Parameter> params;  // depth, head, then focal / pose when active
  std::vector<ad::Array> m;
  std::vector<ad::Array> v;
  StageState stage;
  int step = 0;
  std::uint64_t seed = 0;
};

struct StepReport {
  int step = 0;  // 1-based index of the step just taken
  int stage = 1;
  LossBreakdown loss;
  double focal = 0.0;
  std::optional<double> ate;
};

struct Estimate {
  double focal = 0.0;
  Trajectory cam_to_world;
  std::vector<Eigen::ArrayXd> depths;
};

class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, Problem problem);
  ~Optimizer();
  Optimizer(const Optimizer&) = delete;
  Optimizer& operator=(const Optimizer&) = delete;

  /// Forward, backward and one Adam update. Throws OptimizerError on a
  /// non-finite loss or gradient, naming the offending term.
  StepReport step();
  /// Runs the configured schedule; `on_step` sees every report.
  std::vector<StepReport> run(const std::function<void(const StepReport&)>& on_step = {});

  /// Current poses, focal and depth without changing the state.
  [[nodiscard]] Estimate estimate() const;
  [[nodiscard]] const OptState& state() const { return state_; }
  [[nodiscard]] const OptimizerConfig& config() const { return config_; }
  [[nodiscard]] const Problem& problem() const { return problem_; }
  /// Number of Procrustes solves so far (zero in explicit-pose mode).
  [[nodiscard]] std::size_t procrustes_calls() const { return procrustes_calls_; }

  /// Total loss and leaf gradients at the current state (no update); used by
  /// gradient checks. Order matches state().params.
  struct Evaluation {
    LossBreakdown loss;
    double focal = 0.0;
    std::vector<ad::Array> grads;
  };
  [[nodiscard]] Evaluation evaluate();
  /// Replaces a parameter value (same shape).
  void set_param(std::size_t index, const ad::Array& value);

 private:
  struct Forward;
  struct Pair;
  Forward forward(ad::Graph& g, bool for_estimate) const;
  void add_param(ad::Parameter p);
  [[nodiscard]] std::optional<std::size_t> find_param(const std::string& name) const;

  OptimizerConfig config_;
  Problem problem_;
  Intrinsics extents_;
  DepthModel depth_;
  std::unique_ptr<WeightHead> head_;
  FocalCandidates candidates_;
  std::vector<Pair> pairs_;
  ad::Array grid_norm_all_;  // sample-grid features of every pair, stacked
  ad::Array grid_flow_all_;
  std::vector<FlowPairData> flow_data_;
  std::vector<TrackPairData> track_data_;
  OptState state_;
  mutable std::size_t procrustes_calls_ = 0;
};

struct RunOutputs {
  std::vector<StepReport> history;
  Estimate estimate;
  Metrics metrics;
};

/// Loss CSV header: step,stage,total,flow,track,focal,ate
void write_loss_csv(const std::filesystem::path& path, const std::vector<StepReport>& history);

/// Metrics against an optional ground truth; focal and metadata always set.
Metrics evaluate_estimate(const Estimate& est, const Problem& problem, const OptimizerConfig& config);

/// Writes loss.csv, trajectory.txt, intrinsics.json, depth/depth_XXXX.pfm,
/// points.ply and metrics.json into `dir`.
void write_outputs(const std::filesystem::path& dir, const RunOutputs& out, const Problem& problem);
/// Reads trajectory.txt, intrinsics.json and depth/depth_XXXX.pfm back.
Estimate read_estimate(const std::filesystem::path& dir);

}  // namespace flowsfm
