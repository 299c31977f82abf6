#include "flowsfm/optimizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace flowsfm {

using ad::Array;
using ad::Index;
using ad::Tensor;
using nlohmann::json;

std::string AblationMode::describe() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += "+";
    out += name;
  };
  add(explicit_depth, "explicit_depth");
  add(explicit_pose, "explicit_pose");
  add(explicit_focal_from_start, "explicit_focal_from_start");
  add(no_tracks, "no_tracks");
  add(no_weights, "no_weights");
  add(single_stage, "single_stage");
  return out.empty() ? "full" : out;
}

OptimizerConfig OptimizerConfig::tuned() {
  OptimizerConfig c;
  // Raw grid values live on a softplus scale of order 1; at 3e-5 they barely
  // move in 2000 steps. A stride-8 grid is 8x6 at 64x48, too coarse for the
  // loss to settle, and stage 2 then drags the focal down to compensate.
  c.group_lr = {{"depth", 2e-3}, {"head", 3e-5}, {"focal", 5e-4}, {"pose", 1e-3}};
  c.depth.stride = 0;
  return c;
}

int OptimizerConfig::total_steps() const { return stage1_steps + stage2_steps; }

double OptimizerConfig::learning_rate(const std::string& group) const {
  auto it = group_lr.find(group);
  return it == group_lr.end() ? lr : it->second;
}

// --- config JSON -----------------------------------------------------------

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw OptimizerError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw OptimizerError("config: unknown key '" + where + it.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

OptimizerConfig config_from_json(const std::string& text, const OptimizerConfig& base) {
  OptimizerConfig c = base;
  json j;
  try {
    j = json::parse(text);
    check_keys(j,
               {"stage1_steps", "stage2_steps", "lr", "group_lr", "adam", "lambda_track", "loss_epsilon",
                "ablation", "depth", "candidates", "sample_grid", "explicit_focal_init", "seed", "early_stop",
                "frames", "output_dir"},
               "");
    read(j, "stage1_steps", c.stage1_steps);
    read(j, "stage2_steps", c.stage2_steps);
    read(j, "lr", c.lr);
    if (j.contains("group_lr")) {
      check_keys(j["group_lr"], {"depth", "head", "focal", "pose"}, "group_lr.");
      for (auto it = j["group_lr"].begin(); it != j["group_lr"].end(); ++it) c.group_lr[it.key()] = it->get<double>();
    }
    if (j.contains("adam")) {
      const json& a = j["adam"];
      check_keys(a, {"beta1", "beta2", "epsilon"}, "adam.");
      read(a, "beta1", c.adam.beta1);
      read(a, "beta2", c.adam.beta2);
      read(a, "epsilon", c.adam.epsilon);
    }
    read(j, "lambda_track", c.loss.lambda_track);
    read(j, "loss_epsilon", c.loss.epsilon);
    if (j.contains("ablation")) {
      const json& a = j["ablation"];
      check_keys(a,
                 {"explicit_depth", "explicit_pose", "explicit_focal_from_start", "no_tracks", "no_weights",
                  "single_stage"},
                 "ablation.");
      read(a, "explicit_depth", c.ablation.explicit_depth);
      read(a, "explicit_pose", c.ablation.explicit_pose);
      read(a, "explicit_focal_from_start", c.ablation.explicit_focal_from_start);
      read(a, "no_tracks", c.ablation.no_tracks);
      read(a, "no_weights", c.ablation.no_weights);
      read(a, "single_stage", c.ablation.single_stage);
    }
    if (j.contains("depth")) {
      const json& d = j["depth"];
      check_keys(d, {"kind", "stride", "floor"}, "depth.");
      if (d.contains("kind")) {
        const std::string k = d["kind"].get<std::string>();
        if (k != "grid" && k != "free") throw OptimizerError("config: depth.kind must be 'grid' or 'free'");
        c.depth.kind = k == "grid" ? DepthKind::Grid : DepthKind::Free;
      }
      read(d, "stride", c.depth.stride);
      read(d, "floor", c.depth.floor);
    }
    if (j.contains("candidates")) {
      const json& d = j["candidates"];
      check_keys(d, {"min", "max", "count", "temperature"}, "candidates.");
      read(d, "min", c.candidate_min);
      read(d, "max", c.candidate_max);
      read(d, "count", c.candidate_count);
      read(d, "temperature", c.temperature);
    }
    if (j.contains("sample_grid")) {
      check_keys(j["sample_grid"], {"nx", "ny"}, "sample_grid.");
      read(j["sample_grid"], "nx", c.sample_nx);
      read(j["sample_grid"], "ny", c.sample_ny);
    }
    read(j, "explicit_focal_init", c.explicit_focal_init);
    read(j, "seed", c.seed);
    if (j.contains("early_stop")) {
      const json& e = j["early_stop"];
      check_keys(e, {"enabled", "delta", "window"}, "early_stop.");
      read(e, "enabled", c.early_stop);
      read(e, "delta", c.early_stop_delta);
      read(e, "window", c.early_stop_window);
    }
    read(j, "frames", c.frames);
    read(j, "output_dir", c.output_dir);
  } catch (const json::exception& e) {
    throw OptimizerError(std::string("config: ") + e.what());
  }
  if (c.stage1_steps < 0 || c.stage2_steps < 0) throw OptimizerError("config: step counts must be >= 0");
  if (!(c.lr > 0)) throw OptimizerError("config: lr must be positive");
  for (const auto& [g, v] : c.group_lr)
    if (!(v > 0)) throw OptimizerError("config: group_lr." + g + " must be positive");
  if (c.candidate_count < 2 || !(c.candidate_min > 0) || !(c.candidate_max > c.candidate_min)) {
    throw OptimizerError("config: candidates need count >= 2 and 0 < min < max");
  }
  if (c.sample_nx < 2 || c.sample_ny < 2) throw OptimizerError("config: sample_grid must be at least 2 x 2");
  if (c.depth.stride < 0) throw OptimizerError("config: depth.stride must be >= 1, or 0 for automatic");
  return c;
}

OptimizerConfig load_config(const std::filesystem::path& path, const OptimizerConfig& base) {
  std::ifstream in(path);
  if (!in) throw OptimizerError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str(), base);
}

std::string config_to_json(const OptimizerConfig& c) {
  nlohmann::ordered_json j;
  j["stage1_steps"] = c.stage1_steps;
  j["stage2_steps"] = c.stage2_steps;
  j["lr"] = c.lr;
  j["group_lr"] = nlohmann::ordered_json::object();
  for (const auto& [g, v] : c.group_lr) j["group_lr"][g] = v;
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
  j["lambda_track"] = c.loss.lambda_track;
  j["loss_epsilon"] = c.loss.epsilon;
  j["ablation"] = {{"explicit_depth", c.ablation.explicit_depth},
                   {"explicit_pose", c.ablation.explicit_pose},
                   {"explicit_focal_from_start", c.ablation.explicit_focal_from_start},
                   {"no_tracks", c.ablation.no_tracks},
                   {"no_weights", c.ablation.no_weights},
                   {"single_stage", c.ablation.single_stage}};
  j["depth"] = {{"kind", c.depth.kind == DepthKind::Grid ? "grid" : "free"},
                {"stride", c.depth.stride},
                {"floor", c.depth.floor}};
  j["candidates"] = {{"min", c.candidate_min},
                     {"max", c.candidate_max},
                     {"count", c.candidate_count},
                     {"temperature", c.temperature}};
  j["sample_grid"] = {{"nx", c.sample_nx}, {"ny", c.sample_ny}};
  j["explicit_focal_init"] = c.explicit_focal_init;
  j["seed"] = c.seed;
  j["early_stop"] = {{"enabled", c.early_stop}, {"delta", c.early_stop_delta}, {"window", c.early_stop_window}};
  j["frames"] = c.frames;
  j["output_dir"] = c.output_dir;
  return j.dump(2) + "\n";
}

// --- Adam --------------------------------------------------------------------

void adam_update(Array& value, Array& m, Array& v, const Array& grad, double lr, const AdamConfig& cfg, int t) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.square();
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  value -= lr * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
}

// --- problem -----------------------------------------------------------------

Problem make_problem(const Dataset& data) {
  Problem p;
  p.width = data.width;
  p.height = data.height;
  p.frames = data.frames;
  p.flows = data.flows;
  p.tracks = data.tracks;
  p.gt = data.gt;
  return p;
}

Problem select_frames(const Dataset& data, const std::vector<int>& frames) {
  if (frames.empty()) return make_problem(data);
  if (frames.size() < 2) throw OptimizerError("frame selection needs at least 2 frames");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    if (frames[k] < 0 || frames[k] >= data.frames) throw OptimizerError("frame selection out of range");
    if (k > 0 && frames[k] != frames[k - 1] + 1) {
      throw OptimizerError("frame selection must be contiguous (flow only links consecutive frames)");
    }
  }
  const int first = frames.front();
  const int n = static_cast<int>(frames.size());
  Problem p;
  p.width = data.width;
  p.height = data.height;
  p.frames = n;
  for (int k = 0; k + 1 < n; ++k) {
    FlowField f = data.flows.at(static_cast<std::size_t>(first + k));
    f.source = k;
    p.flows.push_back(std::move(f));
  }
  p.tracks.frame_count = n;
  for (const Track& t : data.tracks.tracks) {
    if (t.query_frame < first || t.query_frame >= first + n) continue;
    Track s;
    s.query_frame = t.query_frame - first;
    s.position.assign(t.position.begin() + first, t.position.begin() + first + n);
    s.visible.assign(t.visible.begin() + first, t.visible.begin() + first + n);
    p.tracks.tracks.push_back(std::move(s));
  }
  p.tracks.prune();
  if (data.gt) {
    GroundTruth g;
    g.focal = data.gt->focal;
    g.poses.assign(data.gt->poses.begin() + first, data.gt->poses.begin() + first + n);
    if (!data.gt->depths.empty()) g.depths.assign(data.gt->depths.begin() + first, data.gt->depths.begin() + first + n);
    p.gt = std::move(g);
  }
  return p;
}

// --- optimizer ---------------------------------------------------------------

struct Optimizer::Pair {
  PairSamples samples;
  Array grid_px;    // [G,2] every sample-grid point, raw pixels
  Array grid_norm;  // [G,2]
  Array grid_flow;  // [G,2] zero where the flow is invalid
  Array upsample;   // [M,2] weight-map coordinates of the flow pixels
  std::vector<Index> sample_rows;  // rows of the batched head output
  std::vector<Index> map_rows;
  int nx = 0;
  int ny = 0;
};

struct Optimizer::Forward {
  std::vector<Tensor> leaves;  // aligned with state_.params
  std::vector<Tensor> depths;
  Tensor focal;
  std::vector<geo::PoseTensor> cam_to_world;
  LossTerms terms;
};

namespace {

// Stride 0 picks the stride that spans the width with about this many cells.
constexpr double kAutoGridCells = 16.0;

DepthConfig effective_depth(const OptimizerConfig& c, int width) {
  DepthConfig d = c.depth;
  if (d.stride == 0) d.stride = std::max(2, static_cast<int>(std::lround(width / kAutoGridCells)));
  if (c.ablation.explicit_depth) d.kind = DepthKind::Free;
  return d;
}

}  // namespace

Optimizer::Optimizer(const OptimizerConfig& config, Problem problem)
    : config_(config),
      problem_(std::move(problem)),
      extents_(1.0, problem_.width, problem_.height),
      depth_(effective_depth(config, problem_.width), problem_.width, problem_.height, problem_.frames),
      candidates_(FocalCandidates::uniform(config.candidate_min, config.candidate_max, config.candidate_count,
                                           config.temperature)) {
  if (problem_.frames < 2) throw OptimizerError("need at least 2 frames");
  if (static_cast<int>(problem_.flows.size()) != problem_.frames - 1) {
    throw OptimizerError("expected one flow field per adjacent frame pair");
  }
  state_.seed = config.seed;
  state_.stage.single_stage = config.ablation.single_stage;

  const int w = problem_.width;
  const int h = problem_.height;
  const auto grid = sample_grid(w, h, config.sample_nx, config.sample_ny);
  const int nx = std::min(config.sample_nx, w);
  const int ny = std::min(config.sample_ny, h);
  for (const FlowField& f : problem_.flows) {
    if (f.width != w || f.height != h) throw OptimizerError("flow extents differ from the problem");
    Pair p;
    p.samples = sample_pair(f, grid);
    p.nx = nx;
    p.ny = ny;
    const Index g = static_cast<Index>(grid.size());
    p.grid_px.resize(2 * g);
    p.grid_norm.resize(2 * g);
    p.grid_flow = Array::Zero(2 * g);
    for (Index n = 0; n < g; ++n) {
      const Vec2& u = grid[static_cast<std::size_t>(n)];
      auto t = lookup_correspondence(f, u);
      for (int c = 0; c < 2; ++c) {
        p.grid_norm[2 * n + c] = u[c];
        p.grid_px[2 * n + c] = u[c] * w;
        if (t) p.grid_flow[2 * n + c] = (*t)[c] - u[c];
      }
    }
    flow_data_.push_back(prepare_flow_pair(f));
    const FlowPairData& fd = flow_data_.back();
    p.upsample.resize(2 * fd.size());
    for (Index r = 0; r < fd.size(); ++r) {
      p.upsample[2 * r] = fd.source_norm[2 * r] * w * nx / w;
      p.upsample[2 * r + 1] = fd.source_norm[2 * r + 1] * w * ny / h;
    }
    const Index offset = static_cast<Index>(pairs_.size()) * g;
    for (Index r : p.samples.grid_index) p.sample_rows.push_back(offset + r);
    for (Index r = 0; r < g; ++r) p.map_rows.push_back(offset + r);
    pairs_.push_back(std::move(p));
  }
  const Index all = static_cast<Index>(pairs_.size() * grid.size());
  grid_norm_all_.resize(2 * all);
  grid_flow_all_.resize(2 * all);
  for (std::size_t k = 0; k < pairs_.size(); ++k) {
    grid_norm_all_.segment(static_cast<Index>(k * 2 * grid.size()), pairs_[k].grid_norm.size()) = pairs_[k].grid_norm;
    grid_flow_all_.segment(static_cast<Index>(k * 2 * grid.size()), pairs_[k].grid_flow.size()) = pairs_[k].grid_flow;
  }
  if (!config.ablation.no_tracks && config.loss.lambda_track != 0.0) {
    track_data_ = prepare_tracks(problem_.tracks, w);
  }

  for (auto& p : depth_.params()) add_param(p);
  if (!config.ablation.no_weights) {
    head_ = std::make_unique<WeightHead>(WeightHead::kFeatures, config.seed);
    for (auto& p : head_->params()) add_param(p);
  }
  if (config.ablation.explicit_pose) {
    for (int f = 1; f < problem_.frames; ++f) {
      add_param({"pose." + std::to_string(f) + ".angles", "pose", {3}, Array::Zero(3)});
      add_param({"pose." + std::to_string(f) + ".translation", "pose", {1, 3}, Array::Zero(3)});
    }
  }
  if (config.ablation.explicit_focal_from_start) {
    state_.stage.stage = 2;
    state_.stage.focal = config.explicit_focal_init;
    add_param({"focal", "focal", {1, 1}, Array::Constant(1, config.explicit_focal_init)});
  }
}

Optimizer::~Optimizer() = default;

void Optimizer::add_param(ad::Parameter p) {
  state_.m.push_back(Array::Zero(p.value.size()));
  state_.v.push_back(Array::Zero(p.value.size()));
  state_.params.push_back(std::move(p));
}

std::optional<std::size_t> Optimizer::find_param(const std::string& name) const {
  for (std::size_t i = 0; i < state_.params.size(); ++i)
    if (state_.params[i].name == name) return i;
  return std::nullopt;
}

void Optimizer::set_param(std::size_t index, const Array& value) {
  ad::Parameter& p = state_.params.at(index);
  if (value.size() != p.value.size()) throw OptimizerError("set_param: size mismatch for " + p.name);
  p.value = value;
}

Optimizer::Forward Optimizer::forward(ad::Graph& g, bool for_estimate) const {
  Forward fw;
  for (const auto& p : state_.params) {
    fw.leaves.push_back(for_estimate ? g.constant(p.value, p.shape) : g.leaf(p.value, p.shape));
  }
  const int frames = problem_.frames;
  for (int f = 0; f < frames; ++f) fw.depths.push_back(depth_.emit(g, fw.leaves[static_cast<std::size_t>(f)]));

  // Correspondence weights: the head runs once on the sample grids of all
  // pairs; Procrustes reads it at the surviving samples, the loss reads a
  // bilinear upsample per pixel.
  const std::size_t pairs = pairs_.size();
  std::vector<Tensor> sample_w(pairs), pixel_w(pairs);
  if (head_) {
    std::span<const Tensor> layers = std::span<const Tensor>(fw.leaves).subspan(static_cast<std::size_t>(frames), 6);
    std::vector<Tensor> depth_parts;
    for (std::size_t k = 0; k < pairs; ++k) {
      const Index gsize = pairs_[k].grid_px.size() / 2;
      depth_parts.push_back(ad::grid_sample(fw.depths[k], g.constant(pairs_[k].grid_px, {gsize, 2})));
    }
    const Index total = grid_norm_all_.size() / 2;
    Tensor feats = weight_features(g.constant(grid_norm_all_, {total, 2}), g.constant(grid_flow_all_, {total, 2}),
                                   ad::concat(depth_parts, 0));
    Tensor wall = head_->forward(layers, feats);
    for (std::size_t k = 0; k < pairs; ++k) {
      const Pair& p = pairs_[k];
      const Index n = static_cast<Index>(p.sample_rows.size());
      sample_w[k] = ad::gather(wall, p.sample_rows, {n, 1});
      Tensor map = ad::gather(wall, p.map_rows, {p.ny, p.nx});
      pixel_w[k] = ad::grid_sample(map, g.constant(p.upsample, {flow_data_[k].size(), 2}));
    }
  } else {
    for (std::size_t k = 0; k < pairs; ++k) {
      const Index n = static_cast<Index>(pairs_[k].samples.size());
      sample_w[k] = g.constant(Array::Ones(n), {n, 1});
    }
  }

  // Explicit-pose variables.
  std::vector<geo::PoseTensor> explicit_poses;
  if (config_.ablation.explicit_pose) {
    explicit_poses.push_back(geo::constant_pose(g, PoseSE3::identity()));
    for (int f = 1; f < frames; ++f) {
      const std::size_t a = *find_param("pose." + std::to_string(f) + ".angles");
      explicit_poses.push_back({geo::euler_to_rotation(fw.leaves[a]), fw.leaves[a + 1]});
    }
  }
  auto procrustes = [&](std::size_t k, const Tensor& focal) {
    if (config_.ablation.explicit_pose) throw std::logic_error("Procrustes invoked in explicit-pose mode");
    ++procrustes_calls_;
    const Pair& p = pairs_[k];
    MatchedClouds m = build_matches(fw.depths[k], fw.depths[k + 1], focal, extents_, p.samples, sample_w[k]);
    return solve_procrustes(m);
  };
  auto pose_of_pair = [&](std::size_t k, const Tensor& focal) {
    if (config_.ablation.explicit_pose) return geo::relative_pose(explicit_poses[k], explicit_poses[k + 1]);
    return procrustes(k, focal);
  };

  if (state_.stage.stage == 2) {
    fw.focal = fw.leaves[*find_param("focal")];
  } else {
    SoftFocal soft = soft_select_focal(g, candidates_, [&](double f) {
      Tensor focal = g.constant(f);
      PairLoss pl = flow_pair_loss(flow_data_[0], fw.depths[0], focal, extents_, pose_of_pair(0, focal), pixel_w[0],
                                   config_.loss.epsilon);
      if (pl.count == 0) throw LossError("no valid correspondences for candidate");
      return ad::div(pl.weighted_sum, pl.weight_sum);
    });
    fw.focal = soft.focal;
  }

  LossInputs in;
  in.intrinsics = &extents_;
  in.focal = fw.focal;
  in.depths = fw.depths;
  if (config_.ablation.explicit_pose) {
    for (std::size_t k = 0; k < pairs; ++k) in.adjacent.push_back(pose_of_pair(k, fw.focal));
    in.cam_to_world = explicit_poses;
  } else {
    for (std::size_t k = 0; k < pairs; ++k) in.adjacent.push_back(procrustes(k, fw.focal));
    in.cam_to_world = chain_poses(g, in.adjacent);
  }
  in.flows = &flow_data_;
  in.tracks = &track_data_;
  if (head_) in.pixel_weights = pixel_w;
  fw.cam_to_world = in.cam_to_world;
  if (!for_estimate) fw.terms = total_loss(g, in, config_.loss);
  return fw;
}

Optimizer::Evaluation Optimizer::evaluate() {
  ad::Graph g;
  Forward fw = forward(g, false);
  auto grads = g.backward(fw.terms.total);
  Evaluation e;
  e.loss = breakdown(fw.terms);
  e.focal = fw.focal.item();
  for (const Tensor& leaf : fw.leaves) e.grads.push_back(grads[leaf]);
  return e;
}

StepReport Optimizer::step() {
  if (stage_transition(state_.stage, state_.step, config_.stage1_steps)) {
    add_param({"focal", "focal", {1, 1}, Array::Constant(1, state_.stage.focal)});
  }
  const int t = state_.step + 1;
  ad::Graph g;
  Forward fw;
  try {
    fw = forward(g, false);
  } catch (const LossError& e) {
    throw OptimizerError("step " + std::to_string(t) + ": " + e.what());
  } catch (const PoseSolverError& e) {
    throw DegenerateInput("step " + std::to_string(t) + ": pose solver: " + e.what());
  } catch (const IntrinsicsError& e) {
    throw OptimizerError("step " + std::to_string(t) + ": focal selection: " + e.what());
  }
  StepReport r;
  r.step = t;
  r.stage = state_.stage.stage;
  r.loss = breakdown(fw.terms);
  r.focal = fw.focal.item();
  if (!std::isfinite(r.loss.flow) || !std::isfinite(r.loss.track) || !std::isfinite(r.focal)) {
    std::ostringstream msg;
    msg << "step " << t << ": non-finite loss (flow=" << r.loss.flow << ", track=" << r.loss.track
        << ", focal=" << r.focal << ")";
    throw OptimizerError(msg.str());
  }
  if (state_.stage.stage == 1) state_.stage.last_soft_focal = r.focal;

  auto grads = g.backward(fw.terms.total);
  for (std::size_t i = 0; i < state_.params.size(); ++i) {
    const Array& gr = grads[fw.leaves[i]];
    if (!gr.allFinite()) {
      throw OptimizerError("step " + std::to_string(t) + ": non-finite gradient for " + state_.params[i].name +
                           " (loss " + std::to_string(r.loss.total) + ")");
    }
  }
  for (std::size_t i = 0; i < state_.params.size(); ++i) {
    ad::Parameter& p = state_.params[i];
    adam_update(p.value, state_.m[i], state_.v[i], grads[fw.leaves[i]], config_.learning_rate(p.group),
                config_.adam, t);
  }
  if (state_.stage.stage == 2) state_.stage.focal = state_.params[*find_param("focal")].value[0];
  state_.step = t;

  if (problem_.gt && problem_.frames >= 3) {
    std::vector<Vec3> est;
    for (const auto& p : fw.cam_to_world) est.push_back(p.value().translation);
    std::vector<Vec3> ref;
    for (const auto& p : problem_.gt->poses) ref.push_back(p.translation);
    try {
      r.ate = ate(est, ref);
    } catch (const EvalError&) {
    }
  }
  return r;
}

std::vector<StepReport> Optimizer::run(const std::function<void(const StepReport&)>& on_step) {
  std::vector<StepReport> history;
  const int total = config_.total_steps();
  while (state_.step < total) {
    history.push_back(step());
    if (on_step) on_step(history.back());
    // Early stopping only ends the final stage; stage 1 always runs its count.
    const bool final_stage = state_.stage.stage == 2 || state_.stage.single_stage;
    const int win = config_.early_stop_window;
    if (config_.early_stop && final_stage && static_cast<int>(history.size()) > win) {
      const double before = history[history.size() - 1 - static_cast<std::size_t>(win)].loss.total;
      if (before - history.back().loss.total < config_.early_stop_delta) break;
    }
  }
  return history;
}

Estimate Optimizer::estimate() const {
  ad::Graph g;
  Forward fw = forward(g, true);
  Estimate e;
  e.focal = fw.focal.item();
  for (const auto& p : fw.cam_to_world) e.cam_to_world.push_back(p.value());
  for (const auto& d : fw.depths) e.depths.push_back(d.value());
  return e;
}

// --- reports -----------------------------------------------------------------

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepReport>& history) {
  std::ofstream out(path);
  if (!out) throw OptimizerError("cannot open for writing: " + path.string());
  out << "step,stage,total,flow,track,focal,ate\n";
  char buf[256];
  for (const StepReport& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g,", r.step, r.stage, r.loss.total, r.loss.flow,
                  r.loss.track, r.focal);
    out << buf;
    if (r.ate) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.ate);
      out << buf;
    }
    out << "\n";
  }
}

Metrics evaluate_estimate(const Estimate& est, const Problem& problem, const OptimizerConfig& config) {
  Metrics m;
  m.focal = est.focal;
  m.metadata["ate_alignment"] = "centred, tr(XX^T)=1, rotation-only Kabsch";
  m.metadata["ablation"] = config.ablation.describe();
  m.metadata["frames"] = std::to_string(problem.frames);
  m.metadata["steps"] = std::to_string(config.total_steps());
  m.metadata["seed"] = std::to_string(config.seed);

  // Flow induced by the estimate against the input flow.
  const Intrinsics k(est.focal, problem.width, problem.height);
  std::vector<FlowField> induced, observed;
  for (const FlowField& f : problem.flows) {
    FlowField g(f.source, f.width, f.height);
    const PoseSE3 p = relative_pose(est.cam_to_world[f.source], est.cam_to_world[f.source + 1]);
    for (int r = 0; r < f.height; ++r)
      for (int c = 0; c < f.width; ++c) {
        const std::size_t i = g.index(c, r);
        const Vec2 u = k.pixel_center(c, r);
        auto t = project(p.apply(unproject(u, est.depths[f.source][static_cast<Index>(i)], k)), k);
        if (t) {
          g.displacement[i] = *t - u;
        } else {
          g.valid[i] = 0;
        }
      }
    induced.push_back(std::move(g));
    observed.push_back(f);
  }
  try {
    m.epe_mean = endpoint_error(induced, observed);
  } catch (const DegenerateInput&) {
  }
  if (problem.gt) {
    m.focal_abs_err = std::abs(est.focal - problem.gt->focal);
    if (problem.frames >= 3) {
      try {
        m.ate = ate(est.cam_to_world, problem.gt->poses);
      } catch (const DegenerateInput&) {
      }
    }
    if (!problem.gt->depths.empty()) m.depth_si_rmse = depth_error_scale_invariant(est.depths, problem.gt->depths);
  }
  return m;
}

void write_outputs(const std::filesystem::path& dir, const RunOutputs& out, const Problem& problem) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "depth");
  write_loss_csv(dir / "loss.csv", out.history);
  write_trajectory(dir / "trajectory.txt", out.estimate.cam_to_world);
  {
    nlohmann::ordered_json j;
    j["focal"] = out.estimate.focal;
    j["width"] = problem.width;
    j["height"] = problem.height;
    std::ofstream(dir / "intrinsics.json") << j.dump(2) << "\n";
  }
  char name[64];
  for (std::size_t f = 0; f < out.estimate.depths.size(); ++f) {
    std::snprintf(name, sizeof name, "depth_%04zu.pfm", f);
    write_pfm(dir / "depth" / name, out.estimate.depths[f], problem.width, problem.height);
  }
  export_ply(dir / "points.ply", out.estimate.depths, out.estimate.cam_to_world,
             Intrinsics(out.estimate.focal, problem.width, problem.height));
  write_metrics_json(dir / "metrics.json", out.metrics);
}

Estimate read_estimate(const std::filesystem::path& dir) {
  Estimate e;
  e.cam_to_world = read_trajectory(dir / "trajectory.txt");
  std::ifstream in(dir / "intrinsics.json");
  if (!in) throw OptimizerError("missing " + (dir / "intrinsics.json").string());
  try {
    e.focal = json::parse(in).at("focal").get<double>();
  } catch (const json::exception& ex) {
    throw OptimizerError((dir / "intrinsics.json").string() + ": " + ex.what());
  }
  char name[64];
  for (std::size_t f = 0; f < e.cam_to_world.size(); ++f) {
    std::snprintf(name, sizeof name, "depth_%04zu.pfm", f);
    int w = 0, h = 0;
    e.depths.push_back(read_pfm(dir / "depth" / name, &w, &h));
  }
  return e;
}

}  // namespace flowsfm
