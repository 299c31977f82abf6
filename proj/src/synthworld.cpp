#include "flowsfm/synthworld.hpp"

#include "flowsfm/evalio.hpp"

#include <json.hpp>

#include <Eigen/Geometry>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

namespace flowsfm {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

template <typename E>
struct Names {
  E value;
  const char* name;
};
constexpr Names<SceneKind> kSceneNames[] = {
    {SceneKind::Blob, "blob"}, {SceneKind::Plane, "plane"}, {SceneKind::Flat, "flat"}};
constexpr Names<TrajectoryKind> kTrajectoryNames[] = {{TrajectoryKind::Orbit, "orbit"},
                                                      {TrajectoryKind::Forward, "forward"},
                                                      {TrajectoryKind::Rotation, "rotation"},
                                                      {TrajectoryKind::Lateral, "lateral"},
                                                      {TrajectoryKind::Static, "static"}};

// Camera looking from `eye` at `target`, y axis pointing down in world.
PoseSE3 look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = Vec3::UnitY().cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return {r, eye};
}

Surface make_surface(const SceneSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Surface s;
  s.kind = spec.scene;
  if (spec.scene == SceneKind::Blob) {
    s.base = 1.0;
    for (int k = 0; k < 8; ++k) {
      Vec3 dir(normal(rng), normal(rng), normal(rng));
      dir.normalize();
      s.bumps.push_back({dir * (1.0 + 2.0 * unit(rng)), 2 * std::numbers::pi * unit(rng), 0.01 + 0.02 * unit(rng)});
    }
  } else {
    s.base = 3.0;
    if (spec.scene == SceneKind::Plane) {
      for (int k = 0; k < 8; ++k) {
        const double ang = 2 * std::numbers::pi * unit(rng);
        const double freq = 0.8 + 1.7 * unit(rng);
        s.bumps.push_back({Vec3(std::cos(ang) * freq, std::sin(ang) * freq, 0.0), 2 * std::numbers::pi * unit(rng),
                           0.03 + 0.05 * unit(rng)});
      }
    }
  }
  return s;
}

Trajectory make_trajectory(const SceneSpec& spec, int count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Trajectory poses;
  switch (spec.trajectory) {
    case TrajectoryKind::Orbit: {
      if (spec.scene != SceneKind::Blob) throw GeometryError("orbit trajectories require the blob scene");
      const double elevation = 8.0 * kDeg * unit(rng);
      const double start = std::numbers::pi * unit(rng);
      for (int k = 0; k < count; ++k) {
        const double th = start + k * spec.orbit_step_deg * kDeg;
        const Vec3 eye = spec.orbit_radius * Vec3(std::cos(elevation) * std::sin(th), -std::sin(elevation),
                                                  -std::cos(elevation) * std::cos(th));
        poses.push_back(look_at(eye, Vec3::Zero()));
      }
      break;
    }
    case TrajectoryKind::Forward:
    case TrajectoryKind::Lateral: {
      if (spec.scene == SceneKind::Blob) throw GeometryError("forward/lateral trajectories require a plane scene");
      const double sway = 0.02 * unit(rng);
      const double yaw = 0.5 * kDeg * unit(rng);
      for (int k = 0; k < count; ++k) {
        const double s = k * spec.translation_step;
        Vec3 t = spec.trajectory == TrajectoryKind::Forward ? Vec3(sway * std::sin(0.4 * k), 0.0, s)
                                                              : Vec3(s, sway * std::sin(0.4 * k), 0.0);
        poses.push_back({euler_to_rotation(yaw * std::sin(0.3 * k), 0.0, 0.0), t});
      }
      break;
    }
    case TrajectoryKind::Rotation: {
      if (spec.scene == SceneKind::Blob) throw GeometryError("rotation trajectories require a plane scene");
      const double pitch = 0.3 * kDeg * unit(rng);
      for (int k = 0; k < count; ++k) {
        poses.push_back({euler_to_rotation(k * spec.rotation_step_deg * kDeg, k * pitch, 0.0),
                         Vec3(5e-4 * k, 0.0, 0.0)});
      }
      break;
    }
    case TrajectoryKind::Static: {
      const PoseSE3 p = spec.scene == SceneKind::Blob ? look_at(Vec3(0, 0, -spec.orbit_radius), Vec3::Zero())
                                                     : PoseSE3::identity();
      poses.assign(static_cast<std::size_t>(count), p);
      break;
    }
  }
  return poses;
}

Eigen::ArrayXd render_depth(const Surface& s, const PoseSE3& pose, const Intrinsics& k) {
  const int w = static_cast<int>(k.width());
  const int h = static_cast<int>(k.height());
  Eigen::ArrayXd d(static_cast<Eigen::Index>(w) * h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const Vec3 ray = pose.rotation * unproject(k.pixel_center(c, r), 1.0, k);
      auto hit = s.cast(pose.translation, ray);
      if (!hit) throw GeometryError("ray missed the surface; the scene does not fill the view");
      d[static_cast<Eigen::Index>(r) * w + c] = *hit;
    }
  return d;
}

bool in_image(const Vec2& u, const Intrinsics& k) {
  return u.x() >= 0.0 && u.y() >= 0.0 && u.x() <= 1.0 && u.y() <= static_cast<double>(k.height()) / k.width();
}

// Target of source pixel u (depth d) in frame j, or nullopt when masked.
std::optional<Vec2> exact_target(const SceneGT& scene, const PoseSE3& pij, int j, const Vec2& u, double d) {
  const Intrinsics& k = scene.intrinsics;
  const Vec3 x = pij.apply(unproject(u, d, k));
  auto t = project(x, k);
  if (!t || !in_image(*t, k)) return std::nullopt;
  auto seen = scene.ray_depth(j, *t);
  if (!seen || std::abs(*seen - x.z()) > 0.01 * x.z()) return std::nullopt;
  return t;
}

}  // namespace

SceneKind parse_scene_kind(const std::string& s) {
  for (const auto& n : kSceneNames)
    if (s == n.name) return n.value;
  throw std::invalid_argument("unknown scene kind '" + s + "' (blob, plane, flat)");
}

TrajectoryKind parse_trajectory_kind(const std::string& s) {
  for (const auto& n : kTrajectoryNames)
    if (s == n.name) return n.value;
  throw std::invalid_argument("unknown trajectory kind '" + s + "' (orbit, forward, rotation, lateral, static)");
}

std::string to_string(SceneKind k) {
  for (const auto& n : kSceneNames)
    if (k == n.value) return n.name;
  return "?";
}

std::string to_string(TrajectoryKind k) {
  for (const auto& n : kTrajectoryNames)
    if (k == n.value) return n.name;
  return "?";
}

double Surface::field(const Vec3& p) const {
  if (kind == SceneKind::Blob) {
    const double rho = p.norm();
    if (rho == 0.0) return base;
    const Vec3 n = p / rho;
    double r = 1.0;
    for (const Bump& b : bumps) r += b.amplitude * std::cos(b.frequency.dot(n) + b.phase);
    return base * r - rho;
  }
  double z = base;
  for (const Bump& b : bumps) z += b.amplitude * std::cos(b.frequency.x() * p.x() + b.frequency.y() * p.y() + b.phase);
  return p.z() - z;
}

std::optional<double> Surface::cast(const Vec3& origin, const Vec3& dir, double max_distance) const {
  constexpr double step = 0.01;
  double lo = 0.0;
  double f_lo = field(origin);
  if (f_lo >= 0.0) return std::nullopt;  // starts inside
  for (double s = step; s <= max_distance; s += step) {
    const double f = field(origin + s * dir);
    if (f >= 0.0) {
      double hi = s;
      for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (field(origin + mid * dir) >= 0.0) {
          hi = mid;
        } else {
          lo = mid;
        }
      }
      return 0.5 * (lo + hi);
    }
    lo = s;
    f_lo = f;
  }
  return std::nullopt;
}

std::optional<double> SceneGT::ray_depth(int frame, const Vec2& u) const {
  const PoseSE3& p = poses.at(static_cast<std::size_t>(frame));
  return surface.cast(p.translation, p.rotation * unproject(u, 1.0, intrinsics));
}

PoseSE3 SceneGT::relative(int i, int j) const { return relative_pose(poses.at(i), poses.at(j)); }

void rerender_depths(SceneGT& scene) {
  scene.depth.clear();
  for (const auto& p : scene.poses) scene.depth.push_back(render_depth(scene.surface, p, scene.intrinsics));
}

SceneGT generate(const SceneSpec& spec) {
  if (spec.frames < 2) throw std::invalid_argument("generate: need at least 2 frames");
  SceneGT scene;
  scene.spec = spec;
  scene.intrinsics = Intrinsics(spec.focal, spec.width, spec.height);
  std::mt19937_64 rng(spec.seed);
  scene.surface = make_surface(spec, rng);
  const int dense = std::max(spec.dense_frames, spec.frames);
  Trajectory all = make_trajectory(spec, dense, rng);
  if (dense == spec.frames) {
    scene.poses = all;
    for (int k = 0; k < dense; ++k) scene.dense_index.push_back(k);
    for (const auto& p : scene.poses) scene.depth.push_back(render_depth(scene.surface, p, scene.intrinsics));
    return scene;
  }
  // Render the dense sequence, measure mean flow per step, subsample.
  SceneGT full = scene;
  full.poses = all;
  for (const auto& p : all) full.depth.push_back(render_depth(full.surface, p, full.intrinsics));
  std::vector<double> magnitude;
  const Intrinsics& k = full.intrinsics;
  for (int f = 0; f + 1 < dense; ++f) {
    const PoseSE3 pij = full.relative(f, f + 1);
    double acc = 0.0;
    int n = 0;
    for (int r = 0; r < spec.height; ++r)
      for (int c = 0; c < spec.width; ++c) {
        const Vec2 u = k.pixel_center(c, r);
        auto t = project(pij.apply(unproject(u, full.depth[f][r * spec.width + c], k)), k);
        if (!t) continue;
        acc += (*t - u).norm();
        ++n;
      }
    magnitude.push_back(n ? acc / n : 0.0);
  }
  auto pick = subsample_frames(magnitude, spec.frames);
  for (int idx : pick.indices) {
    scene.poses.push_back(all[idx]);
    scene.depth.push_back(full.depth[idx]);
    scene.dense_index.push_back(idx);
  }
  return scene;
}

Correspondences render_correspondences(const SceneGT& scene, const NoiseSpec& noise) {
  const Intrinsics& k = scene.intrinsics;
  const int w = scene.spec.width;
  const int h = scene.spec.height;
  const int frames = static_cast<int>(scene.poses.size());
  Correspondences out;

  for (int f = 0; f + 1 < frames; ++f) {
    FlowField flow(f, w, h);
    const PoseSE3 pij = scene.relative(f, f + 1);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const Vec2 u = k.pixel_center(c, r);
        const std::size_t i = flow.index(c, r);
        auto t = exact_target(scene, pij, f + 1, u, scene.depth[f][static_cast<Eigen::Index>(i)]);
        if (t) {
          flow.displacement[i] = *t - u;
        } else {
          flow.valid[i] = 0;
        }
      }
    out.flows.push_back(std::move(flow));
  }

  out.tracks.frame_count = frames;
  const int gx = std::min(kTrackGrid, w);
  const int gy = std::min(kTrackGrid, h);
  for (int q = 0; q + 1 < frames; q += kTrackReseed) {
    for (int j = 0; j < gy; ++j)
      for (int i = 0; i < gx; ++i) {
        const int col = static_cast<int>((i + 0.5) * w / gx);
        const int row = static_cast<int>((j + 0.5) * h / gy);
        const Vec2 u = k.pixel_center(col, row);
        const double d = scene.depth[q][static_cast<Eigen::Index>(row) * w + col];
        Track t;
        t.query_frame = q;
        t.position.assign(static_cast<std::size_t>(frames), Vec2::Zero());
        t.visible.assign(static_cast<std::size_t>(frames), 0);
        t.position[q] = u;
        t.visible[q] = 1;
        for (int f = q + 1; f < frames; ++f) {
          auto target = exact_target(scene, scene.relative(q, f), f, u, d);
          if (!target) continue;
          t.position[f] = *target;
          t.visible[f] = 1;
        }
        out.tracks.tracks.push_back(std::move(t));
      }
  }

  // Noise is applied after exact generation, from its own stream.
  std::mt19937_64 rng(noise.seed);
  std::normal_distribution<double> flow_noise(0.0, noise.flow_sigma > 0 ? noise.flow_sigma : 1.0);
  std::normal_distribution<double> track_noise(0.0, noise.track_sigma > 0 ? noise.track_sigma : 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool any_flow_noise = noise.flow_sigma > 0 || noise.outlier_fraction > 0;
  if (any_flow_noise) {
    for (FlowField& flow : out.flows) {
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const std::size_t i = flow.index(c, r);
          if (!flow.valid[i]) continue;
          Vec2& d = flow.displacement[i];
          if (noise.flow_sigma > 0) d += Vec2(flow_noise(rng), flow_noise(rng));
          if (noise.outlier_fraction > 0 && unit(rng) < noise.outlier_fraction) {
            const double a = 2 * std::numbers::pi * unit(rng);
            d += noise.outlier_magnitude * Vec2(std::cos(a), std::sin(a));
          }
          if (!in_image(k.pixel_center(c, r) + d, k)) flow.valid[i] = 0;
        }
    }
  }
  if (noise.track_sigma > 0 || noise.track_dropout > 0) {
    for (Track& t : out.tracks.tracks) {
      for (int f = 0; f < frames; ++f) {
        if (f == t.query_frame || !t.visible[f]) continue;
        if (noise.track_dropout > 0 && unit(rng) < noise.track_dropout) {
          t.visible[f] = 0;
          t.position[f] = Vec2::Zero();
          continue;
        }
        if (noise.track_sigma > 0) t.position[f] += Vec2(track_noise(rng), track_noise(rng));
        if (!in_image(t.position[f], k)) t.visible[f] = 0;
      }
    }
  }
  out.tracks.prune();
  return out;
}

void write_scene(const std::filesystem::path& dir, const SceneGT& scene, const Correspondences& corr,
                 const NoiseSpec& noise) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "flow");
  fs::create_directories(dir / "gt");
  char name[64];
  for (const FlowField& f : corr.flows) {
    std::snprintf(name, sizeof name, "flow_%04d.flo", f.source);
    write_flow(dir / "flow" / name, f);
  }
  write_tracks(dir / "tracks.csv", corr.tracks, scene.spec.width);
  write_trajectory(dir / "gt" / "trajectory.txt", scene.poses);
  for (std::size_t f = 0; f < scene.depth.size(); ++f) {
    std::snprintf(name, sizeof name, "depth_%04zu.pfm", f);
    write_pfm(dir / "gt" / name, scene.depth[f], scene.spec.width, scene.spec.height);
  }
  nlohmann::ordered_json intr;
  intr["focal"] = scene.spec.focal;
  intr["width"] = scene.spec.width;
  intr["height"] = scene.spec.height;
  std::ofstream(dir / "gt" / "intrinsics.json") << intr.dump(2) << "\n";

  nlohmann::ordered_json j;
  j["frames"] = static_cast<int>(scene.poses.size());
  j["width"] = scene.spec.width;
  j["height"] = scene.spec.height;
  j["scene"] = to_string(scene.spec.scene);
  j["trajectory"] = to_string(scene.spec.trajectory);
  j["seed"] = scene.spec.seed;
  j["focal"] = scene.spec.focal;
  j["dense_index"] = scene.dense_index;
  j["surface"]["base"] = scene.surface.base;
  for (const Bump& b : scene.surface.bumps) {
    j["surface"]["bumps"].push_back({{"frequency", {b.frequency.x(), b.frequency.y(), b.frequency.z()}},
                                     {"phase", b.phase},
                                     {"amplitude", b.amplitude}});
  }
  j["noise"] = {{"flow_sigma", noise.flow_sigma},
                {"track_sigma", noise.track_sigma},
                {"track_dropout", noise.track_dropout},
                {"outlier_fraction", noise.outlier_fraction},
                {"outlier_magnitude", noise.outlier_magnitude},
                {"seed", noise.seed}};
  std::ofstream(dir / "scene.json") << j.dump(2) << "\n";
}

}  // namespace flowsfm
