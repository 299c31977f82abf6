#pragma once

// Ground-truth scenes with exactly consistent flow and tracks.
//
// A scene is an implicit surface (negative on the camera side) observed by a
// pinhole camera moving along a parametric trajectory. Depth maps come from ray
// casting; flow is the exact camera-induced correspondence through that depth,
// masked when the target leaves the image, lands behind the camera, or is
// occluded at the target frame (1% relative depth test).

#include "flowsfm/correspondence.hpp"
#include "flowsfm/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace flowsfm {

enum class SceneKind { Blob, Plane, Flat };
enum class TrajectoryKind { Orbit, Forward, Rotation, Lateral, Static };

SceneKind parse_scene_kind(const std::string& s);
TrajectoryKind parse_trajectory_kind(const std::string& s);
std::string to_string(SceneKind k);
std::string to_string(TrajectoryKind k);

struct SceneSpec {
  SceneKind scene = SceneKind::Blob;
  TrajectoryKind trajectory = TrajectoryKind::Orbit;
  int frames = 24;
  int width = 64;
  int height = 48;
  double focal = 1.2;
  std::uint64_t seed = 0;
  double orbit_step_deg = 4.0;     // 90 frames close a full circle
  double orbit_radius = 1.6;
  double translation_step = 0.08;  // forward / lateral, per frame
  double rotation_step_deg = 1.0;  // rotation kind, yaw per frame
  int dense_frames = 0;            // > frames: render densely, then subsample by flow
};

struct Bump {
  Eigen::Vector3d frequency;  // blob: 3D direction frequency; plane: (kx, ky, 0)
  double phase = 0.0;
  double amplitude = 0.0;
};

struct Surface {
  SceneKind kind = SceneKind::Blob;
  double base = 1.0;  // blob radius or plane depth
  std::vector<Bump> bumps;

  /// Negative on the camera side, positive inside / behind the surface.
  [[nodiscard]] double field(const Vec3& p) const;
  /// First hit along origin + s * dir for s in (0, max_distance].
  [[nodiscard]] std::optional<double> cast(const Vec3& origin, const Vec3& dir, double max_distance = 40.0) const;
};

struct SceneGT {
  SceneSpec spec;
  Intrinsics intrinsics{1.0, 1, 1};
  Surface surface;
  Trajectory poses;                    // camera-to-world per selected frame
  std::vector<Eigen::ArrayXd> depth;   // per frame, row-major
  std::vector<int> dense_index;        // selected dense frame per frame

  /// Exact depth along the ray through normalized u in `frame`.
  [[nodiscard]] std::optional<double> ray_depth(int frame, const Vec2& u) const;
  /// x_j = P_ij x_i from the ground-truth trajectory.
  [[nodiscard]] PoseSE3 relative(int i, int j) const;
};

struct NoiseSpec {
  double flow_sigma = 0.0;        // width-normalized, per component
  double track_sigma = 0.0;
  double track_dropout = 0.0;     // probability per non-query observation
  double outlier_fraction = 0.0;  // flow pixels replaced by a random offset
  double outlier_magnitude = 0.05;
  std::uint64_t seed = 1;
};

struct Correspondences {
  std::vector<FlowField> flows;  // adjacent pairs (k, k+1)
  TrackSet tracks;
};

/// Deterministic in the SceneSpec (including its seed).
SceneGT generate(const SceneSpec& spec);
Correspondences render_correspondences(const SceneGT& scene, const NoiseSpec& noise = {});
/// Re-renders every depth map after the poses were edited by hand.
void rerender_depths(SceneGT& scene);

/// Query frames are 0, 10, 20, ...; queries sit on a 16 x 16 lattice snapped to
/// pixel centres and are followed forward.
inline constexpr int kTrackGrid = 16;
inline constexpr int kTrackReseed = 10;

/// Writes flow/flow_XXXX.flo, tracks.csv, scene.json and the gt/ bundle
/// (trajectory.txt, intrinsics.json, depth_XXXX.pfm).
void write_scene(const std::filesystem::path& dir, const SceneGT& scene, const Correspondences& corr,
                 const NoiseSpec& noise);

}  // namespace flowsfm
