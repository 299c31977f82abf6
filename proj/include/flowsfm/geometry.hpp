#pragma once

// Pinhole camera and rigid transforms.
//
// Image coordinates used throughout the library are width-normalized: a pixel
// position (px, py) in raw pixels maps to (px / W, py / W). Pixel (col, row)
// has its centre at raw position (col + 0.5, row + 0.5). The principal point is
// fixed at the image centre, (0.5, 0.5 * H / W) in normalized units, and the
// focal length is expressed in units of the image width.
//
// Camera-frame convention: x right, y down, z forward. Depth is the z
// coordinate of a point in the camera frame.

#include "flowsfm/diffcore.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

namespace flowsfm {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Points with z at or below this are invalid projections.
inline constexpr double kMinDepth = 1e-6;

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Intrinsics {
 public:
  Intrinsics(double focal, int width, int height);

  [[nodiscard]] double focal() const { return focal_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] Vec2 principal_point() const { return {0.5, 0.5 * height_ / width_}; }
  /// Image extent in normalized units: (1, H / W).
  [[nodiscard]] Vec2 extent() const { return {1.0, static_cast<double>(height_) / width_}; }
  [[nodiscard]] Intrinsics with_focal(double focal) const { return {focal, width_, height_}; }

  [[nodiscard]] Vec2 to_normalized(const Vec2& pixels) const { return pixels / width_; }
  [[nodiscard]] Vec2 to_pixels(const Vec2& normalized) const { return normalized * width_; }
  /// Normalized centre of pixel (col, row).
  [[nodiscard]] Vec2 pixel_center(int col, int row) const {
    return {(col + 0.5) / width_, (row + 0.5) / width_};
  }
  [[nodiscard]] bool in_bounds(const Vec2& normalized) const;

 private:
  double focal_;
  int width_;
  int height_;
};

/// Rigid transform x -> R x + t.
struct PoseSE3 {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static PoseSE3 identity() { return {}; }

  [[nodiscard]] Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
  [[nodiscard]] PoseSE3 inverse() const;
  [[nodiscard]] Eigen::Matrix4d matrix() const;
  [[nodiscard]] bool is_valid(double tol = 1e-10) const;
};

/// The transform that applies `first` and then `second`. The rotation is
/// re-orthonormalized (polar projection) so long chains do not drift.
PoseSE3 compose(const PoseSE3& first, const PoseSE3& second);
PoseSE3 invert(const PoseSE3& pose);

/// Nearest rotation in the Frobenius sense, with det = +1.
Mat3 orthonormalize(const Mat3& m);

/// Z-Y-X Euler parameterization: R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct EulerPose {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
  Vec3 translation = Vec3::Zero();

  [[nodiscard]] PoseSE3 to_pose() const;
};

Mat3 euler_to_rotation(double yaw, double pitch, double roll);

/// Back-projects normalized image point `u` at z-depth `depth`. Throws on depth <= 0.
Vec3 unproject(const Vec2& u, double depth, const Intrinsics& k);

/// Projects a camera-frame point; nullopt when z <= kMinDepth.
std::optional<Vec2> project(const Vec3& x, const Intrinsics& k);

/// Camera-to-world poses, one per frame.
using Trajectory = std::vector<PoseSE3>;

/// Relative transform from frame i's camera to frame j's camera given
/// camera-to-world poses: x_j = P_ij x_i.
PoseSE3 relative_pose(const PoseSE3& cam_to_world_i, const PoseSE3& cam_to_world_j);

/// Text format: one line per frame, `index r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz`,
/// camera-to-world.
void write_trajectory(const std::filesystem::path& path, const Trajectory& poses);
Trajectory read_trajectory(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Differentiable counterparts used by the optimization pipeline.

namespace geo {

/// Rigid transform held on the tape: rotation [3,3], translation [1,3].
struct PoseTensor {
  ad::Tensor rotation;
  ad::Tensor translation;

  [[nodiscard]] PoseSE3 value() const;
};

PoseTensor constant_pose(ad::Graph& g, const PoseSE3& pose);
PoseTensor compose(const PoseTensor& first, const PoseTensor& second);
PoseTensor invert(const PoseTensor& pose);
/// Relative pose from camera-to-world tensors, x_j = P_ij x_i.
PoseTensor relative_pose(const PoseTensor& cam_to_world_i, const PoseTensor& cam_to_world_j);

/// Rotation from Euler angles held in a [3] tensor (yaw, pitch, roll).
ad::Tensor euler_to_rotation(const ad::Tensor& angles);

/// Unprojects N normalized points (constant N x 2) with depths [N,1] and a
/// scalar focal tensor. Returns [N,3].
ad::Tensor unproject(const ad::Tensor& depth, const ad::Tensor& pixels, const ad::Tensor& focal,
                     const Intrinsics& k);

/// Applies x -> R x + t to rows of an [N,3] tensor.
ad::Tensor transform(const PoseTensor& pose, const ad::Tensor& points);

struct Projection {
  ad::Tensor uv;                  // [M,2] normalized coordinates of valid rows
  std::vector<ad::Index> rows;    // indices into the input rows; z > kMinDepth
};

/// Projects rows of an [N,3] tensor. Rows at or behind kMinDepth are dropped.
Projection project(const ad::Tensor& points, const ad::Tensor& focal, const Intrinsics& k);

/// Gathers rows of an [N,C] tensor.
ad::Tensor gather_rows(const ad::Tensor& t, std::span<const ad::Index> rows);

}  // namespace geo

}  // namespace flowsfm
