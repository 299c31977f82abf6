#include "flowsfm/geometry.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace flowsfm {

Intrinsics::Intrinsics(double focal, int width, int height)
    : focal_(focal), width_(width), height_(height) {
  if (!(focal > 0.0) || !std::isfinite(focal)) {
    throw GeometryError("intrinsics: focal must be positive and finite, got " + std::to_string(focal));
  }
  if (width <= 0 || height <= 0) {
    throw GeometryError("intrinsics: image extents must be positive");
  }
}

bool Intrinsics::in_bounds(const Vec2& u) const {
  const Vec2 e = extent();
  return u.x() >= 0.0 && u.y() >= 0.0 && u.x() <= e.x() && u.y() <= e.y();
}

PoseSE3 PoseSE3::inverse() const {
  PoseSE3 out;
  out.rotation = rotation.transpose();
  out.translation = -(out.rotation * translation);
  return out;
}

Eigen::Matrix4d PoseSE3::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

bool PoseSE3::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

PoseSE3 compose(const PoseSE3& first, const PoseSE3& second) {
  PoseSE3 out;
  out.rotation = orthonormalize(second.rotation * first.rotation);
  out.translation = second.rotation * first.translation + second.translation;
  return out;
}

PoseSE3 invert(const PoseSE3& pose) { return pose.inverse(); }

Mat3 euler_to_rotation(double yaw, double pitch, double roll) {
  return (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
          Eigen::AngleAxisd(roll, Vec3::UnitX()))
      .toRotationMatrix();
}

PoseSE3 EulerPose::to_pose() const {
  return {euler_to_rotation(yaw, pitch, roll), translation};
}

Vec3 unproject(const Vec2& u, double depth, const Intrinsics& k) {
  if (!(depth > 0.0)) throw GeometryError("unproject: depth must be positive, got " + std::to_string(depth));
  const Vec2 c = k.principal_point();
  return {depth * (u.x() - c.x()) / k.focal(), depth * (u.y() - c.y()) / k.focal(), depth};
}

std::optional<Vec2> project(const Vec3& x, const Intrinsics& k) {
  if (!(x.z() > kMinDepth)) return std::nullopt;
  const Vec2 c = k.principal_point();
  return Vec2(k.focal() * x.x() / x.z() + c.x(), k.focal() * x.y() / x.z() + c.y());
}

PoseSE3 relative_pose(const PoseSE3& cam_to_world_i, const PoseSE3& cam_to_world_j) {
  return compose(cam_to_world_i, cam_to_world_j.inverse());
}

void write_trajectory(const std::filesystem::path& path, const Trajectory& poses) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open trajectory file for writing: " + path.string());
  char buf[64];
  for (std::size_t i = 0; i < poses.size(); ++i) {
    out << i;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        std::snprintf(buf, sizeof buf, " %.17g", poses[i].rotation(r, c));
        out << buf;
      }
    }
    for (int r = 0; r < 3; ++r) {
      std::snprintf(buf, sizeof buf, " %.17g", poses[i].translation(r));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing trajectory file: " + path.string());
}

Trajectory read_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trajectory file: " + path.string());
  Trajectory poses;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t index = 0;
    PoseSE3 p;
    ls >> index;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) ls >> p.rotation(r, c);
    for (int r = 0; r < 3; ++r) ls >> p.translation(r);
    if (!ls || index != poses.size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": malformed trajectory line");
    }
    poses.push_back(p);
  }
  return poses;
}

// ---------------------------------------------------------------------------

namespace geo {

using ad::Array;
using ad::Index;
using ad::Shape;
using ad::Tensor;

PoseSE3 PoseTensor::value() const {
  PoseSE3 p;
  p.rotation = rotation.matrix();
  p.translation = translation.value().matrix();
  return p;
}

PoseTensor constant_pose(ad::Graph& g, const PoseSE3& pose) {
  Array r(9);
  Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(r.data()) = pose.rotation;
  return {g.constant(r, Shape{3, 3}), g.constant(pose.translation.array(), Shape{1, 3})};
}

PoseTensor compose(const PoseTensor& first, const PoseTensor& second) {
  // R = R2 R1, t = R2 t1 + t2 (row-vector form: t1 R2^T + t2).
  return {ad::matmul(second.rotation, first.rotation),
          ad::matmul(first.translation, ad::transpose(second.rotation)) + second.translation};
}

PoseTensor invert(const PoseTensor& pose) {
  Tensor rt = ad::transpose(pose.rotation);
  return {rt, -ad::matmul(pose.translation, pose.rotation)};
}

PoseTensor relative_pose(const PoseTensor& cam_to_world_i, const PoseTensor& cam_to_world_j) {
  return compose(cam_to_world_i, invert(cam_to_world_j));
}

Tensor euler_to_rotation(const Tensor& angles) {
  if (angles.numel() != 3) throw ad::ShapeError("euler_to_rotation: expected 3 angles");
  auto pick = [&](Index k) {
    const Index idx[] = {k};
    return ad::gather(angles, idx);
  };
  Tensor yaw = pick(0), pitch = pick(1), roll = pick(2);
  Tensor cy = ad::cos(yaw), sy = ad::sin(yaw);
  Tensor cp = ad::cos(pitch), sp = ad::sin(pitch);
  Tensor cr = ad::cos(roll), sr = ad::sin(roll);
  const Tensor entries[] = {
      cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
      sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
      -sp,     cp * sr,                cp * cr,
  };
  return ad::reshape(ad::concat(entries, 0), Shape{3, 3});
}

Tensor unproject(const Tensor& depth, const Tensor& pixels, const Tensor& focal, const Intrinsics& k) {
  if (pixels.shape().size() != 2 || pixels.cols() != 2) {
    throw ad::ShapeError("unproject: pixels must be N x 2, got " + ad::to_string(pixels.shape()));
  }
  const Index n = pixels.rows();
  if (depth.numel() != n) {
    throw ad::ShapeError("unproject: " + std::to_string(depth.numel()) + " depths for " +
                         std::to_string(n) + " pixels");
  }
  const Vec2 c = k.principal_point();
  auto px = pixels.matrix();
  Array ox = px.col(0).array() - c.x();
  Array oy = px.col(1).array() - c.y();
  Tensor d = ad::reshape(depth, Shape{n, 1});
  Tensor inv_f = ad::div(depth.graph().constant(1.0), focal);
  Tensor x = ad::mul(ad::mul_const(d, ox), inv_f);
  Tensor y = ad::mul(ad::mul_const(d, oy), inv_f);
  const Tensor cols[] = {x, y, d};
  return ad::concat(cols, 1);
}

Tensor transform(const PoseTensor& pose, const Tensor& points) {
  return ad::matmul(points, ad::transpose(pose.rotation)) + pose.translation;
}

Tensor gather_rows(const Tensor& t, std::span<const Index> rows) {
  const Index c = t.cols();
  std::vector<Index> idx;
  idx.reserve(rows.size() * static_cast<std::size_t>(c));
  for (Index r : rows)
    for (Index j = 0; j < c; ++j) idx.push_back(r * c + j);
  return ad::gather(t, idx, Shape{static_cast<Index>(rows.size()), c});
}

Projection project(const Tensor& points, const Tensor& focal, const Intrinsics& k) {
  if (points.shape().size() != 2 || points.cols() != 3) {
    throw ad::ShapeError("project: points must be N x 3, got " + ad::to_string(points.shape()));
  }
  auto pm = points.matrix();
  Projection out;
  for (Index r = 0; r < pm.rows(); ++r) {
    if (pm(r, 2) > kMinDepth) out.rows.push_back(r);
  }
  if (out.rows.empty()) return out;
  Tensor kept = out.rows.size() == static_cast<std::size_t>(pm.rows()) ? points : gather_rows(points, out.rows);
  Tensor z = ad::slice_cols(kept, 2, 1);
  Tensor xy = ad::slice_cols(kept, 0, 2);
  const Vec2 c = k.principal_point();
  Tensor centre = points.graph().constant(c.array(), Shape{1, 2});
  out.uv = ad::mul(ad::div(xy, z), focal) + centre;
  return out;
}

}  // namespace geo

}  // namespace flowsfm
