#include <doctest.h>

#include "flowsfm/geometry.hpp"
#include "unit/gradcheck.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <random>

using namespace flowsfm;
using ad::Array;
using ad::Graph;
using ad::Shape;
using ad::Tensor;

namespace {

PoseSE3 random_pose(std::mt19937_64& rng, double trans_scale = 1.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return {q.toRotationMatrix(), Vec3(n(rng), n(rng), n(rng)) * trans_scale};
}

}  // namespace

TEST_CASE("unproject: principal ray and similar triangles") {
  Intrinsics k(1.0, 64, 48);
  const Vec3 x = unproject(k.principal_point(), 2.5, k);
  CHECK(x.x() == 0.0);
  CHECK(x.y() == 0.0);
  CHECK(x.z() == 2.5);

  // Half the image width to the right of centre is 0.5 normalized units.
  const Vec3 side = unproject(k.principal_point() + Vec2(0.5, 0.0), 1.0, k);
  CHECK(side.x() == doctest::Approx(0.5).epsilon(1e-15));
  const Vec3 side2 = unproject(k.principal_point() + Vec2(0.5, 0.0), 1.0, k.with_focal(0.5));
  CHECK(side2.x() == doctest::Approx(1.0).epsilon(1e-15));

  CHECK_THROWS_AS(unproject(k.principal_point(), 0.0, k), GeometryError);
  CHECK_THROWS_AS(unproject(k.principal_point(), -1.0, k), GeometryError);
}

TEST_CASE("project/unproject round trip") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> uu(0.0, 1.0), dd(0.05, 50.0), ff(0.5, 2.0);
  for (int i = 0; i < 100; ++i) {
    Intrinsics k(ff(rng), 64, 48);
    Vec2 u(uu(rng), uu(rng) * 0.75);
    auto back = project(unproject(u, dd(rng), k), k);
    REQUIRE(back.has_value());
    CHECK((*back - u).norm() * k.width() < 1e-10);
  }
}

TEST_CASE("project: centre, projective invariance, near-plane clipping") {
  Intrinsics k(1.3, 64, 48);
  auto c = project(Vec3(0, 0, 1), k);
  REQUIRE(c);
  CHECK((*c - k.principal_point()).norm() == 0.0);
  Vec3 x(0.3, -0.2, 1.7);
  auto a = project(x, k);
  auto b = project(4.2 * x, k);
  CHECK((*a - *b).norm() < 1e-15);
  CHECK_FALSE(project(Vec3(0.1, 0.1, kMinDepth / 2), k).has_value());
  CHECK_FALSE(project(Vec3(0.1, 0.1, -1.0), k).has_value());
}

TEST_CASE("compose: identity, translation chains, inverse") {
  std::mt19937_64 rng(2);
  PoseSE3 p = random_pose(rng);
  PoseSE3 q = compose(PoseSE3::identity(), p);
  CHECK((q.rotation - p.rotation).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((q.translation - p.translation).cwiseAbs().maxCoeff() == 0.0);

  PoseSE3 t1{Mat3::Identity(), Vec3(1, 2, 3)};
  PoseSE3 t2{Mat3::Identity(), Vec3(-0.5, 4, 0.25)};
  CHECK((compose(t1, t2).translation - Vec3(0.5, 6, 3.25)).norm() == 0.0);

  PoseSE3 e = compose(p, invert(p));
  CHECK((e.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(e.translation.norm() < 1e-10);
}

TEST_CASE("compose: 10-pose chain matches direct 4x4 products") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    PoseSE3 acc = PoseSE3::identity();
    Eigen::Matrix4d direct = Eigen::Matrix4d::Identity();
    for (int i = 0; i < 10; ++i) {
      PoseSE3 p = random_pose(rng);
      acc = compose(acc, p);
      direct = p.matrix() * direct;
    }
    CHECK((acc.matrix() - direct).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rotations stay orthonormal through 1000-long chains") {
  std::mt19937_64 rng(4);
  PoseSE3 acc = PoseSE3::identity();
  for (int i = 0; i < 1000; ++i) {
    PoseSE3 p = random_pose(rng, 0.1);
    acc = (i % 3 == 0) ? compose(acc, invert(p)) : compose(acc, p);
    REQUIRE(acc.is_valid(1e-10));
  }
}

TEST_CASE("Euler poses always yield proper rotations") {
  const double pi = std::numbers::pi;
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b)
      for (int c = 0; c < 10; ++c) {
        EulerPose e{-pi + 2 * pi * a / 9.0, -pi + 2 * pi * b / 9.0, -pi + 2 * pi * c / 9.0, Vec3::Zero()};
        REQUIRE(e.to_pose().is_valid(1e-10));
      }
}

TEST_CASE("trajectory file round trip") {
  std::mt19937_64 rng(5);
  Trajectory t;
  for (int i = 0; i < 7; ++i) t.push_back(random_pose(rng));
  auto path = std::filesystem::temp_directory_path() / "flowsfm_traj_test.txt";
  write_trajectory(path, t);
  Trajectory r = read_trajectory(path);
  REQUIRE(r.size() == t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK((r[i].rotation - t[i].rotation).norm() == 0.0);
    CHECK((r[i].translation - t[i].translation).norm() == 0.0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("tensor geometry matches value geometry") {
  std::mt19937_64 rng(6);
  Intrinsics k(1.1, 32, 24);
  Graph g;
  const int n = 12;
  Array px(2 * n), depth(n);
  std::uniform_real_distribution<double> uu(0.0, 0.75), dd(0.5, 3.0);
  for (int i = 0; i < n; ++i) {
    px[2 * i] = uu(rng) / 0.75;
    px[2 * i + 1] = uu(rng);
    depth[i] = dd(rng);
  }
  PoseSE3 pose = random_pose(rng, 0.1);
  pose.rotation = euler_to_rotation(0.1, -0.05, 0.2);
  Tensor d = g.leaf(depth, Shape{n, 1});
  Tensor pixels = g.constant(px, Shape{n, 2});
  Tensor f = g.leaf(Array::Constant(1, k.focal()), Shape{});
  Tensor pts = geo::unproject(d, pixels, f, k);
  Tensor moved = geo::transform(geo::constant_pose(g, pose), pts);
  auto proj = geo::project(moved, f, k);
  REQUIRE(proj.rows.size() == static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto expected = project(pose.apply(unproject(Vec2(px[2 * i], px[2 * i + 1]), depth[i], k)), k);
    REQUIRE(expected);
    CHECK(std::abs(proj.uv.matrix()(i, 0) - expected->x()) < 1e-14);
    CHECK(std::abs(proj.uv.matrix()(i, 1) - expected->y()) < 1e-14);
  }

  Array angles(3);
  angles << 0.1, -0.05, 0.2;
  Tensor r = geo::euler_to_rotation(g.constant(angles, Shape{3}));
  CHECK((r.matrix() - pose.rotation).cwiseAbs().maxCoeff() < 1e-15);

  PoseSE3 a = random_pose(rng), b = random_pose(rng);
  auto rel = geo::relative_pose(geo::constant_pose(g, a), geo::constant_pose(g, b)).value();
  auto expected_rel = relative_pose(a, b);
  CHECK((rel.matrix() - expected_rel.matrix()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tensor geometry gradients match finite differences") {
  using namespace flowsfm::testing;
  Intrinsics k(1.2, 32, 24);
  std::mt19937_64 rng(8);
  const int n = 6;
  Array px(2 * n);
  for (int i = 0; i < n; ++i) {
    px[2 * i] = 0.2 + 0.1 * i;
    px[2 * i + 1] = 0.1 + 0.08 * i;
  }
  std::vector<Array> values = {random_array(n, rng, 0.8, 2.0), Array::Constant(1, 1.2),
                               random_array(3, rng, -0.3, 0.3), random_array(3, rng, -0.1, 0.1)};
  std::vector<Shape> shapes = {{n, 1}, {}, {3}, {1, 3}};
  LossFn f = [&](Graph& g, const std::vector<Tensor>& l) {
    geo::PoseTensor p{geo::euler_to_rotation(l[2]), l[3]};
    auto proj = geo::project(geo::transform(p, geo::unproject(l[0], g.constant(px, Shape{n, 2}), l[1], k)), l[1], k);
    return ad::sum(ad::square(proj.uv));
  };
  auto r = check_gradient(f, values, shapes, all_probes(values));
  CHECK(r.relative_error < 1e-6);
}
