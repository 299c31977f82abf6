#include <doctest.h>

#include "flowsfm/loss.hpp"
#include "unit/gradcheck.hpp"

#include <cmath>
#include <random>

using namespace flowsfm;
using ad::Array;
using ad::Graph;
using ad::Shape;
using ad::Tensor;

namespace {

// A small three-frame world with exact correspondences built from the value
// geometry (no tape involved).
struct World {
  int w = 16;
  int h = 12;
  Intrinsics k{1.1, 16, 12};
  std::vector<Array> depth;          // per frame, [H*W]
  std::vector<PoseSE3> adjacent;     // P_{k,k+1}
  std::vector<FlowField> flows;
  TrackSet tracks;
};

World make_world(std::uint64_t seed) {
  World wd;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(2.0, 3.0);
  for (int f = 0; f < 3; ++f) {
    Array a(wd.w * wd.h);
    for (auto& v : a) v = d(rng);
    wd.depth.push_back(a);
  }
  wd.adjacent = {EulerPose{0.02, -0.01, 0.005, Vec3(0.05, 0.01, -0.02)}.to_pose(),
                 EulerPose{-0.015, 0.02, 0.0, Vec3(-0.03, 0.02, 0.04)}.to_pose()};
  for (int f = 0; f < 2; ++f) {
    FlowField flow(f, wd.w, wd.h);
    for (int r = 0; r < wd.h; ++r)
      for (int c = 0; c < wd.w; ++c) {
        const Vec2 u = wd.k.pixel_center(c, r);
        const Vec3 x = wd.adjacent[f].apply(unproject(u, wd.depth[f][r * wd.w + c], wd.k));
        flow.displacement[flow.index(c, r)] = *project(x, wd.k) - u;
      }
    wd.flows.push_back(flow);
  }
  // Tracks from pixel centres of frame 0 into frames 1 and 2.
  wd.tracks.frame_count = 3;
  const PoseSE3 p02 = compose(wd.adjacent[0], wd.adjacent[1]);
  for (int r = 1; r < wd.h; r += 3)
    for (int c = 1; c < wd.w; c += 3) {
      const Vec2 u = wd.k.pixel_center(c, r);
      const Vec3 x = unproject(u, wd.depth[0][r * wd.w + c], wd.k);
      Track t;
      t.query_frame = 0;
      t.position = {u, *project(wd.adjacent[0].apply(x), wd.k), *project(p02.apply(x), wd.k)};
      t.visible = {1, 1, 1};
      wd.tracks.tracks.push_back(t);
    }
  return wd;
}

struct Prepared {
  std::vector<FlowPairData> flows;
  std::vector<TrackPairData> tracks;
};

Prepared prepare(const World& wd) {
  Prepared p;
  for (const auto& f : wd.flows) p.flows.push_back(prepare_flow_pair(f));
  p.tracks = prepare_tracks(wd.tracks, wd.w);
  return p;
}

LossTerms evaluate(Graph& g, const World& wd, const Prepared& p, const std::vector<Tensor>& depths,
                   const std::vector<geo::PoseTensor>& adjacent, const Tensor& focal, const LossConfig& cfg) {
  LossInputs in;
  in.intrinsics = &wd.k;
  in.focal = focal;
  in.depths = depths;
  in.adjacent = adjacent;
  in.cam_to_world = chain_poses(g, adjacent);
  in.flows = &p.flows;
  in.tracks = &p.tracks;
  return total_loss(g, in, cfg);
}

}  // namespace

TEST_CASE("identity pose induces the source pixel") {
  Graph g;
  Intrinsics k(0.9, 16, 12);
  std::mt19937_64 rng(1);
  Array uv = testing::random_array(20, rng, 0.0, 0.75);
  Tensor src = g.constant(uv, {10, 2});
  Tensor depth = g.constant(testing::random_array(10, rng, 0.5, 4.0), {10, 1});
  auto proj = induced_correspondence(src, depth, g.constant(0.9), k, geo::constant_pose(g, PoseSE3::identity()));
  REQUIRE(proj.rows.size() == 10);
  CHECK((proj.uv.value() - uv).abs().maxCoeff() < 1e-15);
}

TEST_CASE("forward motion pushes correspondences away from the centre") {
  Graph g;
  Intrinsics k(1.0, 32, 24);
  const Vec2 c = k.principal_point();
  Array uv(8);
  uv << 0.2, 0.1, 0.8, 0.6, 0.3, 0.7, 0.9, 0.05;
  Tensor src = g.constant(uv, {4, 2});
  Tensor depth = g.constant(Array::Constant(4, 2.0), {4, 1});
  // Camera advances along +z, so scene points move toward the camera.
  PoseSE3 fwd{Mat3::Identity(), Vec3(0, 0, -0.5)};
  auto proj = induced_correspondence(src, depth, g.constant(1.0), k, geo::constant_pose(g, fwd));
  for (int r = 0; r < 4; ++r) {
    const Vec2 u(uv[2 * r], uv[2 * r + 1]);
    const Vec2 v(proj.uv.value()[2 * r], proj.uv.value()[2 * r + 1]);
    // Expansion factor is exactly z / (z - 0.5) = 4/3 about the principal point.
    CHECK(((v - c) - (u - c) * (4.0 / 3.0)).norm() < 1e-14);
  }
}

TEST_CASE("3-4-5 residual") {
  Graph g;
  Array r(2);
  r << 0.3, 0.4;
  Tensor l = correspondence_norm(g.constant(r, {1, 2}), 1e-8);
  CHECK(l.item() == doctest::Approx(std::sqrt(0.25 + 1e-8) - 1e-4).epsilon(1e-15));
  CHECK(std::abs(l.item() - 0.5) < 1.0001e-4);
  Tensor z = correspondence_norm(g.constant(Array::Zero(2), {1, 2}), 1e-8);
  CHECK(z.item() == 0.0);
}

TEST_CASE("loss vanishes at ground truth") {
  World wd = make_world(2);
  Prepared p = prepare(wd);
  Graph g;
  std::vector<Tensor> depths;
  for (const auto& d : wd.depth) depths.push_back(g.constant(d, {wd.h, wd.w}));
  std::vector<geo::PoseTensor> adj;
  for (const auto& a : wd.adjacent) adj.push_back(geo::constant_pose(g, a));
  LossTerms t = evaluate(g, wd, p, depths, adj, g.constant(1.1), {});
  LossBreakdown b = breakdown(t);
  CHECK(b.flow_count == 2u * wd.w * wd.h);
  CHECK(b.track_count == 2 * wd.tracks.tracks.size());
  CHECK(b.total < 1e-12);
  CHECK(b.total >= 0.0);
}

TEST_CASE("track weighting, masking and errors") {
  World wd = make_world(3);
  Prepared p = prepare(wd);
  Graph g;
  std::vector<Tensor> depths;
  for (const auto& d : wd.depth) depths.push_back(g.constant(d * 1.3, {wd.h, wd.w}));
  std::vector<geo::PoseTensor> adj;
  for (const auto& a : wd.adjacent) adj.push_back(geo::constant_pose(g, a));
  LossConfig with_tracks;
  LossConfig no_tracks{0.0, 1e-8};
  LossBreakdown a = breakdown(evaluate(g, wd, p, depths, adj, g.constant(1.1), with_tracks));
  LossBreakdown b = breakdown(evaluate(g, wd, p, depths, adj, g.constant(1.1), no_tracks));
  CHECK(a.track > 0.0);
  CHECK(a.total == doctest::Approx(a.flow + a.track).epsilon(1e-15));
  CHECK(b.total == b.flow);
  CHECK(b.track_count == 0);

  // Scaling all weights leaves the weighted mean unchanged.
  LossInputs in;
  in.intrinsics = &wd.k;
  in.focal = g.constant(1.1);
  in.depths = depths;
  in.adjacent = adj;
  in.cam_to_world = chain_poses(g, adj);
  in.flows = &p.flows;
  for (const auto& fp : p.flows) in.pixel_weights.push_back(g.constant(Array::Constant(fp.size(), 0.3), {fp.size(), 1}));
  CHECK(total_loss(g, in, no_tracks).total.item() == doctest::Approx(b.total).epsilon(1e-13));

  // Everything masked: the flow mean is undefined, so tracks alone must carry it.
  World masked = wd;
  for (auto& f : masked.flows) std::fill(f.valid.begin(), f.valid.end(), 0);
  Prepared pm = prepare(masked);
  LossBreakdown c = breakdown(evaluate(g, masked, pm, depths, adj, g.constant(1.1), with_tracks));
  CHECK(c.flow_count == 0);
  CHECK(c.flow == 0.0);
  CHECK(c.total == doctest::Approx(c.track).epsilon(1e-15));
  CHECK_THROWS_AS(evaluate(g, masked, pm, depths, adj, g.constant(1.1), no_tracks), LossError);
}

TEST_CASE("loss gradient w.r.t. depth, pose and focal matches finite differences") {
  World wd = make_world(4);
  Prepared p = prepare(wd);
  std::mt19937_64 rng(5);
  std::vector<Array> values;
  std::vector<Shape> shapes;
  for (const auto& d : wd.depth) {
    values.push_back(d * 1.1 + testing::random_array(d.size(), rng, -0.1, 0.1));
    shapes.push_back({wd.h, wd.w});
  }
  values.push_back(testing::random_array(6, rng, -0.05, 0.05));  // euler + t, pair 0
  values.push_back(testing::random_array(6, rng, -0.05, 0.05));  // pair 1
  shapes.push_back({6});
  shapes.push_back({6});
  values.push_back(Array::Constant(1, 1.05));
  shapes.push_back({});
  testing::LossFn f = [&](Graph& g, const std::vector<Tensor>& x) {
    std::vector<geo::PoseTensor> adj;
    for (int q = 0; q < 2; ++q) {
      const ad::Index ang[] = {0, 1, 2};
      const ad::Index tr[] = {3, 4, 5};
      Tensor pv = x[3 + q];
      adj.push_back({geo::euler_to_rotation(ad::gather(pv, ang)), ad::gather(pv, tr, {1, 3})});
    }
    return evaluate(g, wd, p, {x[0], x[1], x[2]}, adj, x[5], {}).total;
  };
  auto check = testing::check_gradient(f, values, shapes, testing::random_probes(values, 40, 7));
  CHECK(check.relative_error < 1e-4);
  // Pose and focal entries explicitly.
  std::vector<testing::Probe> probes;
  for (ad::Index e = 0; e < 6; ++e) probes.push_back({3, e});
  probes.push_back({5, 0});
  CHECK(testing::check_gradient(f, values, shapes, probes).relative_error < 1e-4);
}

TEST_CASE("loss is nonnegative for random parameters") {
  World wd = make_world(6);
  Prepared p = prepare(wd);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    std::vector<Tensor> depths;
    for (int f = 0; f < 3; ++f) depths.push_back(g.constant(testing::random_array(wd.w * wd.h, rng, 0.1, 5.0), {wd.h, wd.w}));
    std::vector<geo::PoseTensor> adj;
    for (int q = 0; q < 2; ++q) {
      Array e = testing::random_array(6, rng, -0.3, 0.3);
      adj.push_back(geo::constant_pose(g, EulerPose{e[0], e[1], e[2], Vec3(e[3], e[4], e[5])}.to_pose()));
    }
    CHECK(evaluate(g, wd, p, depths, adj, g.constant(0.7), {}).total.item() >= 0.0);
  }
}
