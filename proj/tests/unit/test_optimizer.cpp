#include <doctest.h>

#include "flowsfm/optimizer.hpp"
#include "flowsfm/synthworld.hpp"

#include <cmath>

using namespace flowsfm;

namespace {

Problem small_problem(int frames = 4, std::uint64_t seed = 0) {
  SceneSpec s;
  s.frames = frames;
  s.width = 16;
  s.height = 12;
  s.seed = seed;
  SceneGT gt = generate(s);
  Correspondences c = render_correspondences(gt);
  Problem p;
  p.width = s.width;
  p.height = s.height;
  p.frames = frames;
  p.flows = c.flows;
  p.tracks = c.tracks;
  p.gt = GroundTruth{gt.poses, s.focal, gt.depth};
  return p;
}

OptimizerConfig short_config(int stage1, int stage2) {
  OptimizerConfig c = OptimizerConfig::tuned();
  c.stage1_steps = stage1;
  c.stage2_steps = stage2;
  c.candidate_count = 12;
  return c;
}

}  // namespace

TEST_CASE("Adam matches the textbook recurrence for t = 1, 2, 3") {
  // lr 0.1, gradients 1, -2, 0.5 from x = 1:
  //   t=1: m=0.1, v=1e-3, mhat=1, vhat=1            -> x = 1 - 0.1/(1+1e-8)
  //   t=2: m=-0.11, v=4.999e-3, mhat=-0.11/0.19, vhat=4.999e-3/1.999e-3
  //   t=3: m=-0.049, v=5.244001e-3, bias factors 0.271 and 2.997001e-3
  ad::Array x = ad::Array::Constant(1, 1.0), m = ad::Array::Zero(1), v = ad::Array::Zero(1);
  const double expect[] = {0.900000001, 0.9366103534720749, 0.9502794196738216};
  const double grads[] = {1.0, -2.0, 0.5};
  for (int t = 1; t <= 3; ++t) {
    adam_update(x, m, v, ad::Array::Constant(1, grads[t - 1]), 0.1, AdamConfig{}, t);
    CHECK(x[0] == doctest::Approx(expect[t - 1]).epsilon(1e-14));
  }
  // First step magnitude is lr * |g| / (|g| + eps) with sign -sign(g).
  ad::Array y = ad::Array::Constant(1, 0.0), my = ad::Array::Zero(1), vy = ad::Array::Zero(1);
  adam_update(y, my, vy, ad::Array::Constant(1, -3.0), 3e-5, AdamConfig{}, 1);
  CHECK(y[0] == doctest::Approx(3e-5 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));

  // Zero gradient leaves the parameter unchanged.
  ad::Array z = ad::Array::Constant(3, 0.25), mz = ad::Array::Zero(3), vz = ad::Array::Zero(3);
  adam_update(z, mz, vz, ad::Array::Zero(3), 0.1, AdamConfig{}, 1);
  CHECK((z == 0.25).all());
}

TEST_CASE("config defaults, JSON round trip and validation") {
  OptimizerConfig d;
  CHECK(d.total_steps() == 2000);
  CHECK(d.lr == 3e-5);
  CHECK(d.learning_rate("head") == 3e-5);
  OptimizerConfig t = OptimizerConfig::tuned();
  t.ablation.no_tracks = true;
  t.frames = {2, 3, 4};
  t.seed = 99;
  OptimizerConfig back = config_from_json(config_to_json(t));
  CHECK(config_to_json(back) == config_to_json(t));
  CHECK(back.ablation.no_tracks);
  CHECK(back.learning_rate("depth") == t.learning_rate("depth"));
  OptimizerConfig partial = config_from_json(R"({"stage1_steps": 5, "ablation": {"single_stage": true}})");
  CHECK(partial.stage1_steps == 5);
  CHECK(partial.stage2_steps == 1000);
  CHECK(partial.ablation.single_stage);
  CHECK_THROWS_AS(config_from_json(R"({"stage1_step": 5})"), OptimizerError);
  CHECK_THROWS_AS(config_from_json(R"({"group_lr": {"depht": 0.1}})"), OptimizerError);
  CHECK_THROWS_AS(config_from_json(R"({"lr": -1})"), OptimizerError);
  CHECK_THROWS_AS(config_from_json("{"), OptimizerError);
  CHECK(AblationMode{}.describe() == "full");
  CHECK(AblationMode{true, false, false, true, false, false}.describe() == "explicit_depth+no_tracks");
}

TEST_CASE("two runs with equal seeds are bit-identical after 100 steps") {
  Problem p = small_problem();
  OptimizerConfig c = short_config(60, 40);
  Optimizer a(c, p), b(c, p);
  a.run();
  b.run();
  REQUIRE(a.state().params.size() == b.state().params.size());
  for (std::size_t i = 0; i < a.state().params.size(); ++i) {
    CHECK((a.state().params[i].value == b.state().params[i].value).all());
    CHECK((a.state().m[i] == b.state().m[i]).all());
  }
  CHECK(a.state().step == 100);
  Metrics ma = evaluate_estimate(a.estimate(), a.problem(), c);
  Metrics mb = evaluate_estimate(b.estimate(), b.problem(), c);
  CHECK(metrics_json(ma) == metrics_json(mb));
}

TEST_CASE("stage schedule") {
  Problem p = small_problem(3);
  SUBCASE("two stages switch exactly once") {
    Optimizer o(short_config(3, 2), p);
    auto h = o.run();
    REQUIRE(h.size() == 5);
    CHECK(h[2].stage == 1);
    CHECK(h[3].stage == 2);
    // The free focal starts from the last soft focal.
    CHECK(std::abs(h[3].focal - h[2].focal) < 1e-2);
  }
  SUBCASE("single stage never switches") {
    OptimizerConfig c = short_config(3, 2);
    c.ablation.single_stage = true;
    Optimizer o(c, p);
    for (const auto& r : o.run()) CHECK(r.stage == 1);
  }
  SUBCASE("explicit focal starts at its initial value") {
    OptimizerConfig c = short_config(3, 2);
    c.ablation.explicit_focal_from_start = true;
    Optimizer o(c, p);
    auto h = o.run();
    CHECK(h[0].stage == 2);
    CHECK(h[0].focal == 1.0);
  }
}

TEST_CASE("explicit poses receive gradients and never call Procrustes") {
  Problem p = small_problem(3);
  OptimizerConfig c = short_config(2, 2);
  c.ablation.explicit_pose = true;
  Optimizer o(c, p);
  auto e = o.evaluate();
  bool pose_grad = false;
  for (std::size_t i = 0; i < o.state().params.size(); ++i) {
    if (o.state().params[i].group == "pose" && e.grads[i].abs().maxCoeff() > 0.0) pose_grad = true;
  }
  CHECK(pose_grad);
  o.run();
  CHECK(o.procrustes_calls() == 0);

  Optimizer full(short_config(2, 2), p);
  full.run();
  CHECK(full.procrustes_calls() > 0);
}

TEST_CASE("non-finite state aborts with a diagnostic") {
  Problem p = small_problem(3);
  Optimizer o(short_config(2, 2), p);
  ad::Array bad = o.state().params[1].value;
  bad[0] = std::nan("");
  o.set_param(1, bad);
  CHECK_THROWS_AS(o.step(), OptimizerError);
}

TEST_CASE("loss trends down on a noiseless scene") {
  Problem p = small_problem(4, 5);
  OptimizerConfig c = short_config(300, 300);
  Optimizer o(c, p);
  auto h = o.run();
  CHECK(h.back().loss.total < 0.5 * h.front().loss.total);
  // Over any 200-step window after step 100 the loss does not rise by more
  // than 5% (the stage switch included).
  for (std::size_t s = 100; s + 200 < h.size(); ++s) {
    CAPTURE(s);
    CHECK(h[s + 200].loss.total <= 1.05 * h[s].loss.total);
  }
}

TEST_CASE("frame selection re-indexes flows, tracks and ground truth") {
  Problem p = small_problem(5);
  Dataset d;
  d.width = p.width;
  d.height = p.height;
  d.frames = p.frames;
  d.flows = p.flows;
  d.tracks = p.tracks;
  d.gt = p.gt;
  Problem s = select_frames(d, {1, 2, 3});
  CHECK(s.frames == 3);
  REQUIRE(s.flows.size() == 2);
  CHECK(s.flows[0].source == 0);
  CHECK(s.flows[0].displacement == p.flows[1].displacement);
  CHECK(s.gt->poses.size() == 3);
  CHECK(s.gt->poses[0].translation == p.gt->poses[1].translation);
  for (const auto& t : s.tracks.tracks) CHECK(t.position.size() == 3);
  CHECK_THROWS_AS(select_frames(d, {0, 2}), OptimizerError);
  CHECK_THROWS_AS(select_frames(d, {3, 4, 5}), OptimizerError);
}
