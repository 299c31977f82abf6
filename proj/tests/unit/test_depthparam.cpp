#include <doctest.h>

#include "flowsfm/depthparam.hpp"
#include "unit/gradcheck.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace flowsfm;
using ad::Array;
using ad::Graph;
using ad::Shape;
using ad::Tensor;

namespace {

double total_variation(const Array& d, int w, int h) {
  double tv = 0.0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (c + 1 < w) tv += std::abs(d[r * w + c + 1] - d[r * w + c]);
      if (r + 1 < h) tv += std::abs(d[(r + 1) * w + c] - d[r * w + c]);
    }
  return tv;
}

// Least-squares fit of a single frame to `target` by plain gradient descent.
Array fit(DepthModel& model, const Array& target, int steps, double lr) {
  auto& p = model.params()[0];
  for (int it = 0; it < steps; ++it) {
    Graph g;
    Tensor raw = g.leaf(p.value, p.shape);
    Tensor d = ad::reshape(model.emit(g, raw), {model.width() * model.height()});
    Tensor loss = ad::sum(ad::square(d - g.constant(target, {target.size()})));
    auto grads = g.backward(loss);
    p.value -= lr * grads[raw];
  }
  return model.emit_values(0);
}

}  // namespace

TEST_CASE("zero parameters emit ln 2 plus the floor") {
  for (DepthKind kind : {DepthKind::Grid, DepthKind::Free}) {
    DepthModel m({kind, 8, 1e-3}, 20, 13, 2);
    Array d = m.emit_values(1);
    CHECK(d.size() == 20 * 13);
    CHECK((d - (std::numbers::ln2 + 1e-3)).abs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("grid extents round up and a constant grid stays constant") {
  DepthModel m({DepthKind::Grid, 8, 1e-3}, 64, 44, 1);
  CHECK(m.grid_width() == 8);
  CHECK(m.grid_height() == 6);
  m.params()[0].value.setConstant(1.7);
  Array d = m.emit_values(0);
  const double expect = std::log1p(std::exp(1.7)) + 1e-3;
  CHECK((d - expect).abs().maxCoeff() < 1e-14);
}

TEST_CASE("mean depth gradient matches finite differences and bilinear weight share") {
  DepthModel m({DepthKind::Grid, 8, 1e-3}, 40, 28, 1);
  const Shape shape = m.params()[0].shape;
  std::mt19937_64 rng(5);
  std::vector<Array> values = {testing::random_array(ad::numel(shape), rng)};
  testing::LossFn f = [&](Graph&, const std::vector<Tensor>& x) { return ad::mean(m.emit(x[0].graph(), x[0])); };
  auto check = testing::check_gradient(f, values, {shape}, testing::all_probes(values));
  CHECK(check.relative_error < 1e-8);

  // At raw = 0 softplus' = 1/2, so each cell's gradient is half its bilinear
  // weight share, and the shares sum to one.
  std::vector<Array> zeros = {Array::Zero(ad::numel(shape))};
  auto at_zero = testing::check_gradient(f, zeros, {shape}, testing::all_probes(zeros));
  double total = 0.0;
  for (double v : at_zero.numeric) total += v;
  CHECK(total == doctest::Approx(0.5).epsilon(1e-8));
  CHECK(at_zero.relative_error < 1e-8);
}

TEST_CASE("positivity holds for extreme parameters") {
  std::mt19937_64 rng(6);
  for (DepthKind kind : {DepthKind::Grid, DepthKind::Free}) {
    DepthModel m({kind, 4, 1e-3}, 16, 12, 1);
    for (int trial = 0; trial < 20; ++trial) {
      m.params()[0].value = testing::random_array(m.params()[0].value.size(), rng, -800.0, 50.0);
      Array d = m.emit_values(0);
      CHECK(d.minCoeff() >= 1e-3);
      CHECK(d.allFinite());
    }
  }
}

TEST_CASE("grid depth fit is smoother than a free fit of the same noisy target") {
  const int w = 32, h = 24;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> noise(0.0, 0.05);
  Array target(w * h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      target[r * w + c] = 2.0 + 0.5 * std::cos(0.15 * c) * std::sin(0.2 * r) + noise(rng);
  DepthModel grid({DepthKind::Grid, 8, 1e-3}, w, h, 1);
  DepthModel free({DepthKind::Free, 8, 1e-3}, w, h, 1);
  Array dg = fit(grid, target, 400, 0.01);
  Array df = fit(free, target, 400, 0.2);
  // Both fits must actually approach the target.
  CHECK(std::sqrt((dg - target).square().mean()) < 0.3);
  CHECK(std::sqrt((df - target).square().mean()) < 0.06);
  CHECK(total_variation(dg, w, h) <= total_variation(df, w, h));
}

TEST_CASE("weight head: zero final layer gives 0.5, range and ablation") {
  WeightHead head(WeightHead::kFeatures, 11);
  Graph g;
  std::vector<Tensor> layers;
  for (const auto& p : head.params()) layers.push_back(g.leaf(p.value, p.shape));
  std::mt19937_64 rng(8);
  Array feats = testing::random_array(1000 * 5, rng, -3.0, 3.0);
  Tensor x = g.constant(feats, {1000, 5});
  Tensor w = emit_weights(&head, layers, x);
  CHECK(w.shape() == Shape{1000, 1});
  CHECK((w.value() - 0.5).abs().maxCoeff() == 0.0);
  Tensor ones = emit_weights(nullptr, layers, x);
  CHECK((ones.value() - 1.0).abs().maxCoeff() == 0.0);

  // Perturb the final layer so outputs vary, then sample 10^4 random inputs.
  WeightHead trained(WeightHead::kFeatures, 12);
  trained.params()[4].value = testing::random_array(WeightHead::kHidden, rng, -2.0, 2.0);
  trained.params()[5].value[0] = 0.3;
  Graph g2;
  std::vector<Tensor> l2;
  for (const auto& p : trained.params()) l2.push_back(g2.constant(p.value, p.shape));
  Tensor big = g2.constant(testing::random_array(10000 * 5, rng, -10.0, 10.0), {10000, 5});
  Array v = emit_weights(&trained, l2, big).value();
  CHECK(v.minCoeff() > 0.0);
  CHECK(v.maxCoeff() < 1.0);
  CHECK(v.maxCoeff() - v.minCoeff() > 0.1);
}

TEST_CASE("weight head gradients match finite differences") {
  WeightHead head(3, 13);
  std::mt19937_64 rng(9);
  for (auto& p : head.params()) p.value = testing::random_array(p.value.size(), rng, -0.5, 0.5);
  std::vector<Array> values;
  std::vector<Shape> shapes;
  for (const auto& p : head.params()) {
    values.push_back(p.value);
    shapes.push_back(p.shape);
  }
  const Array feats = testing::random_array(7 * 3, rng);
  testing::LossFn f = [&](Graph& g, const std::vector<Tensor>& x) {
    return ad::sum(head.forward(x, g.constant(feats, {7, 3})));
  };
  auto check = testing::check_gradient(f, values, shapes, testing::random_probes(values, 60, 1));
  CHECK(check.relative_error < 1e-7);
}

TEST_CASE("weight features concatenate position, flow and depth") {
  Graph g;
  Tensor px = g.constant(Array::Constant(4, 0.25), {2, 2});
  Tensor fl = g.constant(Array::Constant(4, -0.1), {2, 2});
  Tensor d = g.leaf(Array::Constant(2, 3.0), {2, 1});
  Tensor f = weight_features(px, fl, d);
  CHECK(f.shape() == Shape{2, 5});
  CHECK(f.value()[4] == 3.0);
  CHECK(f.value()[2] == -0.1);
}
