#include <doctest.h>

#include "flowsfm/diffcore.hpp"
#include "unit/gradcheck.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>
#include <numeric>
#include <random>

using namespace flowsfm;
using namespace flowsfm::testing;
using ad::Array;
using ad::Graph;
using ad::OpKind;
using ad::Shape;
using ad::Tensor;

namespace {

Array arr(std::initializer_list<double> v) {
  Array a(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), a.data());
  return a;
}

// U (3x3), S (3) and V (3x3) views into an svd3 result.
struct SvdParts {
  Tensor u, s, v;
};

SvdParts split_svd(const Tensor& packed) {
  std::vector<ad::Index> iu(9), is(3), iv(9);
  std::iota(iu.begin(), iu.end(), 0);
  std::iota(is.begin(), is.end(), 9);
  std::iota(iv.begin(), iv.end(), 12);
  return {ad::gather(packed, iu, Shape{3, 3}), ad::gather(packed, is, Shape{3, 1}),
          ad::gather(packed, iv, Shape{3, 3})};
}

// A scalar of (U, S, V) that is invariant to the per-column sign gauge of the SVD.
Tensor gauge_invariant_objective(Graph& g, const Tensor& a) {
  auto p = split_svd(ad::svd3(a));
  Tensor d1 = g.constant(arr({1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, -1.5}), Shape{3, 3});
  Tensor d2 = g.constant(arr({0.5, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 3.0}), Shape{3, 3});
  Tensor c1 = g.constant(arr({0.3, -0.2, 0.9, 0.4, 1.1, -0.7, 0.2, 0.5, -0.3}), Shape{3, 3});
  Tensor c2 = g.constant(arr({-0.6, 0.8, 0.1, 0.3, -0.4, 0.9, 1.2, -0.1, 0.7}), Shape{3, 3});
  Tensor c3 = g.constant(arr({0.2, 0.4, -0.8, -0.5, 0.6, 0.3, 0.9, -0.2, 0.1}), Shape{3, 3});
  Tensor cs = g.constant(arr({0.7, -1.3, 2.1}), Shape{3, 1});
  Tensor uu = ad::matmul(ad::matmul(p.u, d1), ad::transpose(p.u));
  Tensor vv = ad::matmul(ad::matmul(p.v, d2), ad::transpose(p.v));
  Tensor uv = ad::matmul(p.u, ad::transpose(p.v));
  return ad::sum(c1 * uu) + ad::sum(c2 * vv) + ad::sum(c3 * uv) + ad::sum(cs * p.s);
}

}  // namespace

TEST_CASE("add: values and linear adjoints") {
  Graph g;
  Tensor a = g.leaf(arr({1, 2}), {2});
  Tensor b = g.leaf(arr({3, 4}), {2});
  const Tensor inputs[] = {a, b};
  Tensor c = g.record(OpKind::Add, inputs);
  CHECK(c.value()[0] == 4.0);
  CHECK(c.value()[1] == 6.0);
  auto grads = g.backward(ad::sum(c));
  CHECK(grads[a][0] == 1.0);
  CHECK(grads[a][1] == 1.0);
  CHECK(grads[b][0] == 1.0);
  CHECK(grads[b][1] == 1.0);
}

TEST_CASE("sigmoid at zero") {
  Graph g;
  Tensor x = g.leaf(arr({0.0}), {});
  Tensor y = ad::sigmoid(x);
  CHECK(y.item() == 0.5);
  CHECK(g.backward(y)[x][0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("matmul gradients match central differences") {
  std::mt19937_64 rng(7);
  std::vector<Array> values = {random_array(6, rng), random_array(6, rng)};
  std::vector<Shape> shapes = {{2, 3}, {3, 2}};
  Array weights = random_array(4, rng);
  LossFn f = [&](Graph& g, const std::vector<Tensor>& l) {
    return ad::sum(ad::mul_const(ad::matmul(l[0], l[1]), weights));
  };
  auto r = check_gradient(f, values, shapes, all_probes(values));
  CHECK(r.relative_error < 1e-6);
}

TEST_CASE("backward: x*x at 3 gives 6") {
  Graph g;
  Tensor x = g.leaf(arr({3.0}), {});
  CHECK(g.backward(x * x)[x][0] == 6.0);
}

TEST_CASE("backward: sum(softplus(x)) gradient is sigmoid(x)") {
  std::mt19937_64 rng(3);
  Array xs = random_array(50, rng, -20, 20);
  Graph g;
  Tensor x = g.leaf(xs, {50});
  auto grads = g.backward(ad::sum(ad::softplus(x)));
  for (Eigen::Index i = 0; i < xs.size(); ++i) {
    CHECK(grads[x][i] == doctest::Approx(1.0 / (1.0 + std::exp(-xs[i]))).epsilon(1e-14));
  }
}

TEST_CASE("backward: non-scalar loss is rejected, unreached leaves get zero") {
  Graph g;
  Tensor x = g.leaf(arr({1, 2, 3}), {3});
  Tensor unused = g.leaf(arr({5, 6}), {2});
  CHECK_THROWS_AS(g.backward(ad::exp(x)), ad::ShapeError);
  auto grads = g.backward(ad::sum(ad::exp(x)));
  CHECK(grads[unused].size() == 2);
  CHECK(grads[unused].isZero(0.0));
}

TEST_CASE("shape mismatch errors name the op and both shapes") {
  Graph g;
  Tensor a = g.leaf(arr({1, 2, 3}), {3});
  Tensor b = g.leaf(arr({1, 2}), {2});
  try {
    (void)ad::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ad::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[3]") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
  }
  Tensor m = g.leaf(Array::Ones(6), {2, 3});
  CHECK_THROWS_WITH_AS((void)ad::matmul(m, m), doctest::Contains("matmul"), ad::ShapeError);
}

TEST_CASE("every differentiable op passes a finite-difference check at 10 random points") {
  std::mt19937_64 rng(11);
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    double lo, hi;
    std::function<Tensor(Graph&, const std::vector<Tensor>&)> body;
  };
  const std::vector<Case> cases = {
      {"add-broadcast", {{4, 3}, {1, 3}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return l[0] + l[1]; }},
      {"sub-column", {{4, 3}, {4, 1}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return l[0] - l[1]; }},
      {"mul-scalar", {{4, 3}, {}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return l[0] * l[1]; }},
      {"div", {{5}, {5}}, 0.5, 2,
       [](Graph&, const std::vector<Tensor>& l) { return l[0] / l[1]; }},
      {"exp", {{5}}, -2, 2, [](Graph&, const std::vector<Tensor>& l) { return ad::exp(l[0]); }},
      {"log", {{5}}, 0.2, 3, [](Graph&, const std::vector<Tensor>& l) { return ad::log(l[0]); }},
      {"softplus", {{5}}, -4, 4,
       [](Graph&, const std::vector<Tensor>& l) { return ad::softplus(l[0]); }},
      {"sigmoid", {{5}}, -4, 4,
       [](Graph&, const std::vector<Tensor>& l) { return ad::sigmoid(l[0]); }},
      {"sqrt", {{5}}, 0.2, 3, [](Graph&, const std::vector<Tensor>& l) { return ad::sqrt(l[0]); }},
      {"square", {{5}}, -2, 2,
       [](Graph&, const std::vector<Tensor>& l) { return ad::square(l[0]); }},
      {"sin-cos", {{5}}, -3, 3,
       [](Graph&, const std::vector<Tensor>& l) { return ad::sin(l[0]) * ad::cos(l[0]); }},
      {"scale-shift", {{5}}, -3, 3,
       [](Graph&, const std::vector<Tensor>& l) { return 2.5 * l[0] + 0.75; }},
      {"matmul-transpose", {{3, 4}, {3, 2}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return ad::matmul(ad::transpose(l[0]), l[1]); }},
      {"affine", {{5, 3}, {3, 4}, {1, 4}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return ad::affine(l[0], l[1], l[2]); }},
      {"relu", {{6}}, -2, 2, [](Graph&, const std::vector<Tensor>& l) { return ad::relu(l[0]); }},
      {"mean", {{3, 4}}, -1, 1,
       [](Graph& g, const std::vector<Tensor>& l) { return ad::mean(l[0]) * g.constant(1.0); }},
      {"concat-axis1", {{3, 2}, {3, 1}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return ad::concat(l, 1); }},
      {"concat-axis0", {{2, 3}, {1, 3}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return ad::concat(l, 0); }},
      {"slice-cols", {{4, 5}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) { return ad::slice_cols(l[0], 1, 3); }},
      {"gather-fanout", {{6}}, -1, 1,
       [](Graph&, const std::vector<Tensor>& l) {
         const ad::Index idx[] = {0, 3, 3, 5, 1};
         return ad::gather(l[0], idx);
       }},
      {"grid-sample", {{4, 5}}, -1, 1,
       [](Graph& g, const std::vector<Tensor>& l) {
         Array c(8);
         c << 0.7, 0.5, 2.3, 1.9, 4.4, 3.6, 5.9, -0.2;
         return ad::grid_sample(l[0], g.constant(c, Shape{4, 2}));
       }},
      {"svd3", {{3, 3}}, -1, 1,
       [](Graph& g, const std::vector<Tensor>& l) { return gauge_invariant_objective(g, l[0]); }},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Array> values;
      for (const Shape& s : c.shapes) values.push_back(random_array(ad::numel(s), rng, c.lo, c.hi));
      // A random linear functional makes every output entry matter.
      Graph probe;
      std::vector<Tensor> pl;
      for (std::size_t k = 0; k < values.size(); ++k) pl.push_back(probe.leaf(values[k], c.shapes[k]));
      const ad::Index n_out = c.body(probe, pl).numel();
      Array w = random_array(n_out, rng);
      LossFn f = [&](Graph& g, const std::vector<Tensor>& l) {
        return ad::sum(ad::mul_const(c.body(g, l), w));
      };
      auto r = check_gradient(f, values, c.shapes, all_probes(values));
      CHECK(r.relative_error < 1e-5);
    }
  }
}

TEST_CASE("svd3 backward: identity input") {
  Graph g;
  const Eigen::Matrix3d eye = Eigen::Matrix3d::Identity();
  Tensor a = g.leaf(Eigen::Map<const Array>(eye.data(), 9), {3, 3});
  auto p = split_svd(ad::svd3(a));
  CHECK(p.s.value().isApproxToConstant(1.0, 1e-15));
  auto grads = g.backward(ad::sum(p.s));
  Eigen::Matrix3d expected = Eigen::Matrix3d::Identity();
  for (int i = 0; i < 9; ++i) CHECK(grads[a][i] == doctest::Approx(expected(i / 3, i % 3)).epsilon(1e-12));
}

TEST_CASE("svd3 backward: random well-conditioned matrices match finite differences") {
  std::mt19937_64 rng(21);
  int checked = 0;
  while (checked < 10) {
    Array a = random_array(9, rng);
    Eigen::Matrix3d m = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(a.data());
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m);
    const auto s = svd.singularValues();
    if (s[2] < 0.1 || s[0] - s[1] < 0.1 || s[1] - s[2] < 0.1) continue;
    LossFn f = [](Graph& g, const std::vector<Tensor>& l) { return gauge_invariant_objective(g, l[0]); };
    auto r = check_gradient(f, {a}, {{3, 3}}, all_probes({a}));
    CHECK(r.relative_error < 1e-5);
    ++checked;
  }
}

TEST_CASE("svd3 backward: near-equal singular values stay finite") {
  Eigen::Matrix3d u = Eigen::AngleAxisd(0.3, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
  Eigen::Matrix3d v = Eigen::AngleAxisd(-0.8, Eigen::Vector3d(0, 1, -1).normalized()).toRotationMatrix();
  Eigen::Vector3d s(2.0, 2.0 - 1e-9, 0.5);
  Eigen::Matrix3d gu = Eigen::Matrix3d::Constant(0.3);
  Eigen::Matrix3d gv = Eigen::Matrix3d::Constant(-0.2);
  Eigen::Vector3d gs(1.0, 1.0, 1.0);
  gu(0, 1) = 1.7;
  gv(2, 0) = -0.9;
  Eigen::Matrix3d ga = ad::svd3_backward(u, s, v, gu, gs, gv);
  CHECK(ga.allFinite());
  CHECK(ga.norm() < 1e7);

  Eigen::Matrix3d bad = gu;
  bad(1, 1) = std::nan("");
  CHECK_THROWS_AS(ad::svd3_backward(u, s, v, bad, gs, gv), ad::GradientError);
}

TEST_CASE("gradient accumulation across fan-out is exactly additive") {
  std::mt19937_64 rng(5);
  Array xs = random_array(8, rng);
  auto f = [](const Tensor& x) { return ad::sum(ad::sigmoid(x) * ad::exp(x)); };
  Graph g1;
  Tensor x1 = g1.leaf(xs, {8});
  Array once = g1.backward(f(x1))[x1];
  Graph g2;
  Tensor x2 = g2.leaf(xs, {8});
  Array twice = g2.backward(f(x2) + f(x2))[x2];
  CHECK(((2.0 * once) == twice).all());
}

TEST_CASE("forward values and gradients are deterministic") {
  std::mt19937_64 rng(9);
  Array a = random_array(9, rng);
  Array b = random_array(12, rng);
  auto run = [&]() {
    Graph g;
    Tensor x = g.leaf(a, {3, 3});
    Tensor y = g.leaf(b, {3, 4});
    Tensor l = ad::sum(ad::softplus(ad::matmul(x, y))) + gauge_invariant_objective(g, x);
    auto grads = g.backward(l);
    return std::make_pair(l.item(), Array(grads[x]));
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK((g1 == g2).all());
}

TEST_CASE("grid_sample is exact at lattice points and rejects coordinate gradients") {
  Graph g;
  Array img(6);
  img << 1, 2, 3, 4, 5, 6;
  Tensor im = g.leaf(img, {2, 3});
  Array c(6);
  c << 0.5, 0.5, 2.5, 1.5, 1.0, 1.0;
  Tensor s = ad::grid_sample(im, g.constant(c, {3, 2}));
  CHECK(s.value()[0] == 1.0);
  CHECK(s.value()[1] == 6.0);
  CHECK(s.value()[2] == doctest::Approx((1 + 2 + 4 + 5) / 4.0));
  CHECK_THROWS_AS((void)ad::grid_sample(im, g.leaf(c, {3, 2})), ad::ShapeError);
}
