#include "flowsfm/posesolver.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace flowsfm {

using ad::Array;
using ad::Index;
using ad::Tensor;

std::vector<Vec2> sample_grid(int width, int height, int nx, int ny) {
  nx = std::min(nx, width);
  ny = std::min(ny, height);
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const double px = (i + 0.5) * width / nx;
      const double py = (j + 0.5) * height / ny;
      out.emplace_back(px / width, py / width);
    }
  }
  return out;
}

PairSamples sample_pair(const FlowField& flow, const std::vector<Vec2>& grid) {
  PairSamples s;
  s.source = flow.source;
  const double w = flow.width;
  const double h_norm = static_cast<double>(flow.height) / flow.width;
  for (std::size_t n = 0; n < grid.size(); ++n) {
    auto target = lookup_correspondence(flow, grid[n]);
    if (!target) continue;
    const Vec2& t = *target;
    if (!(t.x() >= 0.0 && t.x() <= 1.0 && t.y() >= 0.0 && t.y() <= h_norm)) continue;
    s.source_uv.push_back(grid[n]);
    s.target_uv.push_back(t);
    s.grid_index.push_back(static_cast<Index>(n));
  }
  const Index n = static_cast<Index>(s.size());
  s.source_px.resize(2 * n);
  s.target_px.resize(2 * n);
  s.source_norm.resize(2 * n);
  s.target_norm.resize(2 * n);
  s.flow.resize(2 * n);
  for (Index r = 0; r < n; ++r) {
    for (int c = 0; c < 2; ++c) {
      const double a = s.source_uv[r][c];
      const double b = s.target_uv[r][c];
      s.source_norm[2 * r + c] = a;
      s.target_norm[2 * r + c] = b;
      s.source_px[2 * r + c] = a * w;
      s.target_px[2 * r + c] = b * w;
      s.flow[2 * r + c] = b - a;
    }
  }
  return s;
}

MatchedClouds build_matches(const Tensor& depth_i, const Tensor& depth_j, const Tensor& focal,
                            const Intrinsics& k, const PairSamples& samples, const Tensor& weights) {
  const Index n = static_cast<Index>(samples.size());
  if (n < 3) {
    throw PoseSolverError("insufficient correspondences: " + std::to_string(n) +
                          " valid samples for pair " + std::to_string(samples.source) + ", need 3");
  }
  if (weights.shape() != ad::Shape{n, 1}) {
    throw ad::ShapeError("build_matches: weights have shape " + ad::to_string(weights.shape()) +
                         ", expected " + ad::to_string({n, 1}));
  }
  ad::Graph& g = depth_i.graph();
  Tensor src_px = g.constant(samples.source_px, {n, 2});
  Tensor dst_px = g.constant(samples.target_px, {n, 2});
  Tensor src = g.constant(samples.source_norm, {n, 2});
  Tensor dst = g.constant(samples.target_norm, {n, 2});
  MatchedClouds m;
  m.xi = geo::unproject(ad::grid_sample(depth_i, src_px), src, focal, k);
  m.xj = geo::unproject(ad::grid_sample(depth_j, dst_px), dst, focal, k);
  m.weights = weights;
  return m;
}

namespace {

void check_clouds(const MatchedClouds& m) {
  const Index n = m.xi.rows();
  if (m.xi.shape() != ad::Shape{n, 3} || m.xj.shape() != ad::Shape{n, 3} ||
      m.weights.shape() != ad::Shape{n, 1}) {
    throw ad::ShapeError("solve_procrustes: expected [N,3], [N,3], [N,1]; got " +
                         ad::to_string(m.xi.shape()) + ", " + ad::to_string(m.xj.shape()) + ", " +
                         ad::to_string(m.weights.shape()));
  }
  if (n < 3) throw PoseSolverError("insufficient correspondences: need at least 3 matches");
  const Array& w = m.weights.value();
  if (!m.xi.value().allFinite() || !m.xj.value().allFinite() || !w.allFinite()) {
    throw PoseSolverError("solve_procrustes: non-finite points or weights");
  }
  if ((w < 0.0).any() || !(w.sum() > 0.0)) {
    throw PoseSolverError("solve_procrustes: weights must be nonnegative with positive sum");
  }
  // Effective rank of the weighted, centred source cloud.
  auto x = m.xi.matrix();
  const Eigen::VectorXd wv = w.matrix();
  const Eigen::RowVector3d mu = (wv.transpose() * x) / wv.sum();
  const Eigen::MatrixX3d c = x.rowwise() - mu;
  const Eigen::Matrix3d cov = c.transpose() * wv.asDiagonal() * c;
  const Eigen::Vector3d sv = Eigen::JacobiSVD<Eigen::Matrix3d>(cov).singularValues();
  if (!(sv[1] > 1e-12 * std::max(sv[0], 1e-300)) || sv[0] <= 0.0) {
    throw PoseSolverError("solve_procrustes: degenerate (collinear or coincident) weighted point cloud");
  }
}

}  // namespace

geo::PoseTensor solve_procrustes(const MatchedClouds& m) {
  check_clouds(m);
  ad::Graph& g = m.xi.graph();
  const Tensor& w = m.weights;
  Tensor wt = ad::transpose(w);
  Tensor inv_wsum = ad::div(g.constant(1.0), ad::sum(w));
  Tensor mu_i = ad::matmul(wt, m.xi) * inv_wsum;  // [1,3]
  Tensor mu_j = ad::matmul(wt, m.xj) * inv_wsum;
  Tensor ci = m.xi - mu_i;
  Tensor cj = m.xj - mu_j;
  Tensor h = ad::matmul(ad::transpose(ci * w), cj);  // [3,3]

  Tensor usv = ad::svd3(h);
  static const Index u_idx[] = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  static const Index v_idx[] = {12, 13, 14, 15, 16, 17, 18, 19, 20};
  Tensor u = ad::gather(usv, u_idx, {3, 3});
  Tensor v = ad::gather(usv, v_idx, {3, 3});

  // Reflection fix; the sign is piecewise constant so it is not differentiated.
  Eigen::Matrix3d uv = v.matrix() * u.matrix().transpose();
  const double d = uv.determinant() < 0.0 ? -1.0 : 1.0;
  Array col_sign(9);
  col_sign << 1, 1, d, 1, 1, d, 1, 1, d;
  Tensor r = ad::matmul(ad::mul_const(v, col_sign), ad::transpose(u));
  Tensor t = mu_j - ad::matmul(mu_i, ad::transpose(r));
  return {r, t};
}

PoseSE3 solve_procrustes(const std::vector<Vec3>& xi, const std::vector<Vec3>& xj,
                         const std::vector<double>& weights) {
  if (xi.size() != xj.size() || xi.size() != weights.size()) {
    throw PoseSolverError("solve_procrustes: mismatched input sizes");
  }
  const Index n = static_cast<Index>(xi.size());
  Array a(3 * n), b(3 * n), w(n);
  for (Index r = 0; r < n; ++r) {
    for (int c = 0; c < 3; ++c) {
      a[3 * r + c] = xi[r][c];
      b[3 * r + c] = xj[r][c];
    }
    w[r] = weights[r];
  }
  ad::Graph g;
  MatchedClouds m{g.constant(a, {n, 3}), g.constant(b, {n, 3}), g.constant(w, {n, 1})};
  return solve_procrustes(m).value();
}

}  // namespace flowsfm
