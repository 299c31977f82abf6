#pragma once

// Closed-form weighted rigid alignment (Kabsch) between two matched point
// clouds, recorded on the tape so poses are differentiable functions of depth
// and correspondence weights.

#include "flowsfm/correspondence.hpp"
#include "flowsfm/diffcore.hpp"
#include "flowsfm/geometry.hpp"

#include <vector>

namespace flowsfm {

class PoseSolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Matched rows x_i <-> x_j with per-row weights.
struct MatchedClouds {
  ad::Tensor xi;       // [N,3]
  ad::Tensor xj;       // [N,3]
  ad::Tensor weights;  // [N,1], positive
};

/// Uniformly spaced sample locations (normalized units), at most nx * ny but
/// never denser than one per pixel.
std::vector<Vec2> sample_grid(int width, int height, int nx = 32, int ny = 32);

/// Flow lookups for one adjacent pair at the fixed sample locations. Samples
/// whose flow is invalid, or whose target leaves the image, are dropped.
struct PairSamples {
  int source = 0;
  std::vector<Vec2> source_uv;
  std::vector<Vec2> target_uv;
  std::vector<ad::Index> grid_index;  // position in the sample grid
  ad::Array source_px;                // [N,2] raw pixel coordinates for grid_sample
  ad::Array target_px;
  ad::Array source_norm;              // [N,2] normalized coordinates
  ad::Array target_norm;
  ad::Array flow;                     // [N,2] target - source

  [[nodiscard]] std::size_t size() const { return source_uv.size(); }
};

PairSamples sample_pair(const FlowField& flow, const std::vector<Vec2>& grid);

/// Unprojects the sample pair through bilinearly sampled depth maps [H,W].
/// Throws PoseSolverError("insufficient correspondences") below 3 samples.
MatchedClouds build_matches(const ad::Tensor& depth_i, const ad::Tensor& depth_j,
                            const ad::Tensor& focal, const Intrinsics& k,
                            const PairSamples& samples, const ad::Tensor& weights);

/// argmin over SE(3) of sum_n w_n |x_j,n - (R x_i,n + t)|^2. Throws
/// PoseSolverError for degenerate (collinear or coincident) weighted clouds.
geo::PoseTensor solve_procrustes(const MatchedClouds& m);

/// Value-level convenience wrapper.
PoseSE3 solve_procrustes(const std::vector<Vec3>& xi, const std::vector<Vec3>& xj,
                         const std::vector<double>& weights);

}  // namespace flowsfm
