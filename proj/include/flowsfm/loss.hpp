#pragma once

// Camera-induced flow loss. Every observed correspondence u_i -> u_ij is
// compared with the correspondence induced by the current depth, focal and
// relative pose: u_hat = project(P_ij * unproject(u_i, D_i[u_i])).

#include "flowsfm/correspondence.hpp"
#include "flowsfm/diffcore.hpp"
#include "flowsfm/geometry.hpp"

#include <optional>
#include <vector>

namespace flowsfm {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossConfig {
  double lambda_track = 1.0;
  double epsilon = 1e-8;  // inside the per-correspondence square root
};

/// Valid flow pixels of one adjacent pair. Sources sit on pixel centres, so
/// depth is read without interpolation.
struct FlowPairData {
  int source = 0;
  int target = 1;
  std::vector<ad::Index> pixel_index;  // row-major pixel id in the source frame
  ad::Array source_norm;               // [N,2]
  ad::Array target_norm;               // [N,2] observed u_ij

  [[nodiscard]] ad::Index size() const { return static_cast<ad::Index>(pixel_index.size()); }
};

FlowPairData prepare_flow_pair(const FlowField& flow);

/// All track observations sharing one (query frame, other frame) pair.
struct TrackPairData {
  int query = 0;
  int other = 0;
  ad::Array source_norm;  // [N,2] position in the query frame
  ad::Array source_px;    // [N,2] same, raw pixels (for bilinear depth reads)
  ad::Array target_norm;  // [N,2] observed position in the other frame

  [[nodiscard]] ad::Index size() const { return source_norm.size() / 2; }
};

/// Groups visible observations by frame pair, in ascending (query, other) order.
std::vector<TrackPairData> prepare_tracks(const TrackSet& tracks, int width);

/// Induced correspondences for source points with depths [N,1]. Rows that land
/// at or behind the camera are dropped (see Projection::rows).
geo::Projection induced_correspondence(const ad::Tensor& source_norm, const ad::Tensor& depth,
                                       const ad::Tensor& focal, const Intrinsics& k,
                                       const geo::PoseTensor& pose);

/// sqrt(|r|^2 + eps) - sqrt(eps) per row of an [M,2] residual; [M,1].
ad::Tensor correspondence_norm(const ad::Tensor& residual, double epsilon);

/// Weighted loss of one flow pair: (sum w*l, sum w, count). `pixel_weights`
/// ([N,1], aligned with the pair's rows) may be invalid for unit weights.
struct PairLoss {
  ad::Tensor weighted_sum;
  ad::Tensor weight_sum;
  std::size_t count = 0;
};
PairLoss flow_pair_loss(const FlowPairData& pair, const ad::Tensor& depth_source,
                        const ad::Tensor& focal, const Intrinsics& k, const geo::PoseTensor& pose,
                        const ad::Tensor& pixel_weights, double epsilon);

struct LossInputs {
  const Intrinsics* intrinsics = nullptr;  // extents and principal point
  ad::Tensor focal;
  std::vector<ad::Tensor> depths;              // [H,W] per frame
  std::vector<geo::PoseTensor> adjacent;       // P_{k,k+1}
  std::vector<geo::PoseTensor> cam_to_world;   // T_k, used for track pairs
  const std::vector<FlowPairData>* flows = nullptr;
  const std::vector<TrackPairData>* tracks = nullptr;
  std::vector<ad::Tensor> pixel_weights;       // per flow pair, optional
};

struct LossTerms {
  ad::Tensor total;
  ad::Tensor flow;
  ad::Tensor track;
  std::size_t flow_count = 0;
  std::size_t track_count = 0;
};

struct LossBreakdown {
  double total = 0.0;
  double flow = 0.0;
  double track = 0.0;
  std::size_t flow_count = 0;
  std::size_t track_count = 0;
};

/// flow = sum w*l / sum w over all adjacent-pair pixels; track = plain mean
/// over (query, visible frame) observations; total = flow + lambda * track.
/// Throws LossError when no correspondence survives.
LossTerms total_loss(ad::Graph& g, const LossInputs& in, const LossConfig& config);

LossBreakdown breakdown(const LossTerms& terms);

/// Cam-to-world chain from adjacent relative poses: T_0 = I,
/// T_{k+1} = T_k * P_{k,k+1}^-1.
std::vector<geo::PoseTensor> chain_poses(ad::Graph& g, const std::vector<geo::PoseTensor>& adjacent);

}  // namespace flowsfm
