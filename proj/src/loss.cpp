#include "flowsfm/loss.hpp"

#include <cmath>
#include <map>

namespace flowsfm {

using ad::Array;
using ad::Index;
using ad::Tensor;

FlowPairData prepare_flow_pair(const FlowField& flow) {
  FlowPairData d;
  d.source = flow.source;
  d.target = flow.target();
  const double w = flow.width;
  for (int r = 0; r < flow.height; ++r) {
    for (int c = 0; c < flow.width; ++c) {
      const std::size_t i = flow.index(c, r);
      if (flow.valid[i]) d.pixel_index.push_back(static_cast<Index>(i));
    }
  }
  const Index n = d.size();
  d.source_norm.resize(2 * n);
  d.target_norm.resize(2 * n);
  for (Index k = 0; k < n; ++k) {
    const Index i = d.pixel_index[k];
    const Vec2 u((i % flow.width + 0.5) / w, (i / flow.width + 0.5) / w);
    const Vec2 t = u + flow.displacement[static_cast<std::size_t>(i)];
    d.source_norm[2 * k] = u.x();
    d.source_norm[2 * k + 1] = u.y();
    d.target_norm[2 * k] = t.x();
    d.target_norm[2 * k + 1] = t.y();
  }
  return d;
}

std::vector<TrackPairData> prepare_tracks(const TrackSet& tracks, int width) {
  std::map<std::pair<int, int>, std::vector<std::pair<Vec2, Vec2>>> groups;
  for (const Track& t : tracks.tracks) {
    const int q = t.query_frame;
    if (q < 0 || q >= static_cast<int>(t.visible.size()) || !t.visible[q]) continue;
    for (int j = 0; j < static_cast<int>(t.visible.size()); ++j) {
      if (j == q || !t.visible[j]) continue;
      groups[{q, j}].emplace_back(t.position[q], t.position[j]);
    }
  }
  std::vector<TrackPairData> out;
  for (const auto& [key, obs] : groups) {
    TrackPairData d;
    d.query = key.first;
    d.other = key.second;
    const Index n = static_cast<Index>(obs.size());
    d.source_norm.resize(2 * n);
    d.source_px.resize(2 * n);
    d.target_norm.resize(2 * n);
    for (Index k = 0; k < n; ++k) {
      for (int c = 0; c < 2; ++c) {
        d.source_norm[2 * k + c] = obs[k].first[c];
        d.source_px[2 * k + c] = obs[k].first[c] * width;
        d.target_norm[2 * k + c] = obs[k].second[c];
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

geo::Projection induced_correspondence(const Tensor& source_norm, const Tensor& depth, const Tensor& focal,
                                       const Intrinsics& k, const geo::PoseTensor& pose) {
  Tensor x = geo::unproject(depth, source_norm, focal, k);
  return geo::project(geo::transform(pose, x), focal, k);
}

Tensor correspondence_norm(const Tensor& residual, double epsilon) {
  ad::Graph& g = residual.graph();
  Tensor sq = ad::matmul(ad::square(residual), g.constant(Array::Ones(2), {2, 1}));
  return ad::shift(ad::sqrt(ad::shift(sq, epsilon)), -std::sqrt(epsilon));
}

PairLoss flow_pair_loss(const FlowPairData& pair, const Tensor& depth_source, const Tensor& focal,
                        const Intrinsics& k, const geo::PoseTensor& pose, const Tensor& pixel_weights,
                        double epsilon) {
  ad::Graph& g = depth_source.graph();
  PairLoss out;
  const Index n = pair.size();
  if (n == 0) return out;
  Tensor depth = ad::gather(depth_source, pair.pixel_index, {n, 1});
  Tensor src = g.constant(pair.source_norm, {n, 2});
  geo::Projection proj = induced_correspondence(src, depth, focal, k, pose);
  out.count = proj.rows.size();
  if (out.count == 0) return out;
  const bool all = out.count == static_cast<std::size_t>(n);
  Array observed(2 * static_cast<Index>(out.count));
  for (std::size_t m = 0; m < proj.rows.size(); ++m) {
    observed[2 * m] = pair.target_norm[2 * proj.rows[m]];
    observed[2 * m + 1] = pair.target_norm[2 * proj.rows[m] + 1];
  }
  const Index m = static_cast<Index>(out.count);
  Tensor l = correspondence_norm(proj.uv - g.constant(observed, {m, 2}), epsilon);
  if (pixel_weights.valid()) {
    if (pixel_weights.shape() != ad::Shape{n, 1}) {
      throw ad::ShapeError("flow_pair_loss: weights have shape " + ad::to_string(pixel_weights.shape()) +
                           ", expected " + ad::to_string({n, 1}));
    }
    Tensor w = all ? pixel_weights : geo::gather_rows(pixel_weights, proj.rows);
    out.weighted_sum = ad::sum(ad::mul(w, l));
    out.weight_sum = ad::sum(w);
  } else {
    out.weighted_sum = ad::sum(l);
    out.weight_sum = g.constant(static_cast<double>(m));
  }
  return out;
}

LossTerms total_loss(ad::Graph& g, const LossInputs& in, const LossConfig& config) {
  if (in.intrinsics == nullptr || in.flows == nullptr) throw LossError("total_loss: missing inputs");
  const Intrinsics& k = *in.intrinsics;
  LossTerms out;

  Tensor num, den;
  for (std::size_t p = 0; p < in.flows->size(); ++p) {
    const FlowPairData& pair = (*in.flows)[p];
    const Tensor weights = p < in.pixel_weights.size() ? in.pixel_weights[p] : Tensor{};
    PairLoss pl = flow_pair_loss(pair, in.depths.at(pair.source), in.focal, k, in.adjacent.at(pair.source),
                                 weights, config.epsilon);
    if (pl.count == 0) continue;
    out.flow_count += pl.count;
    num = num.valid() ? num + pl.weighted_sum : pl.weighted_sum;
    den = den.valid() ? den + pl.weight_sum : pl.weight_sum;
  }
  out.flow = num.valid() ? ad::div(num, den) : g.constant(0.0);

  Tensor track_sum;
  if (config.lambda_track != 0.0 && in.tracks != nullptr) {
    for (const TrackPairData& tp : *in.tracks) {
      const Index n = tp.size();
      if (n == 0) continue;
      Tensor depth = ad::grid_sample(in.depths.at(tp.query), g.constant(tp.source_px, {n, 2}));
      geo::PoseTensor pose = geo::relative_pose(in.cam_to_world.at(tp.query), in.cam_to_world.at(tp.other));
      geo::Projection proj = induced_correspondence(g.constant(tp.source_norm, {n, 2}), depth, in.focal, k, pose);
      if (proj.rows.empty()) continue;
      const Index m = static_cast<Index>(proj.rows.size());
      Array observed(2 * m);
      for (Index r = 0; r < m; ++r) {
        observed[2 * r] = tp.target_norm[2 * proj.rows[r]];
        observed[2 * r + 1] = tp.target_norm[2 * proj.rows[r] + 1];
      }
      Tensor s = ad::sum(correspondence_norm(proj.uv - g.constant(observed, {m, 2}), config.epsilon));
      track_sum = track_sum.valid() ? track_sum + s : s;
      out.track_count += static_cast<std::size_t>(m);
    }
  }
  out.track = out.track_count ? track_sum * (1.0 / static_cast<double>(out.track_count)) : g.constant(0.0);

  if (out.flow_count + out.track_count == 0) {
    throw LossError("total_loss: zero valid correspondences");
  }
  out.total = config.lambda_track != 0.0 && out.track_count ? out.flow + out.track * config.lambda_track
                                                             : out.flow;
  if (!std::isfinite(out.total.item())) {
    throw LossError("total_loss: non-finite loss (flow=" + std::to_string(out.flow.item()) +
                    ", track=" + std::to_string(out.track.item()) + ")");
  }
  return out;
}

LossBreakdown breakdown(const LossTerms& t) {
  return {t.total.item(), t.flow.item(), t.track.item(), t.flow_count, t.track_count};
}

std::vector<geo::PoseTensor> chain_poses(ad::Graph& g, const std::vector<geo::PoseTensor>& adjacent) {
  std::vector<geo::PoseTensor> out;
  out.reserve(adjacent.size() + 1);
  out.push_back(geo::constant_pose(g, PoseSE3::identity()));
  for (const auto& p : adjacent) out.push_back(geo::compose(geo::invert(p), out.back()));
  return out;
}

}  // namespace flowsfm
