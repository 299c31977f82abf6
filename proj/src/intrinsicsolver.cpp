#include "flowsfm/intrinsicsolver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flowsfm {

using ad::Array;
using ad::Index;
using ad::Tensor;

FocalCandidates FocalCandidates::uniform(double lo, double hi, int count, double temperature) {
  if (count < 2 || !(lo > 0.0) || !(hi > lo)) {
    throw IntrinsicsError("FocalCandidates: need count >= 2 and 0 < lo < hi");
  }
  if (!(temperature > 0.0)) throw IntrinsicsError("FocalCandidates: temperature must be positive");
  FocalCandidates c;
  c.temperature = temperature;
  c.values.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) c.values[i] = lo + (hi - lo) * i / (count - 1);
  c.values.back() = hi;
  return c;
}

double FocalCandidates::spacing() const {
  return values.size() < 2 ? 0.0 : (values.back() - values.front()) / static_cast<double>(values.size() - 1);
}

Tensor softmin_weights(const Tensor& losses, double temperature) {
  // The minimum is a constant shift; it cancels in the normalization, so
  // treating it as constant leaves the gradient exact.
  const double lo = losses.value().minCoeff();
  Tensor e = ad::exp(ad::scale(ad::shift(losses, -lo), -temperature));
  return ad::div(e, ad::sum(e));
}

std::vector<double> softmin_weights(const std::vector<double>& losses, double temperature) {
  const double lo = *std::min_element(losses.begin(), losses.end());
  std::vector<double> w(losses.size());
  double total = 0.0;
  for (std::size_t k = 0; k < losses.size(); ++k) total += w[k] = std::exp(-temperature * (losses[k] - lo));
  for (double& v : w) v /= total;
  return w;
}

SoftFocal soft_select_focal(ad::Graph& g, const FocalCandidates& candidates,
                            const std::function<Tensor(double)>& candidate_loss) {
  SoftFocal out;
  std::vector<Tensor> kept;
  std::vector<double> kept_focal;
  for (std::size_t k = 0; k < candidates.values.size(); ++k) {
    double value = std::numeric_limits<double>::quiet_NaN();
    try {
      Tensor l = candidate_loss(candidates.values[k]);
      value = l.item();
      if (std::isfinite(value)) {
        kept.push_back(ad::reshape(l, {1}));
        kept_focal.push_back(candidates.values[k]);
        out.used.push_back(k);
      }
    } catch (const PoseSolverError&) {
    } catch (const LossError&) {
    }
    out.losses.push_back(value);
  }
  if (kept.empty()) throw IntrinsicsError("soft_select_focal: every candidate produced a non-finite loss");
  Tensor losses = ad::concat(kept, 0);
  out.weights = softmin_weights(losses, candidates.temperature);
  Array f = Eigen::Map<const Array>(kept_focal.data(), static_cast<Index>(kept_focal.size()));
  out.focal = ad::sum(ad::mul_const(out.weights, f));
  return out;
}

SoftFocal soft_select_focal(ad::Graph& g, const FocalCandidates& candidates, const FirstPair& pair) {
  if (pair.intrinsics == nullptr || pair.samples == nullptr || pair.flow == nullptr) {
    throw IntrinsicsError("soft_select_focal: missing first-pair inputs");
  }
  if (pair.flow->source != 0) throw IntrinsicsError("soft_select_focal: expects the flow from frame 0 to 1");
  return soft_select_focal(g, candidates, [&](double f) {
    Tensor focal = g.constant(f);
    MatchedClouds m = build_matches(pair.depth0, pair.depth1, focal, *pair.intrinsics, *pair.samples,
                                    pair.sample_weights);
    geo::PoseTensor pose = solve_procrustes(m);
    PairLoss pl = flow_pair_loss(*pair.flow, pair.depth0, focal, *pair.intrinsics, pose, pair.pixel_weights,
                                 pair.epsilon);
    if (pl.count == 0) throw LossError("no valid correspondences for candidate");
    return ad::div(pl.weighted_sum, pl.weight_sum);
  });
}

bool stage_transition(StageState& state, int step, int stage1_steps) {
  if (state.single_stage || state.stage == 2 || step != stage1_steps) return false;
  state.stage = 2;
  state.focal = state.last_soft_focal;
  return true;
}

}  // namespace flowsfm
