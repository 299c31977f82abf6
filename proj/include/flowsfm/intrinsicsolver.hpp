#pragma once

// Soft focal-length selection over a fixed candidate grid, and the handoff to
// direct focal regression.

#include "flowsfm/loss.hpp"
#include "flowsfm/posesolver.hpp"

#include <functional>
#include <vector>

namespace flowsfm {

class IntrinsicsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FocalCandidates {
  std::vector<double> values;  // strictly increasing, positive
  double temperature = 10.0;

  /// `count` values evenly spaced on [lo, hi], both ends included.
  static FocalCandidates uniform(double lo = 0.5, double hi = 2.0, int count = 60, double temperature = 10.0);
  [[nodiscard]] double spacing() const;
};

/// w_k = exp(-tau (L_k - min L)) / sum_l exp(-tau (L_l - min L)).
ad::Tensor softmin_weights(const ad::Tensor& losses, double temperature);
/// Value-level twin of softmin_weights.
std::vector<double> softmin_weights(const std::vector<double>& losses, double temperature);

struct SoftFocal {
  ad::Tensor focal;                  // scalar, sum_k w_k f_k
  ad::Tensor weights;                // [K'] over the finite candidates
  std::vector<double> losses;        // per candidate, NaN where excluded
  std::vector<std::size_t> used;     // indices of finite candidates
};

/// Generic form: `candidate_loss(f)` builds the loss for one candidate focal.
/// Candidates whose loss is non-finite or throws a solver/loss error are
/// excluded; all excluded is an error.
SoftFocal soft_select_focal(ad::Graph& g, const FocalCandidates& candidates,
                            const std::function<ad::Tensor(double)>& candidate_loss);

/// Inputs for the first-pair selection.
struct FirstPair {
  const Intrinsics* intrinsics = nullptr;
  ad::Tensor depth0;
  ad::Tensor depth1;
  const PairSamples* samples = nullptr;
  ad::Tensor sample_weights;        // [N,1] Procrustes weights
  const FlowPairData* flow = nullptr;
  ad::Tensor pixel_weights;         // [M,1] loss weights, optional
  double epsilon = 1e-8;
};

/// For each candidate: Procrustes pose for frames 0 -> 1, then the weighted
/// flow loss of that pair.
SoftFocal soft_select_focal(ad::Graph& g, const FocalCandidates& candidates, const FirstPair& pair);

/// Stage bookkeeping for the two-stage schedule.
struct StageState {
  int stage = 1;
  double last_soft_focal = 1.0;
  double focal = 1.0;          // the free variable once stage == 2
  bool single_stage = false;
};

/// Switches to stage 2 exactly when `step == stage1_steps`, seeding the free
/// focal with the last soft focal. Returns true only on the transition step.
bool stage_transition(StageState& state, int step, int stage1_steps);

}  // namespace flowsfm
