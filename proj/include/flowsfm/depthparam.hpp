#pragma once

// Dense positive depth parameterizations and the correspondence weight head.
//
// GridDepth stores a coarse raw grid per frame (one cell per stride x stride
// block), upsamples it bilinearly to the image, then applies softplus and adds
// a floor. Nearby pixels therefore share parameters. FreeDepth stores one raw
// value per pixel with the same activation.

#include "flowsfm/diffcore.hpp"

#include <cstdint>
#include <vector>

namespace flowsfm {

enum class DepthKind { Grid, Free };

struct DepthConfig {
  DepthKind kind = DepthKind::Grid;
  int stride = 8;
  double floor = 1e-3;
};

class DepthModel {
 public:
  DepthModel(const DepthConfig& config, int width, int height, int frames);

  [[nodiscard]] const DepthConfig& config() const { return config_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int frames() const { return static_cast<int>(params_.size()); }
  [[nodiscard]] int grid_width() const { return grid_w_; }
  [[nodiscard]] int grid_height() const { return grid_h_; }

  /// Raw parameters, one block per frame (group "depth").
  [[nodiscard]] std::vector<ad::Parameter>& params() { return params_; }
  [[nodiscard]] const std::vector<ad::Parameter>& params() const { return params_; }

  /// Depth map [H, W] from a raw parameter tensor of this model's shape.
  [[nodiscard]] ad::Tensor emit(ad::Graph& g, const ad::Tensor& raw) const;
  /// Same computation without a caller-provided graph.
  [[nodiscard]] ad::Array emit_values(int frame) const;

 private:
  DepthConfig config_;
  int width_;
  int height_;
  int grid_w_;
  int grid_h_;
  ad::Array upsample_coords_;  // [H*W, 2] grid coordinates of image pixel centres
  std::vector<ad::Parameter> params_;
};

/// Three affine layers (in -> hidden -> hidden -> 1) with ReLU between and a
/// sigmoid on the output.
class WeightHead {
 public:
  static constexpr int kHidden = 128;
  static constexpr int kFeatures = 5;

  WeightHead(int inputs, std::uint64_t seed);

  [[nodiscard]] int inputs() const { return inputs_; }
  /// w1, b1, w2, b2, w3, b3 (group "head").
  [[nodiscard]] std::vector<ad::Parameter>& params() { return params_; }
  [[nodiscard]] const std::vector<ad::Parameter>& params() const { return params_; }

  /// Weights [N,1] in (0,1) for features [N, inputs]; `layers` are leaf/constant
  /// tensors for params() in order.
  [[nodiscard]] ad::Tensor forward(std::span<const ad::Tensor> layers, const ad::Tensor& features) const;

 private:
  int inputs_;
  std::vector<ad::Parameter> params_;
};

/// Per-correspondence head input: normalized pixel position (2), flow vector
/// (2) and the emitted source depth (1). `pixels` and `flow` are [N,2]
/// constants, `depth` is [N,1].
ad::Tensor weight_features(const ad::Tensor& pixels, const ad::Tensor& flow, const ad::Tensor& depth);

/// Correspondence weights; a null head (ablation) yields all ones.
ad::Tensor emit_weights(const WeightHead* head, std::span<const ad::Tensor> layers,
                        const ad::Tensor& features);

}  // namespace flowsfm
