#include "flowsfm/depthparam.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace flowsfm {

using ad::Array;
using ad::Tensor;

DepthModel::DepthModel(const DepthConfig& config, int width, int height, int frames)
    : config_(config), width_(width), height_(height) {
  if (width <= 0 || height <= 0 || frames <= 0) {
    throw std::invalid_argument("DepthModel: extents and frame count must be positive");
  }
  if (!(config.floor > 0.0)) throw std::invalid_argument("DepthModel: floor must be positive");
  if (config.kind == DepthKind::Grid) {
    if (config.stride <= 0) throw std::invalid_argument("DepthModel: stride must be positive");
    const int s = config.stride;
    grid_w_ = (width + s - 1) / s;
    grid_h_ = (height + s - 1) / s;
    upsample_coords_.resize(2 * static_cast<ad::Index>(width) * height);
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        const ad::Index i = static_cast<ad::Index>(r) * width + c;
        upsample_coords_[2 * i] = (c + 0.5) / s;
        upsample_coords_[2 * i + 1] = (r + 0.5) / s;
      }
    }
  } else {
    grid_w_ = width;
    grid_h_ = height;
  }
  params_.reserve(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    params_.push_back({"depth." + std::to_string(f), "depth", {grid_h_, grid_w_},
                       Array::Zero(static_cast<ad::Index>(grid_h_) * grid_w_)});
  }
}

Tensor DepthModel::emit(ad::Graph& g, const Tensor& raw) const {
  if (raw.shape() != ad::Shape{grid_h_, grid_w_}) {
    throw ad::ShapeError("DepthModel::emit: raw parameters have shape " + ad::to_string(raw.shape()) +
                         ", expected " + ad::to_string({grid_h_, grid_w_}));
  }
  Tensor dense = raw;
  if (config_.kind == DepthKind::Grid) {
    Tensor coords = g.constant(upsample_coords_, {static_cast<ad::Index>(width_) * height_, 2});
    dense = ad::reshape(ad::grid_sample(raw, coords), {height_, width_});
  }
  return ad::shift(ad::softplus(dense), config_.floor);
}

Array DepthModel::emit_values(int frame) const {
  ad::Graph g;
  const auto& p = params_.at(static_cast<std::size_t>(frame));
  return emit(g, g.constant(p.value, p.shape)).value();
}

WeightHead::WeightHead(int inputs, std::uint64_t seed) : inputs_(inputs) {
  if (inputs <= 0) throw std::invalid_argument("WeightHead: inputs must be positive");
  std::mt19937_64 rng(seed);
  auto he = [&](int fan_in, int fan_out) {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
    Array w(static_cast<ad::Index>(fan_in) * fan_out);
    for (auto& v : w) v = n(rng);
    return w;
  };
  const ad::Index h = kHidden;
  params_.push_back({"head.w1", "head", {inputs, h}, he(inputs, kHidden)});
  params_.push_back({"head.b1", "head", {1, h}, Array::Zero(h)});
  params_.push_back({"head.w2", "head", {h, h}, he(kHidden, kHidden)});
  params_.push_back({"head.b2", "head", {1, h}, Array::Zero(h)});
  params_.push_back({"head.w3", "head", {h, 1}, Array::Zero(h)});
  params_.push_back({"head.b3", "head", {1, 1}, Array::Zero(1)});
}

Tensor WeightHead::forward(std::span<const Tensor> layers, const Tensor& features) const {
  if (layers.size() != 6) throw ad::ShapeError("WeightHead::forward: expected 6 layer tensors");
  if (features.shape().size() != 2 || features.cols() != inputs_) {
    throw ad::ShapeError("WeightHead::forward: features have shape " + ad::to_string(features.shape()) +
                         ", expected [N, " + std::to_string(inputs_) + "]");
  }
  Tensor h1 = ad::relu(ad::affine(features, layers[0], layers[1]));
  Tensor h2 = ad::relu(ad::affine(h1, layers[2], layers[3]));
  // A plain sigmoid rounds to exactly 1.0 past logit ~37; keep a 2^-30 margin
  // on both ends (exact in binary, so a zero logit still maps to 0.5).
  constexpr double margin = 0x1p-30;
  Tensor s = ad::sigmoid(ad::affine(h2, layers[4], layers[5]));
  return ad::shift(ad::scale(s, 1.0 - 2.0 * margin), margin);
}

Tensor weight_features(const Tensor& pixels, const Tensor& flow, const Tensor& depth) {
  const Tensor parts[] = {pixels, flow, depth};
  return ad::concat(parts, 1);
}

Tensor emit_weights(const WeightHead* head, std::span<const Tensor> layers, const Tensor& features) {
  if (head == nullptr) {
    return features.graph().constant(Array::Ones(features.rows()), {features.rows(), 1});
  }
  return head->forward(layers, features);
}

}  // namespace flowsfm
