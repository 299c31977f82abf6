#pragma once

// Evaluation metrics and export formats.
//
// PFM: "Pf\n<w> <h>\n-1.0\n" then float32 rows bottom-to-top (little-endian).
// PLY: binary_little_endian 1.0, double x/y/z, optional uchar red/green/blue.

#include "flowsfm/correspondence.hpp"
#include "flowsfm/geometry.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flowsfm {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input that makes a metric undefined (coincident trajectories, zero pixels).
class DegenerateInput : public EvalError {
 public:
  using EvalError::EvalError;
};

/// Centres the positions and scales them so tr(X X^T) = 1.
std::vector<Vec3> normalize_positions(const std::vector<Vec3>& positions);

/// Normalizes both trajectories, rotates the estimate onto the reference with
/// the best rotation (no translation or scale left after normalization), and
/// returns the RMSE of the position residuals.
double ate(const std::vector<Vec3>& estimated, const std::vector<Vec3>& reference);
double ate(const Trajectory& estimated, const Trajectory& reference);

/// min over s > 0 of RMSE(log(s * est) - log(gt)), with one scale shared by all
/// frames. Closed form: sqrt(mean(r^2) - mean(r)^2), r = log est - log gt.
double depth_error_scale_invariant(const std::vector<Eigen::ArrayXd>& est,
                                   const std::vector<Eigen::ArrayXd>& gt);

/// Mean end-point error in raw pixels over pixels valid in both fields.
double endpoint_error(const std::vector<FlowField>& a, const std::vector<FlowField>& b);

void write_pfm(const std::filesystem::path& path, const Eigen::ArrayXd& data, int width, int height);
/// Returns row-major values (top row first).
Eigen::ArrayXd read_pfm(const std::filesystem::path& path, int* width, int* height);

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<std::array<std::uint8_t, 3>> colors;  // empty or one per vertex
};

/// World-space point per valid pixel: T_k * unproject(u, D_k[u], K).
PointCloud fuse_depths(const std::vector<Eigen::ArrayXd>& depths, const Trajectory& cam_to_world,
                       const Intrinsics& k);
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);
/// fuse_depths + write_ply. Throws EvalError on an empty frame set.
void export_ply(const std::filesystem::path& path, const std::vector<Eigen::ArrayXd>& depths,
                const Trajectory& cam_to_world, const Intrinsics& k,
                const std::vector<std::vector<std::array<std::uint8_t, 3>>>& colors = {});

struct Metrics {
  std::optional<double> ate;
  std::optional<double> epe_mean;
  std::optional<double> depth_si_rmse;
  std::optional<double> focal_abs_err;
  std::optional<double> focal;
  std::map<std::string, double> runtimes;  // seconds, only when requested
  std::map<std::string, std::string> metadata;
};

/// Keys: ate, epe_mean, depth_si_rmse, focal_abs_err (null when unavailable),
/// focal, runtimes, metadata. Output is a pure function of the struct.
void write_metrics_json(const std::filesystem::path& path, const Metrics& m);
std::string metrics_json(const Metrics& m);

struct GroundTruth {
  Trajectory poses;
  double focal = 0.0;
  std::vector<Eigen::ArrayXd> depths;  // may be empty
};

/// A scene directory: scene.json (width, height, frames), flow/flow_XXXX.flo
/// for every adjacent pair, optional tracks.csv and optional gt/ bundle.
struct Dataset {
  int width = 0;
  int height = 0;
  int frames = 0;
  std::vector<FlowField> flows;
  TrackSet tracks;
  std::size_t dropped_tracks = 0;
  std::optional<GroundTruth> gt;
};

Dataset load_dataset(const std::filesystem::path& dir);
/// gt/trajectory.txt, gt/intrinsics.json and any gt/depth_XXXX.pfm present.
GroundTruth load_ground_truth(const std::filesystem::path& gt_dir, int frames);

}  // namespace flowsfm
