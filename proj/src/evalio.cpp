#include "flowsfm/evalio.hpp"

#include <json.hpp>

#include <Eigen/LU>
#include <Eigen/SVD>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace flowsfm {

static_assert(std::endian::native == std::endian::little, "binary I/O assumes a little-endian host");

std::vector<Vec3> normalize_positions(const std::vector<Vec3>& positions) {
  if (positions.empty()) throw DegenerateInput("normalize_positions: empty trajectory");
  Vec3 mean = Vec3::Zero();
  for (const Vec3& p : positions) mean += p;
  mean /= static_cast<double>(positions.size());
  double tr = 0.0;
  for (const Vec3& p : positions) tr += (p - mean).squaredNorm();
  if (!(tr > 1e-300) || !std::isfinite(tr)) {
    throw DegenerateInput("trajectory is degenerate: all camera positions coincide");
  }
  const double s = 1.0 / std::sqrt(tr);
  std::vector<Vec3> out;
  out.reserve(positions.size());
  for (const Vec3& p : positions) out.push_back((p - mean) * s);
  return out;
}

double ate(const std::vector<Vec3>& estimated, const std::vector<Vec3>& reference) {
  if (estimated.size() != reference.size()) throw EvalError("ate: trajectories differ in length");
  if (reference.size() < 3) throw DegenerateInput("ate: need at least 3 camera positions");
  const auto e = normalize_positions(estimated);
  const auto r = normalize_positions(reference);
  Mat3 h = Mat3::Zero();
  for (std::size_t n = 0; n < e.size(); ++n) h += e[n] * r[n].transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Mat3 rot = svd.matrixV() * d * svd.matrixU().transpose();
  double acc = 0.0;
  for (std::size_t n = 0; n < e.size(); ++n) acc += (rot * e[n] - r[n]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(e.size()));
}

double ate(const Trajectory& estimated, const Trajectory& reference) {
  std::vector<Vec3> a, b;
  for (const auto& p : estimated) a.push_back(p.translation);
  for (const auto& p : reference) b.push_back(p.translation);
  return ate(a, b);
}

double depth_error_scale_invariant(const std::vector<Eigen::ArrayXd>& est, const std::vector<Eigen::ArrayXd>& gt) {
  if (est.size() != gt.size() || est.empty()) throw EvalError("depth error: frame counts differ or are zero");
  // Two passes: mean(r^2) - mean(r)^2 cancels badly when r is nearly constant.
  std::vector<Eigen::ArrayXd> r(est.size());
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < est.size(); ++f) {
    if (est[f].size() != gt[f].size()) throw EvalError("depth error: extents differ in frame " + std::to_string(f));
    if ((est[f] <= 0.0).any() || (gt[f] <= 0.0).any() || !est[f].allFinite() || !gt[f].allFinite()) {
      throw EvalError("depth error: depths must be positive and finite");
    }
    r[f] = est[f].log() - gt[f].log();
    sum += r[f].sum();
    n += static_cast<std::size_t>(r[f].size());
  }
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const auto& rf : r) var += (rf - mean).square().sum();
  return std::sqrt(var / static_cast<double>(n));
}

double endpoint_error(const std::vector<FlowField>& a, const std::vector<FlowField>& b) {
  if (a.size() != b.size()) throw EvalError("endpoint_error: flow counts differ");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    if (a[p].width != b[p].width || a[p].height != b[p].height) throw EvalError("endpoint_error: extents differ");
    for (std::size_t i = 0; i < a[p].displacement.size(); ++i) {
      if (!a[p].valid[i] || !b[p].valid[i]) continue;
      acc += (a[p].displacement[i] - b[p].displacement[i]).norm() * a[p].width;
      ++n;
    }
  }
  if (n == 0) throw DegenerateInput("endpoint_error: no pixel is valid in both flow sets");
  return acc / static_cast<double>(n);
}

void write_pfm(const std::filesystem::path& path, const Eigen::ArrayXd& data, int width, int height) {
  if (data.size() != static_cast<Eigen::Index>(width) * height) throw EvalError("write_pfm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EvalError("cannot open for writing: " + path.string());
  out << "Pf\n" << width << " " << height << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(width));
  for (int r = height - 1; r >= 0; --r) {
    for (int c = 0; c < width; ++c) row[c] = static_cast<float>(data[static_cast<Eigen::Index>(r) * width + c]);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw EvalError("failed writing " + path.string());
}

Eigen::ArrayXd read_pfm(const std::filesystem::path& path, int* width, int* height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EvalError("cannot open PFM: " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (magic != "Pf" || w <= 0 || h <= 0) throw EvalError(path.string() + ": not a single-channel PFM");
  if (scale > 0) throw EvalError(path.string() + ": big-endian PFM is not supported");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(w) * h);
  std::vector<float> row(static_cast<std::size_t>(w));
  for (int r = h - 1; r >= 0; --r) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    for (int c = 0; c < w; ++c) out[static_cast<Eigen::Index>(r) * w + c] = row[c];
  }
  if (!in) throw EvalError(path.string() + ": truncated PFM");
  if (width) *width = w;
  if (height) *height = h;
  return out;
}

PointCloud fuse_depths(const std::vector<Eigen::ArrayXd>& depths, const Trajectory& cam_to_world,
                       const Intrinsics& k) {
  if (depths.empty()) throw EvalError("export: empty frame set");
  if (depths.size() != cam_to_world.size()) throw EvalError("export: depth and pose counts differ");
  PointCloud cloud;
  const int w = static_cast<int>(k.width());
  const int h = static_cast<int>(k.height());
  for (std::size_t f = 0; f < depths.size(); ++f) {
    if (depths[f].size() != static_cast<Eigen::Index>(w) * h) throw EvalError("export: depth extents differ");
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const double d = depths[f][static_cast<Eigen::Index>(r) * w + c];
        if (!(d > 0.0) || !std::isfinite(d)) continue;
        cloud.positions.push_back(cam_to_world[f].apply(unproject(k.pixel_center(c, r), d, k)));
      }
  }
  return cloud;
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  const bool color = !cloud.colors.empty();
  if (color && cloud.colors.size() != cloud.positions.size()) throw EvalError("write_ply: color count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EvalError("cannot open for writing: " + path.string());
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.positions.size()
      << "\nproperty double x\nproperty double y\nproperty double z\n";
  if (color) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  for (std::size_t i = 0; i < cloud.positions.size(); ++i) {
    out.write(reinterpret_cast<const char*>(cloud.positions[i].data()), 3 * sizeof(double));
    if (color) out.write(reinterpret_cast<const char*>(cloud.colors[i].data()), 3);
  }
  if (!out) throw EvalError("failed writing " + path.string());
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EvalError("cannot open PLY: " + path.string());
  std::string line;
  std::size_t count = 0;
  bool color = false, binary = false;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string a, b, c;
    ls >> a >> b >> c;
    if (a == "format") binary = b == "binary_little_endian";
    if (a == "element" && b == "vertex") count = std::stoull(c);
    if (a == "property" && c == "red") color = true;
  }
  if (!binary) throw EvalError(path.string() + ": only binary_little_endian PLY is supported");
  PointCloud cloud;
  cloud.positions.resize(count);
  if (color) cloud.colors.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(cloud.positions[i].data()), 3 * sizeof(double));
    if (color) in.read(reinterpret_cast<char*>(cloud.colors[i].data()), 3);
  }
  if (!in) throw EvalError(path.string() + ": truncated PLY");
  return cloud;
}

void export_ply(const std::filesystem::path& path, const std::vector<Eigen::ArrayXd>& depths,
                const Trajectory& cam_to_world, const Intrinsics& k,
                const std::vector<std::vector<std::array<std::uint8_t, 3>>>& colors) {
  PointCloud cloud = fuse_depths(depths, cam_to_world, k);
  if (!colors.empty()) {
    for (std::size_t f = 0; f < depths.size(); ++f)
      for (Eigen::Index i = 0; i < depths[f].size(); ++i)
        if (depths[f][i] > 0.0 && std::isfinite(depths[f][i])) cloud.colors.push_back(colors.at(f).at(i));
  }
  write_ply(path, cloud);
}

std::string metrics_json(const Metrics& m) {
  nlohmann::ordered_json j;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v && std::isfinite(*v)) {
      j[key] = *v;
    } else {
      j[key] = nullptr;
    }
  };
  put("ate", m.ate);
  put("epe_mean", m.epe_mean);
  put("depth_si_rmse", m.depth_si_rmse);
  put("focal_abs_err", m.focal_abs_err);
  put("focal", m.focal);
  j["runtimes"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m.runtimes) j["runtimes"][k] = v;
  j["metadata"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m.metadata) j["metadata"][k] = v;
  return j.dump(2) + "\n";
}

void write_metrics_json(const std::filesystem::path& path, const Metrics& m) {
  std::ofstream out(path);
  if (!out) throw EvalError("cannot open for writing: " + path.string());
  out << metrics_json(m);
}

GroundTruth load_ground_truth(const std::filesystem::path& gt_dir, int frames) {
  GroundTruth gt;
  gt.poses = read_trajectory(gt_dir / "trajectory.txt");
  if (static_cast<int>(gt.poses.size()) != frames) {
    throw EvalError(gt_dir.string() + ": trajectory has " + std::to_string(gt.poses.size()) + " poses, expected " +
                    std::to_string(frames));
  }
  std::ifstream in(gt_dir / "intrinsics.json");
  if (!in) throw EvalError("missing " + (gt_dir / "intrinsics.json").string());
  gt.focal = nlohmann::json::parse(in).at("focal").get<double>();
  char name[64];
  for (int f = 0; f < frames; ++f) {
    std::snprintf(name, sizeof name, "depth_%04d.pfm", f);
    if (!std::filesystem::exists(gt_dir / name)) {
      gt.depths.clear();
      break;
    }
    int w = 0, h = 0;
    gt.depths.push_back(read_pfm(gt_dir / name, &w, &h));
  }
  return gt;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "scene.json");
  if (!in) throw EvalError("missing " + (dir / "scene.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw EvalError((dir / "scene.json").string() + ": " + e.what());
  }
  Dataset d;
  d.width = j.at("width").get<int>();
  d.height = j.at("height").get<int>();
  d.frames = j.at("frames").get<int>();
  if (d.width <= 0 || d.height <= 0 || d.frames < 2) throw EvalError("scene.json: invalid extents or frame count");
  char name[64];
  for (int f = 0; f + 1 < d.frames; ++f) {
    std::snprintf(name, sizeof name, "flow_%04d.flo", f);
    FlowField flow = read_flow(dir / "flow" / name, f);
    if (flow.width != d.width || flow.height != d.height) throw EvalError(std::string(name) + ": extents differ");
    d.flows.push_back(std::move(flow));
  }
  if (std::filesystem::exists(dir / "tracks.csv")) {
    d.tracks = read_tracks(dir / "tracks.csv", d.width, d.frames, &d.dropped_tracks);
  } else {
    d.tracks.frame_count = d.frames;
  }
  if (std::filesystem::exists(dir / "gt" / "trajectory.txt")) d.gt = load_ground_truth(dir / "gt", d.frames);
  return d;
}

}  // namespace flowsfm
