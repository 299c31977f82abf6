#include "flowsfm/correspondence.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace flowsfm {

static_assert(std::endian::native == std::endian::little,
              "binary I/O assumes a little-endian host");

FlowField::FlowField(int source_frame, int w, int h)
    : source(source_frame),
      width(w),
      height(h),
      displacement(static_cast<std::size_t>(w) * h, Vec2::Zero()),
      valid(static_cast<std::size_t>(w) * h, 1) {}

std::size_t FlowField::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

double FlowField::mean_magnitude() const {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < displacement.size(); ++i) {
    if (!valid[i]) continue;
    acc += displacement[i].norm();
    ++n;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

std::optional<Vec2> lookup_correspondence(const FlowField& flow, const Vec2& u) {
  const double px = u.x() * flow.width;
  const double py = u.y() * flow.width;
  if (!(px >= 0.0 && py >= 0.0 && px <= flow.width && py <= flow.height)) return std::nullopt;
  const double gx = std::clamp(px - 0.5, 0.0, static_cast<double>(flow.width - 1));
  const double gy = std::clamp(py - 0.5, 0.0, static_cast<double>(flow.height - 1));
  const int x0 = std::min(static_cast<int>(std::floor(gx)), std::max(flow.width - 2, 0));
  const int y0 = std::min(static_cast<int>(std::floor(gy)), std::max(flow.height - 2, 0));
  const int x1 = std::min(x0 + 1, flow.width - 1);
  const int y1 = std::min(y0 + 1, flow.height - 1);
  const double fx = gx - x0;
  const double fy = gy - y0;
  const int xs[4] = {x0, x1, x0, x1};
  const int ys[4] = {y0, y0, y1, y1};
  const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  Vec2 d = Vec2::Zero();
  for (int t = 0; t < 4; ++t) {
    if (ws[t] == 0.0) continue;
    const std::size_t i = flow.index(xs[t], ys[t]);
    if (!flow.valid[i]) return std::nullopt;
    d += ws[t] * flow.displacement[i];
  }
  return u + d;
}

std::size_t filter_max_displacement(FlowField& flow, double max_norm) {
  std::size_t masked = 0;
  for (std::size_t i = 0; i < flow.displacement.size(); ++i) {
    if (flow.valid[i] && flow.displacement[i].norm() > max_norm) {
      flow.valid[i] = 0;
      ++masked;
    }
  }
  return masked;
}

int Track::visible_count() const {
  return static_cast<int>(std::count(visible.begin(), visible.end(), std::uint8_t{1}));
}

std::size_t TrackSet::prune() {
  const std::size_t before = tracks.size();
  std::erase_if(tracks, [](const Track& t) { return t.visible_count() < 2; });
  return before - tracks.size();
}

SubsampleResult subsample_frames(const std::vector<double>& step_magnitude, int target_count) {
  if (target_count < 2) throw CorrespondenceError("subsample_frames: target_count must be >= 2");
  for (double m : step_magnitude) {
    if (!(m >= 0.0)) throw CorrespondenceError("subsample_frames: magnitudes must be >= 0");
  }
  const int frames = static_cast<int>(step_magnitude.size()) + 1;
  std::vector<double> cumulative(static_cast<std::size_t>(frames), 0.0);
  for (int k = 1; k < frames; ++k) cumulative[k] = cumulative[k - 1] + step_magnitude[k - 1];

  SubsampleResult out;
  if (target_count >= frames) {
    for (int k = 0; k < frames; ++k) out.indices.push_back(k);
  } else {
    const double total = cumulative.back();
    out.indices.push_back(0);
    for (int q = 1; q + 1 < target_count; ++q) {
      const double level = total * q / (target_count - 1);
      // Last frame at or below the level and first frame at or above it.
      const auto upper_it = std::lower_bound(cumulative.begin(), cumulative.end(), level);
      const int upper = static_cast<int>(upper_it - cumulative.begin());
      const auto lower_it = std::upper_bound(cumulative.begin(), cumulative.end(), level);
      const int lower = static_cast<int>(lower_it - cumulative.begin()) - 1;
      int pick = lower;
      if (upper < frames && (lower < 0 || level - cumulative[lower] > cumulative[upper] - level)) {
        pick = upper;
      }
      pick = std::clamp(pick, 0, frames - 1);
      if (pick > out.indices.back() && pick < frames - 1) out.indices.push_back(pick);
    }
    out.indices.push_back(frames - 1);
  }
  for (std::size_t k = 1; k < out.indices.size(); ++k) {
    out.gap_magnitude.push_back(cumulative[out.indices[k]] - cumulative[out.indices[k - 1]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// I/O

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  char buf[sizeof(T)];
  in.read(buf, sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void write_flow(const std::filesystem::path& path, const FlowField& flow) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorrespondenceError("cannot open flow file for writing: " + path.string());
  out.write("FLO1", 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(flow.width));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(flow.height));
  for (const Vec2& d : flow.displacement) {
    put<float>(out, static_cast<float>(d.x() * flow.width));
    put<float>(out, static_cast<float>(d.y() * flow.width));
  }
  out.write(reinterpret_cast<const char*>(flow.valid.data()),
            static_cast<std::streamsize>(flow.valid.size()));
  if (!out) throw CorrespondenceError("failed writing flow file: " + path.string());
}

FlowField read_flow(const std::filesystem::path& path, int source_frame) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorrespondenceError("cannot open flow file: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "FLO1", 4) != 0) {
    throw CorrespondenceError(path.string() + ": bad magic (expected FLO1)");
  }
  const auto w = get<std::uint32_t>(in);
  const auto h = get<std::uint32_t>(in);
  if (!in || w == 0 || h == 0 || w > 65536 || h > 65536) {
    throw CorrespondenceError(path.string() + ": bad dimensions");
  }
  FlowField flow(source_frame, static_cast<int>(w), static_cast<int>(h));
  for (Vec2& d : flow.displacement) {
    const float dx = get<float>(in);
    const float dy = get<float>(in);
    d = Vec2(dx, dy) / static_cast<double>(w);
  }
  in.read(reinterpret_cast<char*>(flow.valid.data()), static_cast<std::streamsize>(flow.valid.size()));
  if (!in) throw CorrespondenceError(path.string() + ": truncated flow file");
  for (std::size_t i = 0; i < flow.valid.size(); ++i) {
    if (!flow.displacement[i].allFinite()) flow.valid[i] = 0;
    flow.valid[i] = flow.valid[i] ? 1 : 0;
  }
  return flow;
}

void write_tracks(const std::filesystem::path& path, const TrackSet& tracks, int width) {
  std::ofstream out(path);
  if (!out) throw CorrespondenceError("cannot open track file for writing: " + path.string());
  out << "track_id,frame,px,py,visible\n";
  char buf[128];
  for (std::size_t id = 0; id < tracks.tracks.size(); ++id) {
    const Track& t = tracks.tracks[id];
    for (std::size_t f = 0; f < t.position.size(); ++f) {
      const bool vis = t.visible[f] != 0;
      const Vec2 p = vis ? Vec2(t.position[f] * width) : Vec2::Zero();
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%d\n", id, f, p.x(), p.y(), vis ? 1 : 0);
      out << buf;
    }
  }
  if (!out) throw CorrespondenceError("failed writing track file: " + path.string());
}

TrackSet read_tracks(const std::filesystem::path& path, int width, int frame_count,
                     std::size_t* dropped) {
  std::ifstream in(path);
  if (!in) throw CorrespondenceError("cannot open track file: " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("track_id,frame,px,py,visible", 0) != 0) {
    throw CorrespondenceError(path.string() + ": missing header track_id,frame,px,py,visible");
  }
  std::map<long, Track> by_id;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    long id = 0;
    long frame = 0;
    double px = 0, py = 0;
    int vis = 0;
    ls >> id >> frame >> px >> py >> vis;
    if (!ls || frame < 0 || frame >= frame_count) {
      throw CorrespondenceError(path.string() + ":" + std::to_string(line_no) + ": malformed track row");
    }
    Track& t = by_id[id];
    if (t.position.empty()) {
      t.position.assign(static_cast<std::size_t>(frame_count), Vec2::Zero());
      t.visible.assign(static_cast<std::size_t>(frame_count), 0);
    }
    const bool ok = vis != 0 && std::isfinite(px) && std::isfinite(py);
    t.visible[frame] = ok ? 1 : 0;
    t.position[frame] = Vec2(px, py) / static_cast<double>(width);
  }
  TrackSet set;
  set.frame_count = frame_count;
  for (auto& [id, t] : by_id) {
    const auto first = std::find(t.visible.begin(), t.visible.end(), std::uint8_t{1});
    t.query_frame = first == t.visible.end() ? 0 : static_cast<int>(first - t.visible.begin());
    set.tracks.push_back(std::move(t));
  }
  const std::size_t n = set.prune();
  if (dropped) *dropped = n;
  return set;
}

}  // namespace flowsfm
