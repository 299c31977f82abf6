#pragma once

// Dense adjacent-frame optical flow, sparse point tracks, and the
// flow-balanced frame subsampler.
//
// File formats (all multi-byte values little-endian):
//
//   Flow (.flo):  "FLO1" | u32 width | u32 height |
//                 2*w*h float32 (dx, dy) in raw pixels, row-major, interleaved |
//                 w*h u8 mask (1 = valid)
//
//   Tracks (.csv): header `track_id,frame,px,py,visible`, one row per
//                 (track, frame) observation, positions in raw pixels. The query
//                 frame of a track is its first visible row.

#include "flowsfm/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace flowsfm {

class CorrespondenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flow from frame `source` to frame `source + 1`, width-normalized units.
struct FlowField {
  int source = 0;
  int width = 0;
  int height = 0;
  std::vector<Vec2> displacement;     // row-major, width * height
  std::vector<std::uint8_t> valid;    // row-major, width * height

  FlowField() = default;
  FlowField(int source_frame, int w, int h);

  [[nodiscard]] int target() const { return source + 1; }
  [[nodiscard]] std::size_t index(int col, int row) const {
    return static_cast<std::size_t>(row) * width + col;
  }
  [[nodiscard]] std::size_t valid_count() const;
  /// Mean displacement norm over valid pixels (normalized units).
  [[nodiscard]] double mean_magnitude() const;
};

/// u_ij = u_i + F_ij[u_i] with bilinear interpolation of the flow grid;
/// nullopt when the query is out of bounds or any contributing tap is masked.
std::optional<Vec2> lookup_correspondence(const FlowField& flow, const Vec2& u);

/// Masks entries whose displacement norm exceeds `max_norm` (normalized units).
std::size_t filter_max_displacement(FlowField& flow, double max_norm);

struct Track {
  int query_frame = 0;
  std::vector<Vec2> position;           // per frame, normalized units
  std::vector<std::uint8_t> visible;    // per frame

  [[nodiscard]] int visible_count() const;
};

struct TrackSet {
  int frame_count = 0;
  std::vector<Track> tracks;

  /// Drops tracks visible in fewer than two frames; returns how many were dropped.
  std::size_t prune();
};

struct SubsampleResult {
  std::vector<int> indices;          // ascending, first and last always present
  std::vector<double> gap_magnitude; // accumulated flow between consecutive selections
};

/// Picks the frames nearest to `target_count` equally spaced quantiles of the
/// cumulative flow magnitude. `step_magnitude[k]` is the flow between frames k
/// and k + 1. Ties break toward the earlier frame.
SubsampleResult subsample_frames(const std::vector<double>& step_magnitude, int target_count);

void write_flow(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flow(const std::filesystem::path& path, int source_frame);

/// `width` converts between normalized and raw pixel positions.
void write_tracks(const std::filesystem::path& path, const TrackSet& tracks, int width);
/// Loads tracks and prunes ones visible in fewer than two frames. `dropped`
/// receives the pruned count when non-null.
TrackSet read_tracks(const std::filesystem::path& path, int width, int frame_count,
                     std::size_t* dropped = nullptr);

}  // namespace flowsfm
