#pragma once

// Annotated pair lists and dataset directories:
//   <dir>/annotations.csv   pair_id,category,src_image,tgt_image,src_kps,tgt_kps[,src_bbox,tgt_bbox]
//   <dir>/images/*.ppm
// Keypoint lists are written "x1:y1;x2:y2;..." and boxes "x0:y0:x1:y1".

#include "mmnet/image.hpp"

#include <iosfwd>

namespace mmnet {

struct PairRecord {
  std::string pair_id;
  std::string category;
  std::string source_image;  // relative to <dir>/images
  std::string target_image;
  std::vector<Point> source_kps;
  std::vector<Point> target_kps;
  std::optional<BBox> source_bbox;
  std::optional<BBox> target_bbox;
};

struct AnnotationTable {
  std::vector<PairRecord> records;
  std::vector<std::string> diagnostics;  // one line per rejected row
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<Point> parse_points(std::string_view field);
std::string format_points(const std::vector<Point>& points);
BBox parse_bbox(std::string_view field);
std::string format_bbox(const BBox& box);

/// Rows with unequal or empty keypoint lists are rejected with a diagnostic naming the pair.
AnnotationTable parse_annotations(std::istream& in);
AnnotationTable parse_annotations(const std::filesystem::path& path);
void write_annotations(std::ostream& out, const std::vector<PairRecord>& records);
void write_annotations(const std::filesystem::path& path, const std::vector<PairRecord>& records);

struct FilterReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
};

/// Removes correspondences whose source or target point lies outside its image.
FilterReport filter_annotations(KeypointAnnotation& ann);

/// One pair resized onto the canvas, with keypoints and boxes in the canvas frame.
struct Sample {
  std::string pair_id;
  std::string category;
  Image source;
  Image target;
  KeypointAnnotation ann;
};

/// Resizes both images to (height, width) and rescales the annotation by the same factors.
Sample to_canvas(const PairRecord& rec, const Image& source, const Image& target, Index height,
                 Index width);

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> diagnostics;
};

/// Loads every usable pair of a dataset directory onto the canvas. Keypoints falling outside
/// an image are dropped, and pairs left without keypoints are skipped; both are reported.
Dataset load_dataset(const std::filesystem::path& dir, Index height = 224, Index width = 320);

}  // namespace mmnet
