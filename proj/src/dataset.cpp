#include "mmnet/dataset.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mmnet {

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? s.size() - start : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

double parse_number(std::string_view s) {
  s = trim(s);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw DatasetError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::string fixed6(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(6) << v;
  return ss.str();
}

const std::vector<std::string> kColumns = {"pair_id", "category", "src_image",
                                           "tgt_image", "src_kps", "tgt_kps"};

}  // namespace

std::vector<Point> parse_points(std::string_view field) {
  std::vector<Point> out;
  field = trim(field);
  if (field.empty()) return out;
  for (auto item : split(field, ';')) {
    const auto xy = split(item, ':');
    if (xy.size() != 2) throw DatasetError("malformed keypoint '" + std::string(item) + "'");
    out.push_back({parse_number(xy[0]), parse_number(xy[1])});
  }
  return out;
}

std::string format_points(const std::vector<Point>& points) {
  std::string out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (i) out += ';';
    out += fixed6(points[i].x) + ":" + fixed6(points[i].y);
  }
  return out;
}

BBox parse_bbox(std::string_view field) {
  const auto parts = split(trim(field), ':');
  if (parts.size() != 4) throw DatasetError("malformed bounding box '" + std::string(field) + "'");
  BBox b{parse_number(parts[0]), parse_number(parts[1]), parse_number(parts[2]),
         parse_number(parts[3])};
  if (!(b.x1 > b.x0 && b.y1 > b.y0)) throw DatasetError("degenerate bounding box '" + std::string(field) + "'");
  return b;
}

std::string format_bbox(const BBox& b) {
  return fixed6(b.x0) + ":" + fixed6(b.y0) + ":" + fixed6(b.x1) + ":" + fixed6(b.y1);
}

AnnotationTable parse_annotations(std::istream& in) {
  AnnotationTable table;
  std::string line;
  if (!std::getline(in, line)) throw DatasetError("annotations: empty file");
  const auto header = split(trim(line), ',');
  if (header.size() < kColumns.size()) throw DatasetError("annotations: header has too few columns");
  for (std::size_t i = 0; i < kColumns.size(); ++i) {
    if (trim(header[i]) != kColumns[i]) {
      throw DatasetError("annotations: expected column '" + kColumns[i] + "', found '" +
                         std::string(header[i]) + "'");
    }
  }
  const bool has_boxes = header.size() >= 8;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    const std::string id = cells.empty() ? "" : std::string(trim(cells[0]));
    try {
      if (cells.size() < kColumns.size()) throw DatasetError("too few columns");
      PairRecord rec;
      rec.pair_id = id;
      rec.category = std::string(trim(cells[1]));
      rec.source_image = std::string(trim(cells[2]));
      rec.target_image = std::string(trim(cells[3]));
      rec.source_kps = parse_points(cells[4]);
      rec.target_kps = parse_points(cells[5]);
      if (rec.source_kps.size() != rec.target_kps.size()) {
        throw DatasetError("keypoint lists differ in length (" +
                           std::to_string(rec.source_kps.size()) + " vs " +
                           std::to_string(rec.target_kps.size()) + ")");
      }
      if (rec.source_kps.empty()) throw DatasetError("no keypoints");
      if (has_boxes && cells.size() >= 8) {
        if (!trim(cells[6]).empty()) rec.source_bbox = parse_bbox(cells[6]);
        if (!trim(cells[7]).empty()) rec.target_bbox = parse_bbox(cells[7]);
      }
      table.records.push_back(std::move(rec));
    } catch (const DatasetError& e) {
      table.diagnostics.push_back("line " + std::to_string(line_no) + ", pair '" + id +
                                  "': " + e.what() + "; row skipped");
    }
  }
  return table;
}

AnnotationTable parse_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open annotations " + path.string());
  return parse_annotations(in);
}

void write_annotations(std::ostream& out, const std::vector<PairRecord>& records) {
  const bool boxes = std::any_of(records.begin(), records.end(), [](const PairRecord& r) {
    return r.source_bbox.has_value() || r.target_bbox.has_value();
  });
  out << "pair_id,category,src_image,tgt_image,src_kps,tgt_kps";
  if (boxes) out << ",src_bbox,tgt_bbox";
  out << '\n';
  for (const auto& r : records) {
    out << r.pair_id << ',' << r.category << ',' << r.source_image << ',' << r.target_image << ','
        << format_points(r.source_kps) << ',' << format_points(r.target_kps);
    if (boxes) {
      out << ',' << (r.source_bbox ? format_bbox(*r.source_bbox) : "") << ','
          << (r.target_bbox ? format_bbox(*r.target_bbox) : "");
    }
    out << '\n';
  }
}

void write_annotations(const std::filesystem::path& path, const std::vector<PairRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write annotations " + path.string());
  write_annotations(out, records);
}

FilterReport filter_annotations(KeypointAnnotation& ann) {
  FilterReport report;
  std::vector<Point> src, tgt;
  for (std::size_t i = 0; i < ann.size(); ++i) {
    if (inside(ann.source[i], ann.source_w, ann.source_h) &&
        inside(ann.target[i], ann.target_w, ann.target_h)) {
      src.push_back(ann.source[i]);
      tgt.push_back(ann.target[i]);
      ++report.kept;
    } else {
      ++report.dropped;
    }
  }
  ann.source = std::move(src);
  ann.target = std::move(tgt);
  return report;
}

Sample to_canvas(const PairRecord& rec, const Image& source, const Image& target, Index height,
                 Index width) {
  Sample s;
  s.pair_id = rec.pair_id;
  s.category = rec.category;
  const double cw = static_cast<double>(width), ch = static_cast<double>(height);
  const Point fs = resize_factors(static_cast<double>(image_width(source)),
                                  static_cast<double>(image_height(source)), cw, ch);
  const Point ft = resize_factors(static_cast<double>(image_width(target)),
                                  static_cast<double>(image_height(target)), cw, ch);
  s.source = resize_bilinear(source, height, width);
  s.target = resize_bilinear(target, height, width);
  auto scale = [](const Point& p, const Point& f) { return Point{p.x * f.x, p.y * f.y}; };
  auto scale_box = [](const BBox& b, const Point& f) {
    return BBox{b.x0 * f.x, b.y0 * f.y, b.x1 * f.x, b.y1 * f.y};
  };
  for (const auto& p : rec.source_kps) s.ann.source.push_back(scale(p, fs));
  for (const auto& p : rec.target_kps) s.ann.target.push_back(scale(p, ft));
  if (rec.source_bbox) s.ann.source_bbox = scale_box(*rec.source_bbox, fs);
  if (rec.target_bbox) s.ann.target_bbox = scale_box(*rec.target_bbox, ft);
  s.ann.source_w = s.ann.target_w = cw;
  s.ann.source_h = s.ann.target_h = ch;
  return s;
}

Dataset load_dataset(const std::filesystem::path& dir, Index height, Index width) {
  Dataset ds;
  auto table = parse_annotations(dir / "annotations.csv");
  ds.diagnostics = std::move(table.diagnostics);
  for (const auto& rec : table.records) {
    const Image src = read_ppm(dir / "images" / rec.source_image);
    const Image tgt = read_ppm(dir / "images" / rec.target_image);
    Sample s = to_canvas(rec, src, tgt, height, width);
    const FilterReport report = filter_annotations(s.ann);
    if (report.dropped > 0) {
      ds.diagnostics.push_back("pair '" + rec.pair_id + "': dropped " +
                               std::to_string(report.dropped) + " out-of-bounds keypoint(s)");
    }
    if (report.kept == 0) {
      ds.diagnostics.push_back("pair '" + rec.pair_id + "': no usable keypoints; pair skipped");
      continue;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace mmnet
