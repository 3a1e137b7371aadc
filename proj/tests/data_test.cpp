#include "mmnet/metrics.hpp"
#include "mmnet/synthetic.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace mmnet;
using namespace mmnet::testing;

TEST_CASE("PPM decode of a hand-written 2x2 payload") {
  const unsigned char px[12] = {0, 255, 10, 20, 30, 40, 128, 1, 2, 250, 251, 252};
  std::string bytes = "P6\n# comment\n2 2\n255\n";
  bytes.append(reinterpret_cast<const char*>(px), 12);
  const auto im = decode_ppm(bytes);
  REQUIRE(im.shape() == Shape{3, 2, 2});
  for (Index y = 0; y < 2; ++y)
    for (Index x = 0; x < 2; ++x)
      for (Index c = 0; c < 3; ++c) CHECK(im(c, y, x) == static_cast<float>(px[(y * 2 + x) * 3 + c]) / 255.0f);
  CHECK(encode_ppm(im) == "P6\n2 2\n255\n" + bytes.substr(bytes.size() - 12));

  CHECK_THROWS_AS(decode_ppm(bytes.substr(0, bytes.size() - 1)), ImageError);
  CHECK_THROWS_AS(decode_ppm("P3\n2 2\n255\n"), ImageError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 2\n65535\n"), ImageError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 x\n255\n"), ImageError);
  CHECK_THROWS_AS(read_ppm("/nonexistent/file.ppm"), ImageError);
}

TEST_CASE("PPM file round trip") {
  std::mt19937_64 rng(1);
  Image im(Shape{3, 5, 7});
  for (Index i = 0; i < im.size(); ++i) im[i] = static_cast<float>(rng() % 256) / 255.0f;
  const auto path = scratch_dir("ppm") / "a.ppm";
  write_ppm(path, im);
  CHECK(read_ppm(path) == im);
}

TEST_CASE("bilinear resize") {
  std::mt19937_64 rng(2);
  const auto im = random_tensor({3, 224, 320}, rng, 0, 1).cast<float>();
  CHECK(max_abs_diff(resize_bilinear(im, 224, 320), im) <= 1e-7f);

  const Image flat(Shape{3, 10, 12}, 0.25f);
  const auto r = resize_bilinear(flat, 7, 31);
  CHECK(r.shape() == Shape{3, 7, 31});
  CHECK((r.array() - 0.25f).abs().maxCoeff() < 1e-7f);

  // a horizontal ramp halves exactly in the interior
  Image ramp(Shape{3, 2, 8});
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < 2; ++y)
      for (Index x = 0; x < 8; ++x) ramp(c, y, x) = static_cast<float>(x);
  const auto half = resize_bilinear(ramp, 1, 4);
  for (Index x = 0; x < 4; ++x) CHECK(half(0, 0, x) == doctest::Approx(2.0 * x + 0.5));
}

TEST_CASE("keypoints follow the resize factors") {
  PairRecord rec{"p", "c", "s.ppm", "t.ppm", {{100, 50}}, {{200, 100}}, BBox{0, 0, 640, 448}, std::nullopt};
  const Image src(Shape{3, 448, 640}, 0.5f), tgt(Shape{3, 112, 160}, 0.5f);
  const auto s = to_canvas(rec, src, tgt, 224, 320);
  CHECK(s.source.shape() == Shape{3, 224, 320});
  CHECK(s.ann.source[0] == Point{50, 25});
  CHECK(s.ann.target[0] == Point{400, 200});
  CHECK(s.ann.source_bbox->x1 == 320);
  CHECK(s.ann.source_bbox->y1 == 224);
  CHECK(s.ann.target_w == 320);
}

TEST_CASE("keypoint and box fields") {
  const auto pts = parse_points("1.5:2;3:4.25");
  REQUIRE(pts.size() == 2);
  CHECK(pts[1] == Point{3, 4.25});
  CHECK(format_points(pts) == "1.500000:2.000000;3.000000:4.250000");
  CHECK_THROWS_AS(parse_points("1:2:3"), DatasetError);
  CHECK_THROWS_AS(parse_points("a:2"), DatasetError);
  CHECK(parse_bbox("1:2:30:40") == BBox{1, 2, 30, 40});
  CHECK_THROWS_AS(parse_bbox("1:2:0:40"), DatasetError);
}

TEST_CASE("annotation parsing") {
  std::istringstream in(
      "pair_id,category,src_image,tgt_image,src_kps,tgt_kps,src_bbox,tgt_bbox\n"
      "a,cat,a_s.ppm,a_t.ppm,1:2;3:4;5:6,7:8;9:10;11:12,0:0:10:10,\n"
      "b,dog,b_s.ppm,b_t.ppm,1:2;3:4,7:8\n"
      "c,dog,c_s.ppm,c_t.ppm,,\n");
  const auto table = parse_annotations(in);
  REQUIRE(table.records.size() == 1);
  CHECK(table.records[0].source_kps.size() == 3);
  CHECK(table.records[0].source_bbox.has_value());
  CHECK_FALSE(table.records[0].target_bbox.has_value());
  REQUIRE(table.diagnostics.size() == 2);
  CHECK(table.diagnostics[0].find("'b'") != std::string::npos);
  CHECK(table.diagnostics[1].find("'c'") != std::string::npos);

  std::istringstream bad("id,category\n");
  CHECK_THROWS_AS(parse_annotations(bad), DatasetError);
}

TEST_CASE("annotation write then parse is lossless at six decimals") {
  std::mt19937_64 rng(3);
  std::vector<PairRecord> recs;
  for (int i = 0; i < 20; ++i) {
    PairRecord r{"pair" + std::to_string(i), i % 2 ? "x" : "y", "s.ppm", "t.ppm", {}, {}, std::nullopt, std::nullopt};
    for (int k = 0; k < 4; ++k) {
      r.source_kps.push_back({std::round(uniform(rng, 0, 320) * 1e6) / 1e6, std::round(uniform(rng, 0, 224) * 1e6) / 1e6});
      r.target_kps.push_back({std::round(uniform(rng, 0, 320) * 1e6) / 1e6, std::round(uniform(rng, 0, 224) * 1e6) / 1e6});
    }
    if (i % 3 == 0) r.target_bbox = BBox{1.25, 2.5, 100.125, 80};
    recs.push_back(r);
  }
  std::stringstream ss;
  write_annotations(ss, recs);
  const auto back = parse_annotations(ss);
  REQUIRE(back.records.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back.records[i].pair_id == recs[i].pair_id);
    CHECK(back.records[i].category == recs[i].category);
    CHECK(back.records[i].target_bbox == recs[i].target_bbox);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(std::abs(back.records[i].source_kps[k].x - recs[i].source_kps[k].x) < 1e-9);
      CHECK(std::abs(back.records[i].target_kps[k].y - recs[i].target_kps[k].y) < 1e-9);
    }
  }
}

TEST_CASE("synthetic warps have analytic ground truth") {
  SUBCASE("identity") {
    const auto w = Warp::from_affine(Eigen::Matrix<double, 2, 3>::Identity());
    CHECK(*w.forward({12.5, 99.25}) == Point{12.5, 99.25});
  }
  SUBCASE("translation") {
    Eigen::Matrix<double, 2, 3> a;
    a << 1, 0, 10, 0, 1, 4;
    const auto w = Warp::from_affine(a);
    for (Point p : {Point{0, 0}, Point{100.5, 3.25}, Point{319, 223}}) {
      CHECK(*w.forward(p) == Point{p.x + 10, p.y + 4});
      CHECK(w.inverse({p.x + 10, p.y + 4}) == p);
    }
  }
  SUBCASE("random affine against the matrix") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 10; ++i) {
      const auto w = random_warp(rng, WarpFamily::affine, 1.0, 224, 320);
      const Point p{uniform(rng, 0, 320), uniform(rng, 0, 224)};
      const Eigen::Vector2d ref = w.affine * Eigen::Vector3d(p.x, p.y, 1.0);
      const auto got = *w.forward(p);
      CHECK(std::abs(got.x - ref.x()) < 1e-9);
      CHECK(std::abs(got.y - ref.y()) < 1e-9);
    }
  }
  SUBCASE("tps forward inverts the pull-back map") {
    std::mt19937_64 rng(5);
    const auto w = random_warp(rng, WarpFamily::tps, 1.0, 224, 320);
    for (int i = 0; i < 20; ++i) {
      const Point p{uniform(rng, 20, 300), uniform(rng, 20, 204)};
      const auto t = w.forward(p);
      REQUIRE(t.has_value());
      CHECK(distance(w.inverse(*t), p) < 1e-9);
    }
  }
}

TEST_CASE("synthetic dataset properties") {
  SyntheticSpec spec;
  spec.seed = 11;
  spec.pairs = 6;
  spec.height = 64;
  spec.width = 96;
  spec.keypoints = 5;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  REQUIRE(a.size() == 6);
  std::vector<PairPrediction> exact;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].source == b[i].source);
    CHECK(a[i].target == b[i].target);
    const auto& r = a[i].record;
    CHECK(r.source_kps.size() == 5);
    for (std::size_t k = 0; k < r.source_kps.size(); ++k) {
      CHECK(r.source_kps[k] == b[i].record.source_kps[k]);
      CHECK(inside(r.source_kps[k], 96, 64));
      CHECK(inside(r.target_kps[k], 96, 64));
      CHECK(r.source_kps[k].x > 0);
      CHECK(r.target_kps[k].y > 0);
      CHECK(distance(*a[i].warp.forward(r.source_kps[k]), r.target_kps[k]) < 1e-9);
    }
    exact.push_back({r.pair_id, r.category, r.source_kps, r.target_kps, r.target_kps, 96, 64, std::nullopt});
  }
  for (double alpha : {0.0, 0.01, 0.1}) CHECK(pck(exact, alpha).value() == 1.0);

  spec.seed = 12;
  CHECK_FALSE(generate_synthetic(spec)[0].source == a[0].source);
}

TEST_CASE("written dataset loads back onto the canvas") {
  SyntheticSpec spec;
  spec.seed = 13;
  spec.pairs = 3;
  spec.height = 64;
  spec.width = 96;
  const auto pairs = generate_synthetic(spec);
  const auto dir = scratch_dir("dataset");
  write_dataset(dir, pairs);
  const auto ds = load_dataset(dir, 64, 96);
  REQUIRE(ds.samples.size() == 3);
  CHECK(ds.diagnostics.empty());
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(ds.samples[i].pair_id == pairs[i].record.pair_id);
    CHECK(max_abs_diff(ds.samples[i].source, pairs[i].source) <= 0.5f / 255.0f + 1e-6f);
    REQUIRE(ds.samples[i].ann.size() == pairs[i].record.source_kps.size());
    for (std::size_t k = 0; k < ds.samples[i].ann.size(); ++k)
      CHECK(distance(ds.samples[i].ann.source[k], pairs[i].record.source_kps[k]) < 1e-6);
  }
  CHECK_THROWS(load_dataset(dir / "missing"));
}

TEST_CASE("out-of-bounds keypoints are dropped at load time") {
  const auto dir = scratch_dir("oob");
  std::filesystem::create_directories(dir / "images");
  write_ppm(dir / "images" / "s.ppm", Image(Shape{3, 32, 32}, 0.5f));
  std::ofstream(dir / "annotations.csv") << "pair_id,category,src_image,tgt_image,src_kps,tgt_kps\n"
                                         << "a,c,s.ppm,s.ppm,1:2;40:3,4:5;6:7\n"
                                         << "b,c,s.ppm,s.ppm,-1:2,4:5\n";
  const auto ds = load_dataset(dir, 32, 32);
  REQUIRE(ds.samples.size() == 1);
  CHECK(ds.samples[0].ann.size() == 1);
  CHECK(ds.diagnostics.size() == 3);
}
