// Acceptance suite: one PASS/FAIL line per criterion.

#include "gradient_suite.hpp"
#include "mmnet/dataset.hpp"
#include "mmnet/image.hpp"
#include "mmnet/metrics.hpp"
#include "mmnet/pipeline.hpp"
#include "mmnet/synthetic.hpp"
#include "mmnet/tps.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

using namespace mmnet;
using namespace mmnet::testing;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr int kGradSeeds = 10;
constexpr double kCorrTol = 1e-10;
constexpr double kUpscaleTol = 1e-9;
constexpr double kLsaTol = 1e-10;
constexpr double kSumTol = 1e-6;
constexpr int kSumConfigs = 100;
constexpr double kTrainPck = 0.70;
constexpr double kTrainGain = 3.0;
constexpr double kTrainMinutes = 15.0;
constexpr unsigned kTrainCores = 4;
constexpr double kNoCompSlack = 0.01;
constexpr double kTpsInterp = 1e-9;
constexpr double kTpsRadial = 1e-8;
constexpr double kTpsRoundTrip = 1e-7;

struct Line {
  int id;
  bool pass;
  std::string detail;
  bool hardware_only = false;  // failed solely on a wall-clock budget stated for more cores
};

std::vector<Line> g_lines;

void report(int id, bool pass, const std::string& detail, bool hardware_only = false) {
  g_lines.push_back({id, pass, detail, hardware_only});
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream ss;
  ss << std::setprecision(prec) << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Cli {
  std::string exe;
  fs::path log;

  /// Runs the CLI, returns stdout; throws on a non-zero exit.
  std::string operator()(const std::string& args) const {
    const std::string cmd = "\"" + exe + "\" " + args + " 2>>\"" + log.string() + "\"";
    std::ofstream(log, std::ios::app) << "$ mmnet " << args << '\n';
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("cannot run " + exe);
    std::string out;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
    const int status = pclose(pipe);
    if (status != 0) throw std::runtime_error("mmnet " + args + " failed (see " + log.string() + ")");
    return out;
  }

  double pck(const fs::path& model, const fs::path& data, double alpha) const {
    const auto out = (*this)("eval --checkpoint \"" + model.string() + "\" --data \"" + data.string() +
                             "\" --alpha " + fmt(alpha, 17));
    return nlohmann::json::parse(out)["all"]["pck"].get<double>();
  }
};

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// ---------------------------------------------------------------------------------------------

void criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  double ops = 0.0, net = 0.0;
  std::string ops_where, net_where;
  Index checked = 0, kinks = 0;
  for (const auto& c : gradient_cases()) {
    for (int s = 0; s < kGradSeeds; ++s) {
      const auto r = run_case(c, 1000 + s);
      checked += r.checked;
      if (r.max_relative_error > ops) {
        ops = r.max_relative_error;
        ops_where = c.name + " " + r.worst;
      }
    }
  }
  for (int s = 0; s < kGradSeeds; ++s) {
    const auto r = run_toy_case(2000 + s);
    checked += r.checked;
    kinks += r.kinks;
    if (r.max_relative_error > net) {
      net = r.max_relative_error;
      net_where = r.worst;
    }
  }
  const double secs = seconds_since(t0);
  report(1, ops < kGradTol && net < kGradTol && secs < kGradSeconds,
         "max rel err ops " + fmt(ops) + " (" + ops_where + "), toy network " + fmt(net) + " (" + net_where +
             ", " + std::to_string(kinks) + " entries with unequal one-sided slopes), " + std::to_string(checked) + " entries, " +
             std::to_string(kGradSeeds) + " seeds, " + fmt(secs, 3) + " s");
}

void criterion2() {
  std::mt19937_64 rng(2);
  ad::Tape<double> t;
  double worst = 0.0;
  bool symmetric = true;
  for (auto [c, h, w] : {std::tuple<Index, Index, Index>{1, 1, 1}, {4, 3, 5}, {21, 6, 8}}) {
    for (int k = 0; k < 3; ++k) {
      const auto a = random_tensor({c, h, w}, rng), b = random_tensor({c, w, h + 1}, rng);
      const auto ab = correlate(t.constant(a), t.constant(b)).value();
      worst = std::max(worst, max_abs_diff(ab, correlate_oracle(a, b)));
      symmetric = symmetric && permuted(ab, std::vector<Index>{2, 3, 0, 1}) ==
                                   correlate(t.constant(b), t.constant(a)).value();
    }
  }
  report(2, worst < kCorrTol && symmetric,
         "max |correlate - loop| " + fmt(worst) + ", transpose symmetry " + (symmetric ? "exact" : "broken"));
}

void criterion3() {
  std::mt19937_64 rng(3);
  ad::Tape<double> t;
  double worst = 0.0;
  for (Shape s : {Shape{1, 1, 1, 1}, Shape{2, 1, 3, 2}, Shape{3, 3, 3, 3}}) {
    const auto x = random_tensor(s, rng);
    worst = std::max(worst, max_abs_diff(upscale4d(t.constant(x)).value(), upscale4d_oracle(x)));
  }
  const auto up = upscale4d(t.constant(Tensor<double>(Shape{3, 3, 3, 3}, 0.7))).value();
  const bool constant = up.shape() == Shape{6, 6, 6, 6} && (up.array() == 0.7).all();
  const auto s4 = random_tensor({4, 6, 4, 6}, rng);
  MatchTensor<double> residual{4, t.constant(s4), MatchKind::residual};
  MatchTensor<double> zero{5, t.constant(Tensor<double>(Shape{2, 3, 2, 3})), MatchKind::accumulated};
  const bool identity = complement(residual, std::optional(zero)).scores.value() == s4;
  report(3, worst < kUpscaleTol && constant && identity,
         "max |upscale4d - separable| " + fmt(worst) + ", constants " + (constant ? "exact" : "changed") +
             ", zero-upper complement " + (identity ? "identity" : "not identity"));
}

void criterion4() {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  bool identity = true;
  for (Index r : {1, 3, 5, 7}) {
    ad::Tape<double> t;
    const auto x = random_tensor({5, 6, 7}, rng);
    auto w = random_lsa(5, 3, rng);
    worst = std::max(worst, max_abs_diff(local_self_attention(t.constant(x), bind_lsa(t, w), r).value(),
                                         lsa_oracle(x, w, r)));
    w.g_w.array() = 0.0;
    w.g_b.array() = 0.0;
    identity = identity && local_self_attention(t.constant(x), bind_lsa(t, w), r).value() == x;
  }
  report(4, identity && worst < kLsaTol,
         std::string("G=0 ") + (identity ? "returns the input exactly" : "changes the input") +
             ", max |LSA - per-cell| " + fmt(worst));
}

void criterion5() {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int k = 0; k < kSumConfigs; ++k) {
    const Index hs = 1 + rng() % 8, ws = 1 + rng() % 8, ht = 1 + rng() % 8, wt = 1 + rng() % 8;
    const double spread = uniform(rng, 0.1, 60.0);
    const auto s = random_tensor({hs, ws, ht, wt}, rng, -spread, spread);
    const auto p = to_probability(s, {Index(rng() % hs), Index(rng() % ws)}, Direction::source_to_target);
    const auto pt = to_probability(s, {Index(rng() % ht), Index(rng() % wt)}, Direction::target_to_source);
    const int scale = 2 + static_cast<int>(rng() % 4);
    const Index stride = scale_stride(scale);
    const auto gt = build_gt_map({uniform(rng, 0, 320 - 1e-9), uniform(rng, 0, 224 - 1e-9)}, scale,
                                 224 / stride, 320 / stride, 320, 224);
    for (double sum : {p.array().sum(), pt.array().sum(), gt.array().sum()}) worst = std::max(worst, std::abs(sum - 1.0));
  }
  report(5, worst < kSumTol, "max |sum - 1| " + fmt(worst) + " over " + std::to_string(kSumConfigs) +
                                 " configurations (both directions and GT)");
}

struct TrainRun {
  fs::path model;
  double seconds = 0.0;
};

TrainRun train(const Cli& cli, const fs::path& data, const fs::path& out, const std::string& extra,
               Index iters) {
  const auto t0 = std::chrono::steady_clock::now();
  cli("train --data " + q(data) + " --out " + q(out) + " --iters " + std::to_string(iters) + " " + extra);
  return {out / "model", seconds_since(t0)};
}

void criteria6and7(const Cli& cli, const fs::path& work) {
  const fs::path train_dir = work / "train", test_dir = work / "test";
  cli("synth --out " + q(train_dir) + " --pairs 200 --seed 1 --set synth.keypoints=10 --set synth.family=tps");
  cli("synth --out " + q(test_dir) + " --pairs 50 --seed 2 --set synth.keypoints=10 --set synth.family=tps");

  std::optional<double> full05;
  try {
    const auto untrained = train(cli, train_dir, work / "untrained", "", 0);
    const double base = cli.pck(untrained.model, test_dir, 0.1);
    const auto full = train(cli, train_dir, work / "full", "", 2000);
    const double got = cli.pck(full.model, test_dir, 0.1);
    full05 = cli.pck(full.model, test_dir, 0.05);
    const double minutes = full.seconds / 60.0;
    const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
    const bool quality = got >= kTrainPck && got >= kTrainGain * base;
    const bool fast = minutes < kTrainMinutes;
    report(6, quality && fast,
           "PCK@0.1 " + fmt(got) + " (untrained " + fmt(base) + ", need >= " + fmt(kTrainPck) + " and >= " +
               fmt(kTrainGain) + "x), wall-clock " + fmt(minutes, 3) + " min on " + std::to_string(cores) +
               " core(s) (limit " + fmt(kTrainMinutes) + " min on " + std::to_string(kTrainCores) + ")",
           quality && !fast && cores < kTrainCores);
  } catch (const std::exception& e) {
    report(6, false, e.what());
  }

  try {
    if (!full05) throw std::runtime_error("full model unavailable");
    const auto s2 = train(cli, train_dir, work / "only_s2", "--set train.supervised_scales=2", 2000);
    const auto nc = train(cli, train_dir, work / "no_comp", "--set model.complementation.enabled=false", 2000);
    const double p2 = cli.pck(s2.model, test_dir, 0.05), pnc = cli.pck(nc.model, test_dir, 0.05);
    report(7, p2 < *full05 && pnc <= *full05 + kNoCompSlack,
           "PCK@0.05 full " + fmt(*full05) + ", scale-2 supervision only " + fmt(p2) + " (must be lower), " +
               "no complementation " + fmt(pnc) + " (must be <= full + " + fmt(kNoCompSlack) + ")");
  } catch (const std::exception& e) {
    report(7, false, e.what());
  }
}

struct PckCase {
  double w, h;
  std::optional<BBox> box;
  double alpha;
  std::vector<std::pair<double, double>> offsets;
  std::size_t expected;
};

void criterion8() {
  const std::vector<PckCase> cases{
      {100, 50, {}, 0.1, {{0, 0}, {10, 0}, {6, 8}, {8, 7}}, 3},
      {100, 50, {}, 0.05, {{3, 4}, {5, 0.1}, {0, -5}, {-2, 2}}, 3},
      {320, 224, {}, 0.1, {{32, 0}, {0, 32.01}, {-20, -24}, {30, 12}}, 2},
      {320, 224, {}, 0.01, {{3, 0}, {0, 3.3}, {2, 2}, {-3.1, 0.5}}, 3},
      {1, 1, BBox{0, 0, 40, 80}, 0.1, {{8, 0}, {0, -8}, {5, 6}, {6, 6}}, 3},
      {1, 1, BBox{10, 20, 110, 45}, 0.2, {{12, 16}, {15, 15}, {0, 19.99}}, 2},
      {50, 200, {}, 0.1, {{20, 0}, {0, 20.5}, {-12, -16}}, 2},
      {100, 50, {}, 0.0, {{0, 0}, {0, 0}, {0, 0}, {0, 0}, {0, 0}}, 5},
      {100, 50, {}, 0.0, {{0, 0}, {0.001, 0}}, 1},
      {100, 50, {}, 1.0, {{60, 80}, {100, 1}}, 1},
      {200, 120, {}, 0.15, {{18, 24}, {30, 0}, {0, -30.0001}, {21, 21}}, 3},
      {100, 50, {}, 0.1, {{0, 0}, {2, 0}, {4, 0}, {6, 0}, {8, 0}, {10, 0}, {12, 0}, {14, 0}, {16, 0}, {18, 0}}, 6},
      {640, 480, {}, 0.05, {{-32, 0}, {16, -27.7}, {25, 20}, {10, 10}}, 3},
      {100, 50, {}, 0.3, {{1000, 1000}}, 0},
      {1, 1, BBox{0, 0, 1, 1}, 0.5, {{0.5, 0}, {0, -0.5}, {0.5, 0.01}, {0.25, 0}}, 3},
      {8, 8, {}, 0.25, {{0, 2}, {2, 0}, {1.5, 1.5}, {0, -1}}, 3},
      {100, 50, {}, 0.1, {{-6, -8}, {-7, -7.2}, {-9.9, 0}}, 2},
      {96, 40, {}, 0.125, {{0, 12}, {12, 0}, {8.5, 8.5}, {7, 9}}, 3},
      {200, 100, {}, 0.1, {{11, 0}, {0, 21}, {19, 0}}, 2},
      {1, 1, BBox{0, 0, 50, 30}, 0.2, {{6, 8}, {10, 0.5}, {-3, 0}}, 2},
  };
  std::size_t agree = 0;
  std::string mismatches;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    PairPrediction p{"case" + std::to_string(i), "c", {}, {}, {}, c.w, c.h, c.box};
    for (const auto& [dx, dy] : c.offsets) {
      const Point gt{40.0 + i, 30.0 - i};
      p.source.push_back(gt);
      p.truth.push_back(gt);
      p.predicted.push_back({gt.x + dx, gt.y + dy});
    }
    const auto r = pck({p}, c.alpha, c.box ? Normalizer::bbox : Normalizer::image);
    const bool ok = r.all.correct == c.expected && r.all.total == c.offsets.size();
    agree += ok;
    if (!ok) {
      mismatches += ", case " + std::to_string(i) + " counted " + std::to_string(r.all.correct) + " expected " +
                   std::to_string(c.expected);
    }
  }
  report(8, agree == cases.size(),
         std::to_string(agree) + "/" + std::to_string(cases.size()) + " constructed cases match hand counts" +
             mismatches);
}

void criterion9(const Cli& cli, const fs::path& work) {
  std::mt19937_64 rng(9);
  std::vector<Point> src;
  for (int i = 0; i < 10; ++i) src.push_back({uniform(rng, 10, 310), uniform(rng, 10, 214)});

  std::vector<Point> dst;
  for (const auto& p : src) dst.push_back({p.x + uniform(rng, -15, 15), p.y + uniform(rng, -15, 15)});
  const auto fit = tps_fit(src, dst, 0.0);
  double interp = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) interp = std::max(interp, distance(fit.apply(src[i]), dst[i]));

  Eigen::Matrix<double, 2, 3> a;
  a << 0.95, 0.12, 7.5, -0.08, 1.04, -3.0;
  std::vector<Point> adst;
  for (const auto& p : src) {
    const Eigen::Vector2d v = a * Eigen::Vector3d(p.x, p.y, 1.0);
    adst.push_back({v.x(), v.y()});
  }
  const double radial = tps_fit(src, adst, 0.0).weights.cwiseAbs().maxCoeff();

  double round_trip = std::numeric_limits<double>::infinity();
  std::string note;
  try {
    const fs::path dir = work / "warp_identity";
    fs::create_directories(dir / "images");
    Image im(Shape{3, 224, 320});
    for (Index i = 0; i < im.size(); ++i) im[i] = static_cast<float>(rng() % 256) / 255.0f;
    write_ppm(dir / "images" / "s.ppm", im);
    PairRecord rec{"identity", "c", "s.ppm", "s.ppm", src, src, std::nullopt, std::nullopt};
    write_annotations(dir / "annotations.csv", {rec});
    PairPrediction pred{"identity", "c", src, src, src, 320, 224, std::nullopt};
    write_predictions(dir / "identity.csv", {pred});
    cli("warp --predictions " + q(dir / "identity.csv") + " --data " + q(dir) + " --out " + q(dir / "out"));
    const Image back = read_ppm(dir / "out" / "identity_warped.ppm");
    round_trip = back.shape() == im.shape() ? static_cast<double>(max_abs_diff(back, im)) : round_trip;
  } catch (const std::exception& e) {
    note = std::string(" (") + e.what() + ")";
  }
  report(9, interp < kTpsInterp && radial < kTpsRadial && round_trip < kTpsRoundTrip,
         "lambda=0 interpolation " + fmt(interp) + ", affine radial weights " + fmt(radial) +
             ", identity warp round trip " + fmt(round_trip) + note);
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return files;
}

void criterion10(const Cli& cli, const fs::path& work) {
  try {
    const fs::path data = work / "det_data";
    cli("synth --out " + q(data) + " --pairs 10 --seed 10");
    const std::string extra = "--set train.checkpoint_interval=2 --set train.validation_pairs=4";
    train(cli, data, work / "det_a", extra, 4);
    train(cli, data, work / "det_b", extra, 4);
    const auto a = tree(work / "det_a"), b = tree(work / "det_b");
    std::size_t bytes = 0;
    for (const auto& [k, v] : a) bytes += v.size();
    const bool same = a == b && a.count("train_log.csv") && a.count("model/meta.txt");
    report(10, same, std::to_string(a.size()) + " files (" + std::to_string(bytes) + " bytes) " +
                         (same ? "byte-identical" : "differ") + " across two runs");
  } catch (const std::exception& e) {
    report(10, false, e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work", exe;
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory (wiped)");
  app.add_option("--cli", exe, "path to the mmnet executable")->required()->check(CLI::ExistingFile);
  app.add_option("--only", only, "run just these criteria");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(work);
  fs::remove_all(root);
  fs::create_directories(root);
  const Cli cli{exe, root / "cli.log"};
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  if (want(1)) criterion1();
  if (want(2)) criterion2();
  if (want(3)) criterion3();
  if (want(4)) criterion4();
  if (want(5)) criterion5();
  if (want(8)) criterion8();
  if (want(9)) criterion9(cli, root);
  if (want(10)) criterion10(cli, root);
  if (want(6) || want(7)) criteria6and7(cli, root);

  std::sort(g_lines.begin(), g_lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  std::cout << "\nsummary\n";
  int hard = 0, hardware = 0;
  for (const auto& l : g_lines) {
    std::cout << "criterion " << l.id << ": " << (l.pass ? "PASS" : "FAIL") << '\n';
    if (!l.pass) ++(l.hardware_only ? hardware : hard);
  }
  if (hardware) {
    std::cout << hardware << " criterion failed only on a wall-clock budget stated for " << kTrainCores
              << " cores; this machine has fewer\n";
  }
  return hard ? 1 : 0;
}
