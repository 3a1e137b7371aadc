#include "mmnet/cli.hpp"

#include "mmnet/pipeline.hpp"
#include "mmnet/selftest.hpp"
#include "mmnet/settings.hpp"
#include "mmnet/synthetic.hpp"
#include "mmnet/tps.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <ostream>

namespace mmnet {

namespace {

struct ConfigOptions {
  std::string file;
  std::vector<std::string> assignments;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value settings file")->check(CLI::ExistingFile);
    app->add_option("--set", assignments, "override a setting, key=value (repeatable)");
  }

  /// File settings, then MMNET_SEED, then --set, then dedicated flags applied by the caller.
  RunConfig resolve() const {
    RunConfig cfg;
    if (!file.empty()) apply_settings(cfg, parse_settings_file(file));
    apply_environment(cfg);
    for (const auto& a : assignments) {
      const auto [k, v] = parse_assignment(a);
      apply_setting(cfg, k, v);
    }
    return cfg;
  }
};

void report_diagnostics(const std::vector<std::string>& diagnostics, std::ostream& err) {
  for (const auto& d : diagnostics) err << "warning: " << d << '\n';
}

Dataset load_checked(const std::string& dir, const ModelConfig& model, std::ostream& err) {
  Dataset ds = load_dataset(dir, model.encoder.input_h, model.encoder.input_w);
  report_diagnostics(ds.diagnostics, err);
  if (ds.samples.empty()) throw std::runtime_error("dataset " + dir + " has no usable pairs");
  return ds;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-scale matching network for semantic correspondence"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic correspondence dataset");
  ConfigOptions synth_cfg;
  synth_cfg.attach(synth);
  std::string synth_out;
  std::optional<Index> synth_pairs;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--pairs", synth_pairs, "number of pairs (synth.pairs)");
  synth->add_option("--seed", synth_seed, "generator seed (synth.seed)");

  // train
  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  ConfigOptions train_cfg;
  train_cfg.attach(train);
  std::string train_data, train_out, train_val;
  std::optional<Index> train_iters, train_threads;
  std::optional<std::uint64_t> train_seed;
  train->add_option("--data", train_data, "training dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--val", train_val, "validation dataset used for scale selection")->check(CLI::ExistingDirectory);
  train->add_option("--iters", train_iters, "iterations (train.max_iters)");
  train->add_option("--seed", train_seed, "seed (train.seed)");
  train->add_option("--threads", train_threads, "worker threads per batch (train.threads)");

  // match
  auto* match = app.add_subcommand("match", "predict keypoint transfers for every pair");
  ConfigOptions match_cfg;
  match_cfg.attach(match);
  std::string match_ckpt, match_data, match_out;
  std::optional<int> match_scale;
  match->add_option("--checkpoint", match_ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  match->add_option("--data", match_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  match->add_option("--out", match_out, "predictions CSV")->required();
  match->add_option("--scale", match_scale, "decoder scale (default: the checkpoint's selected scale)");

  // eval
  auto* eval = app.add_subcommand("eval", "PCK of a checkpoint or of a predictions file");
  ConfigOptions eval_cfg;
  eval_cfg.attach(eval);
  std::string eval_ckpt, eval_preds, eval_data, eval_json;
  std::optional<double> eval_alpha;
  std::optional<std::string> eval_norm;
  std::optional<int> eval_scale;
  auto* ck_opt = eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->check(CLI::ExistingDirectory);
  auto* pr_opt = eval->add_option("--predictions", eval_preds, "predictions CSV")->check(CLI::ExistingFile);
  ck_opt->excludes(pr_opt);
  eval->add_option("--data", eval_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--json", eval_json, "write the PCK JSON here instead of stdout");
  eval->add_option("--alpha", eval_alpha, "PCK threshold (eval.alpha)");
  eval->add_option("--normalizer", eval_norm, "image|bbox (eval.normalizer)");
  eval->add_option("--scale", eval_scale, "decoder scale for --checkpoint");

  // warp
  auto* warp = app.add_subcommand("warp", "TPS-warp each source image onto its target frame");
  std::string warp_preds, warp_data, warp_out, warp_use = "pred";
  double warp_lambda = 0.0;
  warp->add_option("--predictions", warp_preds, "predictions CSV")->required()->check(CLI::ExistingFile);
  warp->add_option("--data", warp_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  warp->add_option("--out", warp_out, "output directory")->required();
  warp->add_option("--lambda", warp_lambda, "TPS regularisation")->check(CLI::NonNegativeNumber);
  warp->add_option("--use", warp_use, "target points: pred|gt")->check(CLI::IsMember({"pred", "gt"}));

  // curve
  auto* curve = app.add_subcommand("curve", "PCK-alpha curve of a predictions file");
  ConfigOptions curve_cfg;
  curve_cfg.attach(curve);
  std::string curve_preds, curve_data, curve_out;
  curve->add_option("--predictions", curve_preds, "predictions CSV")->required()->check(CLI::ExistingFile);
  curve->add_option("--data", curve_data, "dataset directory for categories and boxes")->check(CLI::ExistingDirectory);
  curve->add_option("--out", curve_out, "CSV output (default stdout)");

  auto* selftest = app.add_subcommand("selftest", "run the built-in oracle and gradient checks");

  std::vector<std::string> argv_store{"mmnet"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (*synth) {
      RunConfig cfg = synth_cfg.resolve();
      if (synth_pairs) cfg.synth.pairs = *synth_pairs;
      if (synth_seed) cfg.synth.seed = *synth_seed;
      cfg.synth.height = cfg.model.encoder.input_h;
      cfg.synth.width = cfg.model.encoder.input_w;
      write_dataset(synth_out, generate_synthetic(cfg.synth));
      out << "wrote " << cfg.synth.pairs << " pairs to " << synth_out << '\n';
      return 0;
    }
    if (*train) {
      RunConfig cfg = train_cfg.resolve();
      if (train_iters) cfg.train.max_iters = *train_iters;
      if (train_seed) cfg.train.seed = *train_seed;
      if (train_threads) cfg.threads = *train_threads;
      cfg.validate();
      const Dataset data = load_checked(train_data, cfg.model, err);
      std::optional<Dataset> val;
      if (!train_val.empty()) val = load_checked(train_val, cfg.model, err);
      Model<float> model = init_model<float>(cfg.model, cfg.train.seed);
      TrainOptions opts;
      opts.out_dir = train_out;
      opts.progress = &err;
      opts.threads = cfg.threads;
      opts.validation = val ? &val->samples : nullptr;
      const TrainOutcome r = train_model(model, data.samples, cfg.train, opts);
      out << "trained " << cfg.train.max_iters << " iterations, " << std::fixed
          << std::setprecision(1) << r.ms_per_pair << " ms/pair, selected scale "
          << r.selected_scale << ", model in " << (std::filesystem::path(train_out) / "model").string()
          << '\n';
      return 0;
    }
    if (*match) {
      int scale = 0;
      Model<float> model = load_model(match_ckpt, &scale);
      if (match_scale) scale = *match_scale;
      const Dataset data = load_checked(match_data, model.config, err);
      const auto preds = predict(model, data.samples, scale);
      write_predictions(match_out, preds);
      out << "wrote predictions for " << preds.size() << " pairs at scale " << scale << '\n';
      return 0;
    }
    if (*eval) {
      RunConfig cfg = eval_cfg.resolve();
      if (eval_alpha) cfg.eval.alpha = *eval_alpha;
      if (eval_norm) cfg.eval.normalizer = parse_normalizer(*eval_norm);
      if (eval_ckpt.empty() == eval_preds.empty()) {
        throw std::invalid_argument("eval needs exactly one of --checkpoint and --predictions");
      }
      std::vector<PairPrediction> preds;
      if (!eval_ckpt.empty()) {
        int scale = 0;
        Model<float> model = load_model(eval_ckpt, &scale);
        if (eval_scale) scale = *eval_scale;
        const Dataset data = load_checked(eval_data, model.config, err);
        preds = predict(model, data.samples, scale);
      } else {
        const Dataset data = load_checked(eval_data, cfg.model, err);
        preds = read_predictions(eval_preds, &data.samples,
                                 static_cast<double>(cfg.model.encoder.input_w),
                                 static_cast<double>(cfg.model.encoder.input_h));
      }
      const PCKResult r = pck(preds, cfg.eval.alpha, cfg.eval.normalizer);
      if (eval_json.empty()) {
        out << pck_json(r);
      } else {
        write_text(eval_json, pck_json(r));
        out << pck_table(r);
      }
      return 0;
    }
    if (*warp) {
      RunConfig cfg;
      const Dataset data = load_checked(warp_data, cfg.model, err);
      const auto preds = read_predictions(warp_preds, &data.samples);
      std::filesystem::create_directories(warp_out);
      std::size_t written = 0;
      for (const auto& p : preds) {
        auto it = std::find_if(data.samples.begin(), data.samples.end(),
                               [&](const Sample& s) { return s.pair_id == p.pair_id; });
        if (it == data.samples.end()) {
          err << "warning: pair '" << p.pair_id << "' is not in the dataset; skipped\n";
          continue;
        }
        try {
          // fit target -> source so the source can be pulled back onto the target grid
          const auto& anchors = warp_use == "gt" ? p.truth : p.predicted;
          const TpsWarp map = tps_fit(anchors, p.source, warp_lambda);
          const Image warped = warp_image(it->source, map, image_height(it->target), image_width(it->target));
          write_ppm(std::filesystem::path(warp_out) / (p.pair_id + "_warped.ppm"), warped);
          ++written;
        } catch (const TpsError& e) {
          err << "warning: pair '" << p.pair_id << "': " << e.what() << "; skipped\n";
        }
      }
      out << "wrote " << written << " warped images to " << warp_out << '\n';
      return 0;
    }
    if (*curve) {
      RunConfig cfg = curve_cfg.resolve();
      std::optional<Dataset> data;
      if (!curve_data.empty()) data = load_checked(curve_data, cfg.model, err);
      const auto preds = read_predictions(curve_preds, data ? &data->samples : nullptr,
                                          static_cast<double>(cfg.model.encoder.input_w),
                                          static_cast<double>(cfg.model.encoder.input_h));
      const std::string csv = curve_csv(pck_curve(preds, cfg.eval.alphas, cfg.eval.normalizer));
      if (curve_out.empty()) {
        out << csv;
      } else {
        write_text(curve_out, csv);
      }
      return 0;
    }
    if (*selftest) return run_selftest(out) ? 0 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace mmnet
