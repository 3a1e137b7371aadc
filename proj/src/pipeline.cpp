#include "mmnet/pipeline.hpp"

#include "mmnet/settings.hpp"

#include <chrono>
#include <exception>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace mmnet {

std::string log_header() {
  std::string h = "iter,lr,loss";
  for (int l = 2; l <= kCoarsestScale; ++l) h += ",loss_scale" + std::to_string(l);
  return h;
}

std::string format_log_row(const LogRow& row) {
  std::ostringstream ss;
  ss << std::setprecision(9) << row.iter << ',' << row.lr << ',' << row.loss;
  for (int l = 2; l <= kCoarsestScale; ++l) {
    ss << ',';
    if (auto it = row.per_scale.find(l); it != row.per_scale.end()) ss << it->second;
  }
  return ss.str();
}

BatchSampler::BatchSampler(std::size_t count, std::uint64_t seed) : count_(count), rng_(seed) {
  if (count == 0) throw std::invalid_argument("train: empty training set");
  order_.resize(count);
  reshuffle();
}

void BatchSampler::reshuffle() {
  for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
  for (std::size_t i = count_; i > 1; --i) {
    const auto k = static_cast<std::size_t>(uniform01(rng_) * static_cast<double>(i));
    std::swap(order_[i - 1], order_[std::min(k, i - 1)]);
  }
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(Index batch_size) {
  std::vector<std::size_t> out;
  for (Index b = 0; b < batch_size; ++b) {
    if (cursor_ == count_) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

namespace {

struct PairResult {
  ParameterSet<float> grads;
  double loss = 0.0;
  std::map<int, double> per_scale;
};

PairResult pair_gradients(const Model<float>& model, const Sample& s, const TrainConfig& cfg,
                          double scale) {
  PairResult r;
  r.grads = model.params;
  ad::Tape<float> tape;
  tape.set_release_intermediate_grads(true);
  Binder<float> bind(tape, r.grads, true);
  auto fwd = forward_pair(bind, model.config, tape.constant(s.source), tape.constant(s.target));
  auto loss = pair_loss(fwd.factors, s.ann, cfg.supervised_scales, cfg.loss_weights);
  r.loss = static_cast<double>(loss.total.value()[0]);
  r.per_scale = loss.per_scale;
  if (!std::isfinite(r.loss)) {
    std::ostringstream ss;
    ss << "non-finite loss on pair '" << s.pair_id << "' (per scale:";
    for (const auto& [l, v] : r.per_scale) ss << " s" << l << "=" << v;
    ss << ")";
    throw std::runtime_error(ss.str());
  }
  tape.backward(ad::scalar_mul(loss.total, static_cast<float>(scale)));
  return r;
}

}  // namespace

LogRow train_step(Model<float>& model, SgdState<float>& state,
                  const std::vector<const Sample*>& batch, const TrainConfig& cfg, Index threads) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::size_t n = batch.size();
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<PairResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t first, std::size_t step) {
    for (std::size_t b = first; b < n; b += step) {
      try {
        results[b] = pair_gradients(model, *batch[b], cfg, inv);
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<Index>(threads, 1, static_cast<Index>(n)));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
  }
  for (std::size_t b = 0; b < n; ++b) {
    if (errors[b]) {
      try {
        std::rethrow_exception(errors[b]);
      } catch (const std::exception& e) {
        throw std::runtime_error("iteration " + std::to_string(state.iteration + 1) + ": " + e.what());
      }
    }
  }

  LogRow row;
  row.iter = state.iteration + 1;
  row.lr = learning_rate(cfg, state.iteration);
  model.params.zero_grad();
  for (std::size_t b = 0; b < n; ++b) {
    for (auto& [name, p] : model.params) {
      const auto& g = results[b].grads.at(name).grad;
      if (g.has_data()) p.grad.array() += g.array();
    }
    row.loss += results[b].loss * inv;
    for (const auto& [l, v] : results[b].per_scale) row.per_scale[l] += v * inv;
  }
  sgd_step(model.params, state, cfg);
  return row;
}

Meta checkpoint_meta(const ModelConfig& cfg, int selected_scale, Index iterations) {
  Meta meta;
  for (const auto& [k, v] : model_settings(cfg)) meta[k] = v;
  meta["selected_scale"] = std::to_string(selected_scale);
  meta["iterations"] = std::to_string(iterations);
  return meta;
}

Model<float> load_model(const std::filesystem::path& dir, int* selected_scale) {
  Checkpoint ck = load_checkpoint(dir);
  RunConfig rc;
  for (const auto& [k, v] : ck.meta) {
    if (k.rfind("model.", 0) == 0) apply_setting(rc, k, v);
  }
  Model<float> model = init_model<float>(rc.model, 0);
  assign_parameters(model.params, ck.params);
  if (selected_scale != nullptr) {
    auto it = ck.meta.find("selected_scale");
    *selected_scale = it == ck.meta.end() ? rc.model.finest_scale : std::stoi(it->second);
  }
  return model;
}

TrainOutcome train_model(Model<float>& model, const std::vector<Sample>& data,
                         const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  for (int s : cfg.supervised_scales) {
    if (s < model.config.finest_scale) {
      throw std::invalid_argument("train: supervised scale " + std::to_string(s) + " is not decoded");
    }
  }
  TrainOutcome out;
  BatchSampler sampler(data.size(), cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  SgdState<float> state;
  std::ofstream log;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log.open(options.out_dir / "train_log.csv");
    if (!log) throw std::runtime_error("cannot write " + (options.out_dir / "train_log.csv").string());
    log << log_header() << '\n';
  }
  const auto start = std::chrono::steady_clock::now();
  for (Index it = 0; it < cfg.max_iters; ++it) {
    std::vector<const Sample*> batch;
    for (std::size_t k : sampler.next(cfg.batch_size)) batch.push_back(&data[k]);
    LogRow row = train_step(model, state, batch, cfg, options.threads);
    if (log.is_open()) log << format_log_row(row) << '\n';
    out.log.push_back(row);
    const double elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.ms_per_pair = elapsed / static_cast<double>((it + 1) * cfg.batch_size);
    if (options.progress != nullptr && options.progress_every > 0 &&
        (row.iter % options.progress_every == 0 || row.iter == cfg.max_iters)) {
      std::ostringstream line;
      line << "iter " << row.iter << "/" << cfg.max_iters << " lr " << row.lr << std::fixed
           << std::setprecision(4) << " loss " << row.loss << std::setprecision(1) << " ("
           << out.ms_per_pair << " ms/pair)";
      *options.progress << line.str() << std::endl;
    }
    if (!options.out_dir.empty() && cfg.checkpoint_interval > 0 &&
        row.iter % cfg.checkpoint_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06lld", static_cast<long long>(row.iter));
      save_checkpoint(options.out_dir / "checkpoints" / name, model.params,
                      checkpoint_meta(model.config, model.config.finest_scale, row.iter));
    }
  }
  if (log.is_open()) log.flush();

  std::vector<Sample> head;
  const std::vector<Sample>* validation = options.validation;
  if (validation == nullptr) {
    const auto n = std::min<std::size_t>(data.size(), static_cast<std::size_t>(std::max<Index>(cfg.validation_pairs, 1)));
    head.assign(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n));
    validation = &head;
  }
  out.selected_scale = select_scale(model, *validation, cfg.selection_alpha, Normalizer::image,
                                    &out.validation_pck);
  if (options.progress != nullptr) {
    *options.progress << "selected scale " << out.selected_scale << " (validation PCK@"
                      << cfg.selection_alpha << ":";
    for (const auto& [l, v] : out.validation_pck) *options.progress << " s" << l << "=" << v;
    *options.progress << ")" << std::endl;
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "model", model.params,
                    checkpoint_meta(model.config, out.selected_scale, cfg.max_iters));
  }
  return out;
}

std::map<int, std::vector<PairPrediction>> predict_all(Model<float>& model,
                                                       const std::vector<Sample>& samples) {
  std::map<int, std::vector<PairPrediction>> out;
  for (const auto& s : samples) {
    const auto preds = predict_all_scales(model, s.source, s.target, s.ann.source);
    for (const auto& [l, pts] : preds) {
      PairPrediction p;
      p.pair_id = s.pair_id;
      p.category = s.category;
      p.source = s.ann.source;
      p.predicted = pts;
      p.truth = s.ann.target;
      p.target_w = s.ann.target_w;
      p.target_h = s.ann.target_h;
      p.target_bbox = s.ann.target_bbox;
      out[l].push_back(std::move(p));
    }
  }
  return out;
}

std::vector<PairPrediction> predict(Model<float>& model, const std::vector<Sample>& samples,
                                    int scale) {
  auto all = predict_all(model, samples);
  auto it = all.find(scale);
  if (it == all.end()) throw std::invalid_argument("predict: scale " + std::to_string(scale) + " is not decoded");
  return std::move(it->second);
}

int select_scale(Model<float>& model, const std::vector<Sample>& validation, double alpha,
                 Normalizer normalizer, std::map<int, double>* pck_by_scale) {
  if (validation.empty()) throw std::invalid_argument("select_scale: empty validation set");
  std::map<int, double> scores;
  for (const auto& [l, preds] : predict_all(model, validation)) {
    scores[l] = pck(preds, alpha, normalizer).value();
  }
  if (pck_by_scale != nullptr) *pck_by_scale = scores;
  return select_best_scale(scores);
}

void write_predictions(std::ostream& out, const std::vector<PairPrediction>& preds) {
  out << "pair_id,kp_index,src_x,src_y,pred_x,pred_y,gt_x,gt_y\n" << std::setprecision(10);
  for (const auto& p : preds) {
    for (std::size_t k = 0; k < p.predicted.size(); ++k) {
      out << p.pair_id << ',' << k << ',' << p.source[k].x << ',' << p.source[k].y << ','
          << p.predicted[k].x << ',' << p.predicted[k].y << ',' << p.truth[k].x << ','
          << p.truth[k].y << '\n';
    }
  }
}

void write_predictions(const std::filesystem::path& path, const std::vector<PairPrediction>& preds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_predictions(out, preds);
}

std::vector<PairPrediction> read_predictions(const std::filesystem::path& path,
                                             const std::vector<Sample>* samples, double canvas_w,
                                             double canvas_h) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open predictions " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("pair_id,kp_index", 0) != 0) {
    throw std::runtime_error(path.string() + ": missing predictions header");
  }
  std::vector<PairPrediction> out;
  std::map<std::string, std::size_t> index;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": expected 8 columns");
    double v[6];
    try {
      for (int k = 0; k < 6; ++k) v[k] = std::stod(cells[static_cast<std::size_t>(k + 2)]);
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": malformed number");
    }
    auto [it, fresh] = index.try_emplace(cells[0], out.size());
    if (fresh) {
      PairPrediction p;
      p.pair_id = cells[0];
      p.category = "all";
      p.target_w = canvas_w;
      p.target_h = canvas_h;
      if (samples != nullptr) {
        for (const auto& s : *samples) {
          if (s.pair_id != p.pair_id) continue;
          p.category = s.category;
          p.target_w = s.ann.target_w;
          p.target_h = s.ann.target_h;
          p.target_bbox = s.ann.target_bbox;
        }
      }
      out.push_back(std::move(p));
    }
    auto& p = out[it->second];
    p.source.push_back({v[0], v[1]});
    p.predicted.push_back({v[2], v[3]});
    p.truth.push_back({v[4], v[5]});
  }
  return out;
}

}  // namespace mmnet
