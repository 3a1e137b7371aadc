#pragma once

// Training loop, scale selection and dataset-level prediction for 32-bit models.

#include "mmnet/dataset.hpp"
#include "mmnet/io.hpp"
#include "mmnet/metrics.hpp"
#include "mmnet/model.hpp"

#include <iosfwd>

namespace mmnet {

struct LogRow {
  Index iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::map<int, double> per_scale;  // batch mean of the unweighted per-scale losses
};

std::string log_header();
std::string format_log_row(const LogRow& row);

/// Pair visiting order: each epoch is a fresh seeded permutation of the training set.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::uint64_t seed);
  std::vector<std::size_t> next(Index batch_size);

 private:
  void reshuffle();
  std::size_t count_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// One SGD update on a batch. Pairs are processed independently (optionally on `threads`
/// workers) and their gradients summed in batch order, so results do not depend on `threads`.
LogRow train_step(Model<float>& model, SgdState<float>& state,
                  const std::vector<const Sample*>& batch, const TrainConfig& cfg,
                  Index threads = 1);

struct TrainOptions {
  std::filesystem::path out_dir;     // empty: nothing written
  std::ostream* progress = nullptr;  // human-readable progress lines
  Index progress_every = 50;
  Index threads = 1;
  const std::vector<Sample>* validation = nullptr;  // defaults to the head of the training set
};

struct TrainOutcome {
  std::vector<LogRow> log;
  int selected_scale = 2;
  std::map<int, double> validation_pck;
  double ms_per_pair = 0.0;
};

/// Trains, selects the evaluation scale and (with an output directory) writes
/// train_log.csv, periodic checkpoints under checkpoints/ and the final model under model/.
TrainOutcome train_model(Model<float>& model, const std::vector<Sample>& data,
                         const TrainConfig& cfg, const TrainOptions& options = {});

/// Argmax predictions for every pair, keyed by scale.
std::map<int, std::vector<PairPrediction>> predict_all(Model<float>& model,
                                                       const std::vector<Sample>& samples);
std::vector<PairPrediction> predict(Model<float>& model, const std::vector<Sample>& samples,
                                    int scale);

/// PCK@alpha per decoder scale and the best one (ties toward the finer scale).
int select_scale(Model<float>& model, const std::vector<Sample>& validation, double alpha,
                 Normalizer normalizer, std::map<int, double>* pck_by_scale = nullptr);

Meta checkpoint_meta(const ModelConfig& cfg, int selected_scale, Index iterations);
/// Rebuilds a model (architecture from meta.txt) and its selected scale.
Model<float> load_model(const std::filesystem::path& dir, int* selected_scale = nullptr);

void write_predictions(std::ostream& out, const std::vector<PairPrediction>& preds);
void write_predictions(const std::filesystem::path& path, const std::vector<PairPrediction>& preds);
/// Reads predictions CSV rows grouped by pair (file order). Category and geometry come from
/// `samples` when a pair is listed there, otherwise category "all" and the given canvas.
std::vector<PairPrediction> read_predictions(const std::filesystem::path& path,
                                             const std::vector<Sample>* samples,
                                             double canvas_w = 320.0, double canvas_h = 224.0);

}  // namespace mmnet
