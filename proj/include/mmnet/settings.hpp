#pragma once

// Namespaced `key = value` settings shared by config files, command-line overrides and
// checkpoint metadata.

#include "mmnet/config.hpp"
#include "mmnet/metrics.hpp"
#include "mmnet/synthetic.hpp"

#include <iosfwd>

namespace mmnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalConfig {
  double alpha = 0.1;
  Normalizer normalizer = Normalizer::image;
  std::vector<double> alphas{0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08,
                             0.09, 0.1,  0.15, 0.2,  0.25, 0.3};
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  SyntheticSpec synth;
  Index threads = 1;

  void validate() const;
};

using Settings = std::vector<std::pair<std::string, std::string>>;

/// One `key = value` per line; `#` starts a comment. Errors name the offending line.
Settings parse_settings(std::istream& in, const std::string& origin = "config");
Settings parse_settings_file(const std::filesystem::path& path);
/// "key=value" as given on the command line.
std::pair<std::string, std::string> parse_assignment(const std::string& text);

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_settings(RunConfig& cfg, const Settings& settings);

/// Applies MMNET_SEED to train.seed when the variable is set.
void apply_environment(RunConfig& cfg);

/// Every model.* key, enough to rebuild the architecture.
Settings model_settings(const ModelConfig& m);
std::string format_settings(const Settings& s);

}  // namespace mmnet
