#include "mmnet/settings.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace mmnet {

namespace {

std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string_view::npos) return "";
  return std::string(s.substr(a, s.find_last_not_of(" \t\r\n") - a + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": not a number: '" + v + "'");
  return out;
}

std::string format_double(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

Index to_index(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": not an integer: '" + v + "'");
  return static_cast<Index>(out);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": not a seed: '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": not a boolean: '" + v + "'");
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& key, const std::string& v, F convert) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(convert(key, item));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string join(const auto& values) {
  std::ostringstream ss;
  ss.precision(17);
  bool first = true;
  for (const auto& v : values) {
    if (!first) ss << ',';
    ss << v;
    first = false;
  }
  return ss.str();
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto flag = [&](const std::string& name, bool AblationFlags::*member) {
      t["model." + name + ".enabled"] = [member](RunConfig& c, const std::string& k, const std::string& v) {
        c.model.flags.*member = to_bool(k, v);
      };
      t[name + ".enabled"] = t["model." + name + ".enabled"];
    };
    flag("lsa", &AblationFlags::lsa);
    flag("dense_fusion", &AblationFlags::dense_fusion);
    flag("cross_scale", &AblationFlags::cross_scale);
    flag("complementation", &AblationFlags::complementation);
    t["model.lsa.r"] = [](RunConfig& c, const auto& k, const auto& v) { c.model.lsa.r = to_index(k, v); };
    t["model.lsa.inner_channels"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.model.lsa.inner_channels = to_index(k, v);
    };
    t["model.feature_channels"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.model.feature_channels = to_index(k, v);
    };
    t["model.finest_scale"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.model.finest_scale = static_cast<int>(to_index(k, v));
    };
    t["model.init_gain"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.model.init_gain = to_double(k, v);
    };
    t["model.sem.dilations"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.model.sem.dilations = to_list<Index>(k, v, to_index);
    };
    t["model.sem.branch_channels"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.model.sem.branch_channels = to_index(k, v);
    };
    t["model.encoder.channels"] = [](RunConfig& c, const auto& k, const auto& v) {
      const auto list = to_list<Index>(k, v, to_index);
      if (list.size() != kNumGroups) throw ConfigError(k + ": expected 5 values");
      for (int g = 0; g < kNumGroups; ++g) c.model.encoder.groups[g].channels = list[g];
    };
    t["model.encoder.blocks"] = [](RunConfig& c, const auto& k, const auto& v) {
      const auto list = to_list<Index>(k, v, to_index);
      if (list.size() != 1 && list.size() != kNumGroups) throw ConfigError(k + ": expected 1 or 5 values");
      for (int g = 0; g < kNumGroups; ++g) c.model.encoder.groups[g].blocks = list[list.size() == 1 ? 0 : g];
    };
    t["model.input_h"] = [](RunConfig& c, const auto& k, const auto& v) { c.model.encoder.input_h = to_index(k, v); };
    t["model.input_w"] = [](RunConfig& c, const auto& k, const auto& v) { c.model.encoder.input_w = to_index(k, v); };

    t["train.lr"] = [](RunConfig& c, const auto& k, const auto& v) { c.train.lr = to_double(k, v); };
    t["train.momentum"] = [](RunConfig& c, const auto& k, const auto& v) { c.train.momentum = to_double(k, v); };
    t["train.weight_decay"] = [](RunConfig& c, const auto& k, const auto& v) { c.train.weight_decay = to_double(k, v); };
    t["train.lr_decay_factor"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.train.lr_decay_factor = to_double(k, v);
    };
    t["train.decay_interval"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.train.decay_interval = to_index(k, v);
    };
    t["train.batch_size"] = [](RunConfig& c, const auto& k, const auto& v) { c.train.batch_size = to_index(k, v); };
    t["train.max_iters"] = [](RunConfig& c, const auto& k, const auto& v) { c.train.max_iters = to_index(k, v); };
    t["train.loss_weights"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      std::map<int, double> w;
      for (const auto& item : split_list(v)) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError(k + ": expected scale:weight pairs");
        w[static_cast<int>(to_index(k, trim(item.substr(0, colon))))] = to_double(k, trim(item.substr(colon + 1)));
      }
      c.train.loss_weights = w;
    };
    t["train.supervised_scales"] = [](RunConfig& c, const auto& k, const auto& v) {
      std::vector<int> s;
      for (Index x : to_list<Index>(k, v, to_index)) s.push_back(static_cast<int>(x));
      c.train.supervised_scales = s;
    };
    t["train.checkpoint_interval"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.train.checkpoint_interval = to_index(k, v);
    };
    t["train.validation_pairs"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.train.validation_pairs = to_index(k, v);
    };
    t["train.selection_alpha"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.train.selection_alpha = to_double(k, v);
    };
    t["train.grad_clip"] = [](RunConfig& c, const auto& k, const auto& v) {
      c.train.grad_clip = to_double(k, v);
    };
    t["train.seed"] = [](RunConfig& c, const auto& k, const auto& v) { c.train.seed = to_u64(k, v); };
    t["train.threads"] = [](RunConfig& c, const auto& k, const auto& v) { c.threads = to_index(k, v); };

    t["eval.alpha"] = [](RunConfig& c, const auto& k, const auto& v) { c.eval.alpha = to_double(k, v); };
    t["eval.normalizer"] = [](RunConfig& c, const auto&, const auto& v) {
      try {
        c.eval.normalizer = parse_normalizer(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("eval.normalizer: ") + e.what());
      }
    };
    t["eval.alphas"] = [](RunConfig& c, const auto& k, const auto& v) { c.eval.alphas = to_list<double>(k, v, to_double); };

    t["synth.seed"] = [](RunConfig& c, const auto& k, const auto& v) { c.synth.seed = to_u64(k, v); };
    t["synth.family"] = [](RunConfig& c, const auto&, const auto& v) {
      try {
        c.synth.family = parse_warp_family(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("synth.family: ") + e.what());
      }
    };
    t["synth.magnitude"] = [](RunConfig& c, const auto& k, const auto& v) { c.synth.magnitude = to_double(k, v); };
    t["synth.keypoints"] = [](RunConfig& c, const auto& k, const auto& v) { c.synth.keypoints = to_index(k, v); };
    t["synth.pairs"] = [](RunConfig& c, const auto& k, const auto& v) { c.synth.pairs = to_index(k, v); };
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (threads < 1) throw ConfigError("train.threads must be >= 1");
  if (!(eval.alpha > 0.0)) throw ConfigError("eval.alpha must be positive");
  for (int s : train.supervised_scales) {
    if (s < model.finest_scale) {
      throw ConfigError("train.supervised_scales: scale " + std::to_string(s) +
                        " is finer than model.finest_scale");
    }
  }
}

Settings parse_settings(std::istream& in, const std::string& origin) {
  Settings out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value', got '" + trim(line) + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

Settings parse_settings_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_settings(in, path.string());
}

std::pair<std::string, std::string> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || trim(text.substr(0, eq)).empty()) {
    throw ConfigError("expected key=value, got '" + text + "'");
  }
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown setting '" + key + "'");
  it->second(cfg, key, value);
}

void apply_settings(RunConfig& cfg, const Settings& settings) {
  for (const auto& [k, v] : settings) apply_setting(cfg, k, v);
}

void apply_environment(RunConfig& cfg) {
  if (const char* seed = std::getenv("MMNET_SEED"); seed != nullptr && *seed != '\0') {
    apply_setting(cfg, "train.seed", seed);
  }
}

Settings model_settings(const ModelConfig& m) {
  std::vector<Index> channels, blocks;
  for (const auto& g : m.encoder.groups) {
    channels.push_back(g.channels);
    blocks.push_back(g.blocks);
  }
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"model.encoder.channels", join(channels)},
      {"model.encoder.blocks", join(blocks)},
      {"model.input_h", std::to_string(m.encoder.input_h)},
      {"model.input_w", std::to_string(m.encoder.input_w)},
      {"model.sem.dilations", join(m.sem.dilations)},
      {"model.sem.branch_channels", std::to_string(m.sem.branch_channels)},
      {"model.lsa.r", std::to_string(m.lsa.r)},
      {"model.lsa.inner_channels", std::to_string(m.lsa.inner_channels)},
      {"model.feature_channels", std::to_string(m.feature_channels)},
      {"model.finest_scale", std::to_string(m.finest_scale)},
      {"model.init_gain", format_double(m.init_gain)},
      {"model.lsa.enabled", b(m.flags.lsa)},
      {"model.dense_fusion.enabled", b(m.flags.dense_fusion)},
      {"model.cross_scale.enabled", b(m.flags.cross_scale)},
      {"model.complementation.enabled", b(m.flags.complementation)},
  };
}

std::string format_settings(const Settings& s) {
  std::string out;
  for (const auto& [k, v] : s) out += k + " = " + v + "\n";
  return out;
}

}  // namespace mmnet
