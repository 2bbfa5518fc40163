#pragma once

// Run configuration: a flat key=value record with typed fields, parsed from
// text files, JSON objects or single overrides.
//
//   # comment
//   strategy = CUAL
//   synthetic = 12,32,300,8,4
//   budget_fraction = 0.02

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cual/benchmark.hpp"

namespace cual {

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& message)
      : Error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  // dataset source: exactly one of these
  std::string dataset;
  std::string synthetic;  // "K,D,N,SEP[,LATENT]"
  double synthetic_noise = 0.1;

  // stream
  std::size_t classes_per_task = 2;
  std::size_t num_tasks = 4;
  std::string pretrain_classes;  // comma list; empty = automatic
  std::size_t ratio_old = 2;
  std::size_t ratio_new = 1;
  double holdout_fraction = 0.65;
  double eval_fraction = 0.2;
  double budget_fraction = 0.0125;

  // loop
  double alpha = 0.20;
  double k_std = 2.0;
  std::size_t max_iterations = 5;
  double eps_den = kDefaultEpsDen;
  double eps_amb = kDefaultEpsAmb;
  double variance_retained = kDefaultVarianceRetained;
  double holdout_rate = 0.001;
  std::size_t holdout_min = 5;

  // heads
  double short_lr = 1e-3;
  std::size_t short_epochs = 5;
  std::size_t short_batch = 16;
  double long_lr = 1e-3;
  std::size_t long_epochs = 20;
  std::size_t long_batch = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t hidden_size = kDefaultHiddenSize;

  // replay
  double loss_beta = 0.25;
  double loss_gamma = 0.25;
  double loss_theta = 0.5;
  std::size_t buffer_capacity = 2500;

  std::string strategy = "CUAL";
  std::string out = "out";
  std::uint64_t seed = 0;

  bool operator==(const RunConfig&) const = default;

  void validate() const;
  SyntheticSpec synthetic_spec() const;
  StreamSpec stream_spec() const;
  ExperimentConfig experiment_config() const;
  Strategy strategy_enum() const { return parse_strategy(strategy); }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("format_double failed");
  return std::string(buf, end);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || p != last || !std::isfinite(v))
    throw ConfigError(key, "expected a finite number, got '" + text + "'");
  return v;
}

template <class U>
U parse_unsigned(const std::string& key, const std::string& text) {
  U v = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || p != last) throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

template <class T>
Field make_field(std::string key, T RunConfig::*member) {
  Field f;
  f.key = key;
  f.get = [member](const RunConfig& c) { return nlohmann::json(c.*member); };
  f.set = [member, key](RunConfig& c, const std::string& text) {
    if constexpr (std::is_same_v<T, double>) {
      c.*member = parse_double(key, text);
    } else if constexpr (std::is_same_v<T, std::string>) {
      c.*member = text;
    } else {
      c.*member = parse_unsigned<T>(key, text);
    }
  };
  return f;
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      make_field("dataset", &RunConfig::dataset),
      make_field("synthetic", &RunConfig::synthetic),
      make_field("synthetic_noise", &RunConfig::synthetic_noise),
      make_field("classes_per_task", &RunConfig::classes_per_task),
      make_field("num_tasks", &RunConfig::num_tasks),
      make_field("pretrain_classes", &RunConfig::pretrain_classes),
      make_field("ratio_old", &RunConfig::ratio_old),
      make_field("ratio_new", &RunConfig::ratio_new),
      make_field("holdout_fraction", &RunConfig::holdout_fraction),
      make_field("eval_fraction", &RunConfig::eval_fraction),
      make_field("budget_fraction", &RunConfig::budget_fraction),
      make_field("alpha", &RunConfig::alpha),
      make_field("k_std", &RunConfig::k_std),
      make_field("max_iterations", &RunConfig::max_iterations),
      make_field("eps_den", &RunConfig::eps_den),
      make_field("eps_amb", &RunConfig::eps_amb),
      make_field("variance_retained", &RunConfig::variance_retained),
      make_field("holdout_rate", &RunConfig::holdout_rate),
      make_field("holdout_min", &RunConfig::holdout_min),
      make_field("short_lr", &RunConfig::short_lr),
      make_field("short_epochs", &RunConfig::short_epochs),
      make_field("short_batch", &RunConfig::short_batch),
      make_field("long_lr", &RunConfig::long_lr),
      make_field("long_epochs", &RunConfig::long_epochs),
      make_field("long_batch", &RunConfig::long_batch),
      make_field("adam_beta1", &RunConfig::adam_beta1),
      make_field("adam_beta2", &RunConfig::adam_beta2),
      make_field("adam_epsilon", &RunConfig::adam_epsilon),
      make_field("hidden_size", &RunConfig::hidden_size),
      make_field("loss_beta", &RunConfig::loss_beta),
      make_field("loss_gamma", &RunConfig::loss_gamma),
      make_field("loss_theta", &RunConfig::loss_theta),
      make_field("buffer_capacity", &RunConfig::buffer_capacity),
      make_field("strategy", &RunConfig::strategy),
      make_field("out", &RunConfig::out),
      make_field("seed", &RunConfig::seed),
  };
  return all;
}

inline const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError(key, "unknown key");
}

}  // namespace detail

/// Sets one key from its textual value. Does not validate cross-field rules.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  detail::field(key).set(cfg, value);
}

/// "key=value" override, as given on the command line.
inline void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("", "override '" + std::string(assignment) + "' lacks '='");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Flat key=value text; '#' starts a comment line. Keys absent keep their
/// current values.
inline void apply_config_text(RunConfig& cfg, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.find('=') == std::string::npos)
      throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
    apply_override(cfg, t);
  }
}

inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("", "JSON config must be an object");
  for (const auto& [key, value] : j.items()) {
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_number_float()) {
      text = detail::format_double(value.get<double>());
    } else if (value.is_number()) {
      text = value.dump();
    } else {
      throw ConfigError(key, "expected a string or number");
    }
    set_config_value(cfg, key, text);
  }
}

/// Defaults, then the file (JSON if it ends in .json), then validation.
inline RunConfig parse_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("", path.string() + ": " + e.what());
    }
    apply_config_json(base, j);
  } else {
    apply_config_text(base, ss.str());
  }
  return base;
}

inline nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  for (const auto& f : detail::fields()) j[f.key] = f.get(cfg);
  return j;
}

inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) {
    const nlohmann::json v = f.get(cfg);
    std::string text;
    if (v.is_string()) {
      text = v.get<std::string>();
    } else if (v.is_number_float()) {
      text = detail::format_double(v.get<double>());
    } else {
      text = v.dump();
    }
    out += f.key + " = " + text + "\n";
  }
  return out;
}

inline SyntheticSpec RunConfig::synthetic_spec() const {
  const auto parts = detail::split(synthetic, ',');
  if (parts.size() != 4 && parts.size() != 5) throw ConfigError("synthetic", "expected K,D,N,SEP[,LATENT]");
  SyntheticSpec s;
  s.num_classes = detail::parse_unsigned<std::size_t>("synthetic", parts[0]);
  s.dim = detail::parse_unsigned<std::size_t>("synthetic", parts[1]);
  s.samples_per_class = detail::parse_unsigned<std::size_t>("synthetic", parts[2]);
  s.separation = detail::parse_double("synthetic", parts[3]);
  if (parts.size() == 5) s.latent_dim = detail::parse_unsigned<std::size_t>("synthetic", parts[4]);
  s.noise_ratio = synthetic_noise;
  s.seed = derive_seed(seed, "synthetic");
  return s;
}

inline void RunConfig::validate() const {
  auto require = [](bool ok, const char* key, const char* rule) {
    if (!ok) throw ConfigError(key, rule);
  };
  require(dataset.empty() != synthetic.empty(), "dataset", "exactly one of dataset and synthetic must be set");
  if (!synthetic.empty()) {
    const SyntheticSpec s = synthetic_spec();
    require(s.num_classes >= 1 && s.dim >= 1 && s.samples_per_class >= 1, "synthetic", "K, D and N must be >= 1");
    require(s.separation > 0.0, "synthetic", "separation must be > 0");
    require(s.num_classes <= s.dim, "synthetic", "K must not exceed D");
    require(s.latent_dim <= s.dim, "synthetic", "latent dimension must not exceed D");
  }
  require(synthetic_noise >= 0.0, "synthetic_noise", "must be >= 0");
  require(classes_per_task >= 1, "classes_per_task", "must be >= 1");
  require(ratio_old >= 1, "ratio_old", "must be >= 1");
  require(ratio_new >= 1, "ratio_new", "must be >= 1");
  require(holdout_fraction > 0.0 && holdout_fraction < 1.0, "holdout_fraction", "must be in (0, 1)");
  require(eval_fraction > 0.0 && eval_fraction < 1.0, "eval_fraction", "must be in (0, 1)");
  require(budget_fraction >= 0.0 && budget_fraction < 1.0, "budget_fraction", "must be in [0, 1)");
  require(alpha > 0.0 && alpha <= 1.0, "alpha", "must be in (0, 1]");
  require(k_std >= 0.0, "k_std", "must be >= 0");
  require(max_iterations >= 1, "max_iterations", "must be >= 1");
  require(eps_den > 0.0, "eps_den", "must be > 0");
  require(eps_amb > 0.0, "eps_amb", "must be > 0");
  require(variance_retained > 0.0 && variance_retained <= 1.0, "variance_retained", "must be in (0, 1]");
  require(holdout_rate >= 0.0 && holdout_rate < 1.0, "holdout_rate", "must be in [0, 1)");
  require(short_lr > 0.0, "short_lr", "must be > 0");
  require(long_lr > 0.0, "long_lr", "must be > 0");
  require(short_batch >= 1, "short_batch", "must be >= 1");
  require(long_batch >= 1, "long_batch", "must be >= 1");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must be in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must be in [0, 1)");
  require(adam_epsilon > 0.0, "adam_epsilon", "must be > 0");
  require(hidden_size >= 1, "hidden_size", "must be >= 1");
  require(loss_beta >= 0.0, "loss_beta", "must be >= 0");
  require(loss_gamma >= 0.0, "loss_gamma", "must be >= 0");
  require(loss_theta >= 0.0, "loss_theta", "must be >= 0");
  require(loss_beta + loss_gamma + loss_theta > 0.0, "loss_theta", "loss weights must not all be zero");
  require(buffer_capacity >= 1, "buffer_capacity", "must be >= 1");
  require(!out.empty(), "out", "must not be empty");
  try {
    (void)parse_strategy(strategy);
  } catch (const Error& e) {
    throw ConfigError("strategy", e.what());
  }
  if (!pretrain_classes.empty())
    for (const auto& p : detail::split(pretrain_classes, ','))
      (void)detail::parse_unsigned<std::uint32_t>("pretrain_classes", p);
}

inline StreamSpec RunConfig::stream_spec() const {
  StreamSpec s;
  s.classes_per_task = classes_per_task;
  s.num_tasks = num_tasks;
  if (!pretrain_classes.empty())
    for (const auto& p : detail::split(pretrain_classes, ','))
      s.pretrain_classes.push_back(static_cast<ClassId>(detail::parse_unsigned<std::uint32_t>("pretrain_classes", p)));
  s.ratio_old = ratio_old;
  s.ratio_new = ratio_new;
  s.holdout_fraction = holdout_fraction;
  s.eval_fraction = eval_fraction;
  s.budget_fraction = budget_fraction;
  s.seed = derive_seed(seed, "stream");
  return s;
}

inline ExperimentConfig RunConfig::experiment_config() const {
  ExperimentConfig e;
  LoopConfig& l = e.loop;
  l.alpha = alpha;
  l.k_std = k_std;
  l.max_iterations = max_iterations;
  l.budget_fraction = budget_fraction;
  l.eps_den = eps_den;
  l.eps_amb = eps_amb;
  l.variance_retained = variance_retained;
  l.holdout_rate = holdout_rate;
  l.holdout_min = holdout_min;
  for (TrainConfig* t : {&l.short_train, &l.long_train}) {
    t->beta1 = adam_beta1;
    t->beta2 = adam_beta2;
    t->epsilon = adam_epsilon;
  }
  l.short_train.learning_rate = short_lr;
  l.short_train.epochs = short_epochs;
  l.short_train.batch_size = short_batch;
  l.long_train.learning_rate = long_lr;
  l.long_train.epochs = long_epochs;
  l.long_train.batch_size = long_batch;
  l.loss_weights = {loss_beta, loss_gamma, loss_theta};
  l.seed = derive_seed(seed, "loop");
  e.pretrain.hidden_size = hidden_size;
  e.pretrain.buffer_capacity = buffer_capacity;
  return e;
}

}  // namespace cual
