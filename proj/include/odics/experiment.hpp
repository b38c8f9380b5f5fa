#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <atomic>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "odics/domains.hpp"
#include "odics/error.hpp"
#include "odics/label_space.hpp"
#include "odics/metrics.hpp"
#include "odics/model.hpp"
#include "odics/strategies.hpp"
#include "odics/stream.hpp"

namespace odics {

inline constexpr const char* kArtifactVersion = "1.0.0";

struct ExperimentConfig {
  std::string name = "experiment";
  StreamConfig stream;
  std::size_t canvas = 32;
  std::size_t hidden_channels = 16;
  std::size_t num_layers = 3;
  std::size_t kernel_size = 3;

  std::string strategy = "nt";  // nt | ewc | mas | lwf | er
  std::optional<double> lambda;  // default per strategy
  std::size_t buffer = 800;
  double temperature = 2.0;
  std::size_t window = 25;

  std::string simulator = "none";  // none | SimA | SimB
  double ratio = 1.0;
  std::string label_map_path;  // optional override of the built-in table

  bool pretrain = false;
  std::string pretrain_simulator = "SimB";
  std::size_t pretrain_images = 0;  // 0: total real train images
  std::size_t pretrain_epochs = 30;

  bool supervised = false;
  std::size_t supervised_epochs = 30;

  bool budget_normalized = false;

  double lr = 0.05;
  std::string precision = "double";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  double effective_lambda() const {
    if (lambda) return *lambda;
    if (strategy == "mas") return 1.0;
    if (strategy == "ewc") return 10.0;
    if (strategy == "lwf") return 50.0;
    return 0.0;
  }

  bool uses_sim() const { return simulator != "none"; }

  ModelConfig model(std::uint64_t seed) const {
    ModelConfig m;
    m.in_channels = 3;
    m.hidden_channels = hidden_channels;
    m.num_layers = num_layers;
    m.kernel_size = kernel_size;
    m.num_classes = target_label_space().size();
    m.init_seed = seed;
    return m;
  }

  void validate() const {
    stream.validate();
    require(strategy == "nt" || strategy == "ewc" || strategy == "mas" || strategy == "lwf" || strategy == "er",
            "unknown strategy '" + strategy + "'");
    require(simulator == "none" || simulator == "SimA" || simulator == "SimB",
            "unknown simulator '" + simulator + "'");
    require(ratio > 0.0, "simcs.ratio must be > 0");
    require(precision == "double" || precision == "float", "train.precision must be double or float");
    require(!seeds.empty(), "seed list is empty");
    require(lr >= 0.0, "train.lr must be >= 0");
    require(temperature > 0.0, "strategy.temperature must be > 0");
    require(canvas >= 4, "data.canvas must be >= 4");
    require(!budget_normalized || uses_sim(), "compare.budget_normalized requires a simulator");
    require(pretrain_simulator == "SimA" || pretrain_simulator == "SimB", "pretrain.simulator must be SimA or SimB");
    model(0).validate();
    const auto real = real_domain_presets(canvas);
    for (const auto& d : stream.domain_order) find_domain(real, d);
  }
};

// ---------------------------------------------------------------------------
// Flat key-value config

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.emplace_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto r = std::stoull(v, &pos);
    if (pos != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = 0.0;
    if (const auto slash = v.find('/'); slash != std::string::npos) {
      r = std::stod(v.substr(0, slash)) / std::stod(v.substr(slash + 1));
      pos = v.size();
    } else {
      r = std::stod(v, &pos);
    }
    if (pos != v.size() || !std::isfinite(r)) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class V, class F>
std::string join(const std::vector<V>& xs, F&& f, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? std::string(1, sep) : "") + f(xs[i]);
  return out;
}

struct KeySpec {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::map<std::string, KeySpec>& key_table() {
  using C = ExperimentConfig;
  static const std::map<std::string, KeySpec> table = {
      {"name", {[](C& c, const std::string& v) { c.name = v; }, [](const C& c) { return c.name; }}},
      {"stream.mode",
       {[](C& c, const std::string& v) {
          if (v == "sequential") c.stream.mode = StreamMode::kSequential;
          else if (v == "mixed") c.stream.mode = StreamMode::kMixed;
          else throw ConfigError("stream.mode must be sequential or mixed");
        },
        [](const C& c) { return to_string(c.stream.mode); }}},
      {"stream.domain_order",
       {[](C& c, const std::string& v) { c.stream.domain_order = split(v, ','); },
        [](const C& c) { return join(c.stream.domain_order, [](const std::string& s) { return s; }); }}},
      {"stream.train_size",
       {[](C& c, const std::string& v) {
          c.stream.train_sizes.clear();
          for (const auto& p : split(v, ',')) c.stream.train_sizes.push_back(to_u64("stream.train_size", p));
        },
        [](const C& c) { return join(c.stream.train_sizes, [](std::size_t n) { return std::to_string(n); }); }}},
      {"stream.test_size",
       {[](C& c, const std::string& v) { c.stream.test_size = to_u64("stream.test_size", v); },
        [](const C& c) { return std::to_string(c.stream.test_size); }}},
      {"stream.batch_size",
       {[](C& c, const std::string& v) { c.stream.batch_size = to_u64("stream.batch_size", v); },
        [](const C& c) { return std::to_string(c.stream.batch_size); }}},
      {"stream.budget",
       {[](C& c, const std::string& v) { c.stream.budget = to_u64("stream.budget", v); },
        [](const C& c) { return std::to_string(c.stream.budget); }}},
      {"stream.mixed_quotas",
       {[](C& c, const std::string& v) {
          c.stream.mixed_quotas.clear();
          if (v.empty()) return;
          for (const auto& p : split(v, ',')) c.stream.mixed_quotas.push_back(to_double("stream.mixed_quotas", p));
        },
        [](const C& c) { return join(c.stream.mixed_quotas, fmt_double); }}},
      {"data.canvas",
       {[](C& c, const std::string& v) { c.canvas = to_u64("data.canvas", v); },
        [](const C& c) { return std::to_string(c.canvas); }}},
      {"model.hidden",
       {[](C& c, const std::string& v) { c.hidden_channels = to_u64("model.hidden", v); },
        [](const C& c) { return std::to_string(c.hidden_channels); }}},
      {"model.layers",
       {[](C& c, const std::string& v) { c.num_layers = to_u64("model.layers", v); },
        [](const C& c) { return std::to_string(c.num_layers); }}},
      {"model.kernel",
       {[](C& c, const std::string& v) { c.kernel_size = to_u64("model.kernel", v); },
        [](const C& c) { return std::to_string(c.kernel_size); }}},
      {"strategy.name", {[](C& c, const std::string& v) { c.strategy = v; }, [](const C& c) { return c.strategy; }}},
      {"strategy.lambda",
       {[](C& c, const std::string& v) { c.lambda = to_double("strategy.lambda", v); },
        [](const C& c) { return fmt_double(c.effective_lambda()); }}},
      {"strategy.buffer",
       {[](C& c, const std::string& v) { c.buffer = to_u64("strategy.buffer", v); },
        [](const C& c) { return std::to_string(c.buffer); }}},
      {"strategy.temperature",
       {[](C& c, const std::string& v) { c.temperature = to_double("strategy.temperature", v); },
        [](const C& c) { return fmt_double(c.temperature); }}},
      {"strategy.window",
       {[](C& c, const std::string& v) { c.window = to_u64("strategy.window", v); },
        [](const C& c) { return std::to_string(c.window); }}},
      {"simcs.simulator",
       {[](C& c, const std::string& v) { c.simulator = v; }, [](const C& c) { return c.simulator; }}},
      {"simcs.ratio",
       {[](C& c, const std::string& v) { c.ratio = to_double("simcs.ratio", v); },
        [](const C& c) { return fmt_double(c.ratio); }}},
      {"simcs.label_map",
       {[](C& c, const std::string& v) { c.label_map_path = v; }, [](const C& c) { return c.label_map_path; }}},
      {"pretrain.enabled",
       {[](C& c, const std::string& v) { c.pretrain = to_bool("pretrain.enabled", v); },
        [](const C& c) { return std::string(c.pretrain ? "true" : "false"); }}},
      {"pretrain.simulator",
       {[](C& c, const std::string& v) { c.pretrain_simulator = v; }, [](const C& c) { return c.pretrain_simulator; }}},
      {"pretrain.images",
       {[](C& c, const std::string& v) { c.pretrain_images = to_u64("pretrain.images", v); },
        [](const C& c) { return std::to_string(c.pretrain_images); }}},
      {"pretrain.epochs",
       {[](C& c, const std::string& v) { c.pretrain_epochs = to_u64("pretrain.epochs", v); },
        [](const C& c) { return std::to_string(c.pretrain_epochs); }}},
      {"supervised.enabled",
       {[](C& c, const std::string& v) { c.supervised = to_bool("supervised.enabled", v); },
        [](const C& c) { return std::string(c.supervised ? "true" : "false"); }}},
      {"supervised.epochs",
       {[](C& c, const std::string& v) { c.supervised_epochs = to_u64("supervised.epochs", v); },
        [](const C& c) { return std::to_string(c.supervised_epochs); }}},
      {"compare.budget_normalized",
       {[](C& c, const std::string& v) { c.budget_normalized = to_bool("compare.budget_normalized", v); },
        [](const C& c) { return std::string(c.budget_normalized ? "true" : "false"); }}},
      {"train.lr",
       {[](C& c, const std::string& v) { c.lr = to_double("train.lr", v); },
        [](const C& c) { return fmt_double(c.lr); }}},
      {"train.precision",
       {[](C& c, const std::string& v) { c.precision = v; }, [](const C& c) { return c.precision; }}},
      {"seeds",
       {[](C& c, const std::string& v) {
          c.seeds.clear();
          for (const auto& p : split(v, ',')) c.seeds.push_back(to_u64("seeds", p));
        },
        [](const C& c) { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); }}},
  };
  return table;
}

}  // namespace detail

inline void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::key_table();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown key '" + key + "'");
  it->second.set(cfg, value);
}

/// Grid axes: key -> alternative values, from "grid.<key> = a | b | c" lines.
using GridAxes = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct ParsedConfig {
  ExperimentConfig config;
  GridAxes grid;
};

/// "key = value" lines, '#' comments. Unknown keys are errors.
inline ParsedConfig parse_config_text(const std::string& text, ExperimentConfig base = {}) {
  ParsedConfig out{std::move(base), {}};
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw.substr(0, raw.find('#'));
    line = std::string(detail::trim(line));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(detail::trim(std::string_view(line).substr(0, eq)));
    const std::string value(detail::trim(std::string_view(line).substr(eq + 1)));
    if (key.rfind("grid.", 0) == 0) {
      const std::string sub = key.substr(5);
      if (!detail::key_table().count(sub)) throw ConfigError("line " + std::to_string(line_no) + ": unknown grid key '" + sub + "'");
      out.grid.emplace_back(sub, detail::split(value, '|'));
      continue;
    }
    try {
      set_config_key(out.config, key, value);
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      if (msg.rfind("config error: ", 0) == 0) msg = msg.substr(14);
      throw ConfigError("line " + std::to_string(line_no) + ": " + msg);
    }
  }
  return out;
}

/// Canonical echo: every key with its effective value, sorted.
inline std::string config_echo(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, spec] : detail::key_table()) out += key + " = " + spec.get(cfg) + "\n";
  return out;
}

inline std::map<std::string, std::string> config_map(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& [key, spec] : detail::key_table()) out[key] = spec.get(cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Presets

inline const std::map<std::string, std::string>& preset_texts() {
  static const std::map<std::string, std::string> presets = {
      {"nt", "name = nt\nstrategy.name = nt\n"},
      {"ewc", "name = ewc\nstrategy.name = ewc\n"},
      {"mas", "name = mas\nstrategy.name = mas\n"},
      {"lwf", "name = lwf\nstrategy.name = lwf\n"},
      {"er", "name = er\nstrategy.name = er\nstrategy.buffer = 800\n"},
      {"nt-simA", "name = nt-simA\nstrategy.name = nt\nsimcs.simulator = SimA\n"},
      {"nt-simB", "name = nt-simB\nstrategy.name = nt\nsimcs.simulator = SimB\n"},
      {"upper-bound", "name = upper-bound\nstrategy.name = nt\nsupervised.enabled = true\n"},
      {"methods",
       "name = methods\ngrid.strategy.name = nt | ewc | mas | lwf | er\ngrid.simcs.simulator = none | SimA | SimB\n"},
      {"ratio-sweep",
       "name = ratio-sweep\nstrategy.name = nt\ngrid.simcs.simulator = SimA | SimB\n"
       "grid.simcs.ratio = 1/4 | 1/2 | 1 | 2 | 4 | 5 | 8 | 10\n"},
      {"budget-sweep",
       "name = budget-sweep\nstrategy.name = nt\ngrid.simcs.simulator = none | SimA | SimB\n"
       "grid.stream.budget = 1 | 2 | 3 | 4 | 6 | 8 | 10\n"},
      {"budget-normalized",
       "name = budget-normalized\nstrategy.name = nt\nsimcs.simulator = SimB\nsimcs.ratio = 1\n"
       "compare.budget_normalized = true\n"},
      {"pretrain",
       "name = pretrain\nstrategy.name = nt\ngrid.pretrain.enabled = false | true\n"
       "grid.simcs.simulator = none | SimB\n"},
      {"buffer-size",
       "name = buffer-size\nstrategy.name = er\ngrid.strategy.buffer = 200 | 800 | 1000 | 1200\n"
       "grid.simcs.simulator = none | SimB\n"},
      {"lambda-sweep",
       "name = lambda-sweep\ngrid.strategy.name = ewc | mas | lwf\ngrid.strategy.lambda = 1 | 10 | 50\n"},
      {"domain-orders",
       "name = domain-orders\nstrategy.name = nt\n"
       "grid.stream.domain_order = CS,IDD,BDD,ACDC | ACDC,CS,IDD,BDD | BDD,ACDC,CS,IDD | IDD,BDD,ACDC,CS\n"
       "grid.simcs.simulator = none | SimB\n"},
      {"data-incremental",
       "name = data-incremental\nstream.mode = mixed\nstrategy.name = nt\ngrid.simcs.simulator = none | SimB\n"},
      {"budget-n1",
       "name = budget-n1\nstream.budget = 1\ngrid.strategy.name = nt | ewc | mas | lwf | er\n"
       "grid.simcs.simulator = none | SimB\n"},
  };
  return presets;
}

inline ParsedConfig load_preset(const std::string& name) {
  const auto& p = preset_texts();
  const auto it = p.find(name);
  if (it == p.end()) throw ConfigError("unknown preset '" + name + "'");
  return parse_config_text(it->second);
}

inline ParsedConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Cartesian expansion of the grid axes; cell names append key=value tags.
inline std::vector<ExperimentConfig> expand_grid(const ParsedConfig& parsed) {
  std::vector<ExperimentConfig> cells{parsed.config};
  for (const auto& [key, values] : parsed.grid) {
    std::vector<ExperimentConfig> next;
    for (const auto& base : cells)
      for (const auto& v : values) {
        auto c = base;
        set_config_key(c, key, v);
        std::string tag = key.substr(key.find('.') == std::string::npos ? 0 : key.find('.') + 1) + "=" + v;
        for (auto& ch : tag)
          if (ch == '/' || ch == ',' || ch == ' ') ch = '_';
        c.name += "__" + tag;
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Running

struct SeedResult {
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::size_t budget = 0;
  std::size_t total_updates = 0;
  std::size_t revealed_samples = 0;
  std::size_t boundary_flags = 0;
  std::size_t max_retained_past_batches = 0;
  std::vector<EvalPoint> eval_points;
  std::optional<TransferMatrix> transfer;
  std::vector<double> final_miou;  // per domain, stream order
  double mean_miou = 0.0;
  std::optional<std::vector<double>> upper_bound_miou;
  std::optional<std::vector<double>> normalized_baseline_miou;
  std::size_t normalized_baseline_budget = 0;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<std::string> domains;
  std::vector<SeedResult> seeds;

  std::vector<double> mean_final_miou() const {
    std::vector<double> m(domains.size(), 0.0);
    for (const auto& s : seeds)
      for (std::size_t d = 0; d < domains.size(); ++d) m[d] += s.final_miou[d] / static_cast<double>(seeds.size());
    return m;
  }
  double mean_miou() const {
    double m = 0.0;
    for (const auto& s : seeds) m += s.mean_miou / static_cast<double>(seeds.size());
    return m;
  }
  /// Seed-mean transfer matrix (sequential mode).
  std::optional<TransferMatrix> mean_transfer() const {
    if (seeds.empty() || !seeds.front().transfer) return std::nullopt;
    const std::size_t n = domains.size();
    std::vector<std::vector<double>> rows(n, std::vector<double>(n, 0.0));
    for (const auto& s : seeds)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) rows[i][j] += s.transfer->at(i, j) / static_cast<double>(seeds.size());
    return TransferMatrix::from_rows(rows);
  }
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline LabelMap resolve_label_map(const ExperimentConfig& cfg, const DomainSpec& sim) {
  if (cfg.label_map_path.empty()) return builtin_map_for(sim.name);
  std::ifstream in(cfg.label_map_path);
  if (!in) throw ConfigError("cannot read label map " + cfg.label_map_path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_label_map(ss.str(), sim.label_space, target_label_space());
}

inline SimCSConfig make_simcs_config(const ExperimentConfig& cfg, const std::string& simulator, std::uint64_t seed) {
  const auto sims = sim_domain_presets(cfg.canvas);
  SimCSConfig s;
  s.sim_domain = find_domain(sims, simulator);
  s.label_map = resolve_label_map(cfg, s.sim_domain);
  s.ratio = cfg.ratio;
  s.sim_seed = hash_combine(seed, hash_name("simcs"));
  return s;
}

template <class T>
std::unique_ptr<LearnerBase<T>> make_base_learner(const ExperimentConfig& cfg, const ModelConfig& model,
                                                  ParamSet<T> init, std::uint64_t seed) {
  const double lambda = cfg.effective_lambda();
  if (cfg.strategy == "nt") return std::make_unique<NaiveLearner<T>>(model, std::move(init), cfg.lr);
  if (cfg.strategy == "ewc") return std::make_unique<EWCLearner<T>>(model, std::move(init), cfg.lr, lambda, cfg.window);
  if (cfg.strategy == "mas") return std::make_unique<MASLearner<T>>(model, std::move(init), cfg.lr, lambda, cfg.window);
  if (cfg.strategy == "lwf") return std::make_unique<LwFLearner<T>>(model, std::move(init), cfg.lr, lambda, cfg.temperature);
  if (cfg.strategy == "er") return std::make_unique<ReplayLearner<T>>(model, std::move(init), cfg.lr, cfg.buffer, seed);
  throw ConfigError("unknown strategy '" + cfg.strategy + "'");
}

template <class T>
std::unique_ptr<Learner<T>> make_learner(const ExperimentConfig& cfg, const ModelConfig& model, ParamSet<T> init,
                                         std::uint64_t seed) {
  auto base = make_base_learner<T>(cfg, model, std::move(init), seed);
  if (!cfg.uses_sim()) return base;
  return simcs_wrap<T>(std::move(base), make_simcs_config(cfg, cfg.simulator, seed));
}

inline StreamConfig seeded_stream(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto s = cfg.stream;
  s.shuffle_seed = seed;
  return s;
}

/// Explicit count, or the number of real training images in the stream.
inline std::size_t pretrain_image_count(const ExperimentConfig& cfg) {
  if (cfg.pretrain_images > 0) return cfg.pretrain_images;
  std::size_t n = 0;
  for (std::size_t d = 0; d < cfg.stream.domain_order.size(); ++d) n += cfg.stream.train_size(d);
  return n;
}

template <class T>
SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto domains = real_domain_presets(cfg.canvas);
  const Stream stream(seeded_stream(cfg, seed), domains);
  const auto tests = build_test_sets<T>(stream);
  const auto model = cfg.model(seed);

  auto init = init_model<T>(model);
  if (cfg.pretrain) {
    pretrain_on_sim<T>(init, make_simcs_config(cfg, cfg.pretrain_simulator, seed), pretrain_image_count(cfg),
                       cfg.pretrain_epochs, cfg.lr, cfg.stream.batch_size, seed);
  }

  auto learner = make_learner<T>(cfg, model, init, seed);
  const auto res = run(stream, *learner, tests);

  SeedResult out;
  out.seed = seed;
  out.steps = res.steps;
  out.budget = res.budget;
  out.total_updates = res.total_updates;
  out.revealed_samples = res.revealed_samples;
  out.boundary_flags = res.boundary_flags_delivered;
  out.max_retained_past_batches = res.max_retained_past_batches;
  out.eval_points = res.eval_points;
  out.transfer = res.transfer;
  out.final_miou = res.eval_points.back().miou;
  out.mean_miou = mean_of(out.final_miou);

  if (cfg.supervised) {
    const auto params = supervised_upper_bound<T>(stream, model, cfg.supervised_epochs, cfg.lr, seed);
    const auto snap = snapshot(params, model);
    std::vector<double> m;
    for (const auto& ts : tests) m.push_back(evaluate_domain(snap, ts));
    out.upper_bound_miou = m;
  }
  if (cfg.budget_normalized) {
    const auto pair = budget_normalized_pair(cfg.stream.budget, cfg.ratio);
    auto base_cfg = cfg;
    base_cfg.simulator = "none";
    base_cfg.stream.budget = pair.baseline_budget;
    const Stream base_stream(seeded_stream(base_cfg, seed), domains);
    auto base_learner = make_learner<T>(base_cfg, model, init_model<T>(model), seed);
    const auto base_res = run(base_stream, *base_learner, tests);
    out.normalized_baseline_miou = base_res.eval_points.back().miou;
    out.normalized_baseline_budget = pair.baseline_budget;
  }
  return out;
}

template <class T>
ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult r;
  r.config = cfg;
  r.domains = cfg.stream.domain_order;
  for (auto seed : cfg.seeds) r.seeds.push_back(run_seed<T>(cfg, seed));
  return r;
}

inline ExperimentResult run_experiment_any(const ExperimentConfig& cfg) {
  return cfg.precision == "float" ? run_experiment<float>(cfg) : run_experiment<double>(cfg);
}

// ---------------------------------------------------------------------------
// Records

inline nlohmann::ordered_json to_json(const ExperimentResult& r) {
  using J = nlohmann::ordered_json;
  J j;
  j["artifact"] = "odics";
  j["version"] = kArtifactVersion;
  J cfg = J::object();
  for (const auto& [k, v] : config_map(r.config)) cfg[k] = v;
  j["config"] = cfg;
  j["domains"] = r.domains;

  J runs = J::array();
  std::size_t total_updates = 0, expected_updates = 0;
  for (const auto& s : r.seeds) {
    J run;
    run["seed"] = s.seed;
    run["steps"] = s.steps;
    run["budget"] = s.budget;
    run["updates"] = s.total_updates;
    run["revealed_samples"] = s.revealed_samples;
    run["boundary_flags"] = s.boundary_flags;
    run["max_retained_past_batches"] = s.max_retained_past_batches;
    J evals = J::array();
    for (const auto& ep : s.eval_points) {
      J e;
      e["step"] = ep.step;
      if (ep.after_domain) e["after_domain"] = r.domains[*ep.after_domain];
      e["miou"] = ep.miou;
      evals.push_back(e);
    }
    run["eval_points"] = evals;
    if (s.transfer) {
      run["transfer_matrix"] = s.transfer->rows();
      const auto st = transfer_stats(*s.transfer);
      J ts;
      ts["backward"] = st.backward;
      J fwd = J::array();
      for (const auto& f : st.forward) fwd.push_back(f ? J(*f) : J(nullptr));
      ts["forward"] = fwd;
      ts["mean_backward"] = st.mean_backward;
      ts["mean_forward"] = st.mean_forward;
      run["transfer_stats"] = ts;
    }
    J fm = J::object();
    for (std::size_t d = 0; d < r.domains.size(); ++d) fm[r.domains[d]] = s.final_miou[d];
    run["final_miou"] = fm;
    run["mean_miou"] = s.mean_miou;
    if (s.upper_bound_miou) run["upper_bound_miou"] = *s.upper_bound_miou;
    if (s.normalized_baseline_miou) {
      run["normalized_baseline_budget"] = s.normalized_baseline_budget;
      run["normalized_baseline_miou"] = *s.normalized_baseline_miou;
    }
    total_updates += s.total_updates;
    expected_updates += s.steps * s.budget;
    runs.push_back(run);
  }
  j["runs"] = runs;

  J summary;
  const auto mean = r.mean_final_miou();
  J fm = J::object(), fs = J::object();
  std::vector<double> per_seed_mean;
  for (const auto& s : r.seeds) per_seed_mean.push_back(s.mean_miou);
  for (std::size_t d = 0; d < r.domains.size(); ++d) {
    double var = 0.0;
    for (const auto& s : r.seeds) var += (s.final_miou[d] - mean[d]) * (s.final_miou[d] - mean[d]);
    fm[r.domains[d]] = mean[d];
    fs[r.domains[d]] = std::sqrt(var / static_cast<double>(r.seeds.size()));
  }
  double var = 0.0;
  for (double m : per_seed_mean) var += (m - r.mean_miou()) * (m - r.mean_miou());
  summary["final_miou_mean"] = fm;
  summary["final_miou_std"] = fs;
  summary["mean_miou"] = r.mean_miou();
  summary["mean_miou_std"] = std::sqrt(var / static_cast<double>(per_seed_mean.size()));
  if (auto mt = r.mean_transfer()) summary["transfer_matrix_mean"] = mt->rows();
  j["summary"] = summary;
  j["update_audit"] = {{"total_updates", total_updates},
                       {"expected_updates", expected_updates},
                       {"consistent", total_updates == expected_updates}};
  return j;
}

inline std::string summary_csv(const ExperimentResult& r) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "name,seed";
  for (const auto& d : r.domains) os << ',' << d;
  os << ",mean\n";
  for (const auto& s : r.seeds) {
    os << r.config.name << ',' << s.seed;
    for (double v : s.final_miou) os << ',' << v * 100.0;
    os << ',' << s.mean_miou * 100.0 << '\n';
  }
  os << r.config.name << ",mean";
  for (double v : r.mean_final_miou()) os << ',' << v * 100.0;
  os << ',' << r.mean_miou() * 100.0 << '\n';
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << s;
}

/// record.json, summary.csv, config.txt and timing.json in out_dir.
/// Wall-clock lives in timing.json so record.json stays reproducible.
inline void write_run_outputs(const std::filesystem::path& out_dir, const ExperimentResult& r, double seconds) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "record.json", to_json(r).dump(2) + "\n");
  write_text(out_dir / "summary.csv", summary_csv(r));
  write_text(out_dir / "config.txt", config_echo(r.config));
  nlohmann::ordered_json t;
  t["wall_clock_seconds"] = seconds;
  write_text(out_dir / "timing.json", t.dump(2) + "\n");
}

inline ExperimentResult run_and_write(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  auto r = run_experiment_any(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_run_outputs(out_dir, r, secs);
  return r;
}

struct GridOutcome {
  std::string cell;
  bool ok = false;
  std::string error;
};

/// Runs every cell into out_dir/<cell name>; failures are recorded in
/// error.txt and do not stop the grid.
inline std::vector<GridOutcome> run_grid(const std::vector<ExperimentConfig>& cells, const std::filesystem::path& out_dir,
                                         std::size_t jobs = 1) {
  std::vector<GridOutcome> outcomes(cells.size());
  std::mutex log_mu;
  auto work = [&](std::size_t i) {
    const auto dir = out_dir / cells[i].name;
    outcomes[i].cell = cells[i].name;
    try {
      run_and_write(cells[i], dir);
      outcomes[i].ok = true;
    } catch (const std::exception& e) {
      outcomes[i].error = e.what();
      std::filesystem::create_directories(dir);
      write_text(dir / "error.txt", std::string(e.what()) + "\n");
    }
    std::lock_guard lock(log_mu);
    std::cerr << (outcomes[i].ok ? "[ok]   " : "[fail] ") << cells[i].name << '\n';
  };
  jobs = std::max<std::size_t>(1, jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) work(i);
      });
  }
  return outcomes;
}

}  // namespace odics
